"""``retifuse`` command line: one file-based pipeline stage per subcommand.

Every subcommand reads its inputs from files, writes its outputs atomically,
and exits 0 only when all outputs were written. ``--config FILE`` supplies
``section.key = value`` settings; explicit flags override them.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCHEMA, RunConfig, load_config
from .dataprep import (
    N_CLASSES,
    SELECTED_FEATURES,
    Scaler,
    clean,
    class_weights,
    downsample_balanced,
    load_dataset,
    read_records,
    split_train_test,
    synth_generate,
    write_dataset,
)
from .deferral import (
    ADVERSARIAL,
    GOOD,
    ContrastiveNet,
    DeferralConfig,
    accept_mask,
    decide,
    score,
    train_deferral,
)
from .encoders import BaselineEncoder, PrecomputedEncoder
from .errors import ConfigError, FormatError, RetifuseError, UnknownIdError
from .formats import (
    atomic_write_text,
    read_checkpoint,
    read_embeddings,
    write_checkpoint,
    write_embeddings,
)
from .fusion import FUSED_DIM, FusionModel, canonical_strategy
from .metrics import MetricsReport, accuracy, auroc_binary, confusion_matrix
from .perturb import PerturbConfig, make_adversarial, preprocess, read_ppm, stream_rng, synth_fundus, write_ppm
from .report import aggregate, report_emit, scatter_svg, write_json
from .training import TrainConfig, fusion_inputs, train_fusion_cv, train_tabular
from .tsne import TsneConfig, tsne_embed

STAGE_LABELS = ["0", "1", "2", "3", "4"]


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _settings(args, mapping: dict) -> RunConfig:
    """Merge the config file with flags; ``mapping`` is {flag attr: config key}."""
    file_values = load_config(args.config) if args.config else {}
    overrides = {key: getattr(args, attr, None) for attr, key in mapping.items()}
    overrides["global.seed"] = args.seed
    return RunConfig(file_values, overrides)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input not found: {p}")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v: float) -> str:
    return repr(float(v))


def _module_state(module, prefix: str = "") -> dict:
    return {prefix + k: v for k, v in module.state_dict().items()}


def _load_module(module, tensors: dict, prefix: str = ""):
    module.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    module.eval()
    return module


def _read_kind(path, kind: str) -> tuple[dict, dict]:
    tensors, meta = read_checkpoint(_require(path))
    if meta.get("kind") != kind:
        raise ConfigError(f"{path} is a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    return tensors, meta


def _image_ids(directory: Path) -> list[str]:
    return sorted(p.stem for p in directory.glob("*.ppm"))


def _read_id_list(path) -> list[str]:
    return [line.strip() for line in _require(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def _read_manifest(path) -> dict[str, str]:
    with open(_require(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"sample_id", "source_id"} <= set(rows[0]):
        raise FormatError(f"{path}: manifest needs sample_id and source_id columns")
    return {r["sample_id"]: r["source_id"] for r in rows}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = _settings(args, {"per_class": "synth.per_class", "holdout_per_class": "synth.holdout_per_class",
                           "images_per_class": "synth.images_per_class", "image_size": "synth.image_size"})
    s = cfg.section("synth")
    out = _out_dir(args.out)
    ds, emb = synth_generate(s["per_class"], cfg.seed, sigma=s["sigma"], mean_scale=s["mean_scale"],
                             holdout_per_class=s["holdout_per_class"])
    write_dataset(ds, out / "dataset.csv")
    write_embeddings(out / "embeddings.emb", emb, ds.sample_ids)
    n_img = s["images_per_class"]
    if n_img:
        img_dir = _out_dir(out / "images")
        train = ds.where_split("train")
        for c in range(N_CLASSES):
            for i in np.flatnonzero(train.y == c)[:n_img]:
                sid = train.sample_ids[i]
                write_ppm(img_dir / f"{sid}.ppm", synth_fundus(c, stream_rng(cfg.seed, sid), s["image_size"]))
    print(f"synth: {len(ds)} samples ({len(ds.where_split('train'))} train) -> {out}")


def cmd_prep(args) -> None:
    cfg = _settings(args, {"ratio": "split.ratio"})
    out = _out_dir(args.out)
    ds = clean(read_records(_require(args.input)))
    if not all(tag in ("train", "test") for tag in ds.split):
        ds = split_train_test(ds, cfg.get("split.ratio"), cfg.seed)
    train = ds.where_split("train")
    scaler = Scaler.fit(train.X)
    counts = train.class_counts()
    write_dataset(ds, out / "dataset.csv")
    write_json(out / "prep.json", {
        "n": len(ds),
        "n_train": len(train),
        "n_test": len(ds) - len(train),
        "train_class_counts": counts.astype(int).tolist(),
        "class_weights": class_weights(counts).tolist() if counts.min() > 0 else None,
        "scaler": scaler.to_dict(),
        "feature_names": list(ds.feature_names),
        "selected_features": list(SELECTED_FEATURES),
    })
    print(f"prep: {len(ds)} records -> {out}")


def cmd_embed(args) -> None:
    cfg = _settings(args, {"encoder_seed": "encoder.seed"})
    if args.encoder == "precomputed":
        if not args.source or not args.ids:
            raise ConfigError("--encoder precomputed needs --source and --ids")
        enc = PrecomputedEncoder(read_embeddings(_require(args.source)))
        ids = _read_id_list(args.ids)
        data = enc.encode_many(ids)
    else:
        if not args.images:
            raise ConfigError("--encoder baseline needs --images")
        directory = _require(args.images)
        ids = _read_id_list(args.ids) if args.ids else _image_ids(directory)
        if not ids:
            raise FormatError(f"no .ppm images in {directory}")
        enc = BaselineEncoder(cfg.get("encoder.seed"))
        data = np.stack([enc.encode(preprocess(read_ppm(_require(directory / f"{sid}.ppm")))) for sid in ids])
    write_embeddings(args.out, data, ids)
    print(f"embed: {len(ids)} x {data.shape[1]} -> {args.out}")


def cmd_perturb(args) -> None:
    cfg = _settings(args, {"per_class": "perturb.per_class"})
    p = cfg.section("perturb")
    config = PerturbConfig(p["rotation_range"], p["blur_kernel"], (p["blur_sigma_min"], p["blur_sigma_max"]),
                           p["brightness"], p["contrast"], p["saturation"])
    directory = _require(args.images)
    ds = load_dataset(_require(args.dataset))
    index = ds.index_of()
    ids = [sid for sid in _image_ids(directory) if sid in index]
    if not ids:
        raise FormatError(f"no images in {directory} match dataset ids")
    labels = np.array([ds.y[index[sid]] for sid in ids])
    keep = downsample_balanced(labels, p["per_class"], cfg.seed)
    chosen = [ids[i] for i in keep]
    images = [read_ppm(directory / f"{sid}.ppm") for sid in chosen]
    advs = make_adversarial(images, labels[keep], chosen, config, cfg.seed)
    out = _out_dir(args.out)
    rows = []
    for item in advs:
        write_ppm(out / f"{item.sample_id}.ppm", item.image)
        prm = item.params
        rows.append([item.sample_id, item.source_id, item.label, item.quality,
                     *(_num(prm[k]) for k in ("angle", "sigma", "brightness", "contrast", "saturation"))])
    atomic_write_text(out / "manifest.csv", _csv_text(
        ["sample_id", "source_id", "dr_stage", "quality", "angle", "sigma", "brightness", "contrast", "saturation"],
        rows))
    atomic_write_text(out / "originals.txt", "".join(f"{sid}\n" for sid in chosen))
    print(f"perturb: {len(advs)} adversarial images -> {out}")


def _fusion_config(cfg: RunConfig) -> TrainConfig:
    f = cfg.section("fusion")
    return TrainConfig(epochs=f["epochs"], batch_size=f["batch_size"], lr=f["lr"], seed=cfg.seed,
                       strategy=f["strategy"], k=f["k"], per_class=f["per_class"], balance_test=f["balance_test"])


def cmd_train_fusion(args) -> None:
    cfg = _settings(args, {"strategy": "fusion.strategy", "epochs": "fusion.epochs", "k": "fusion.k",
                           "per_class": "fusion.per_class"})
    config = _fusion_config(cfg)
    ds = load_dataset(_require(args.dataset))
    images = read_embeddings(_require(args.embeddings))
    train, test = ds.where_split("train"), ds.where_split("test")
    result = train_fusion_cv(train, images, config, test=test if len(test) else None)
    out = _out_dir(args.out)
    tensors = {}
    for fr in result.folds:
        tensors.update(_module_state(fr.model, f"fold{fr.fold}."))
    write_checkpoint(out / "model.ckpt", tensors, {
        "kind": "fusion",
        "strategy": result.strategy,
        "k": config.k,
        "best_fold": result.best_fold,
        "scaler": result.scaler.to_dict(),
        "feature_names": list(ds.feature_names),
    })
    summary = result.to_dict()
    primary = result.test_metrics or MetricsReport.from_dict({
        "n": sum(f.val_metrics.n for f in result.folds),
        "accuracy": summary["fold_val_mean"]["accuracy"],
        "auroc_macro": summary["fold_val_mean"]["auroc_macro"],
        "auroc_per_class": [None] * N_CLASSES,
        "confusion": summary["fold_val_mean"]["confusion_sum"],
    })
    summary["evaluated_on"] = "test" if result.test_metrics else "fold_val"
    report_emit(primary, out / "metrics", extra=summary, labels=STAGE_LABELS,
                title=f"fusion ({result.strategy})")
    print(f"train-fusion[{result.strategy}]: fold-val acc {summary['fold_val_mean']['accuracy']:.4f}, "
          f"{summary['evaluated_on']} acc {primary.accuracy:.4f} -> {out}")


def cmd_train_tabular(args) -> None:
    cfg = _settings(args, {"epochs": "tabular.epochs"})
    t = cfg.section("tabular")
    config = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], seed=cfg.seed, per_class=None)
    ds = load_dataset(_require(args.dataset))
    result = train_tabular(ds, config)
    out = _out_dir(args.out)
    write_checkpoint(out / "model.ckpt", _module_state(result.model),
                     {"kind": "tabular", "scaler": result.scaler.to_dict(), "feature_names": list(ds.feature_names)})
    primary = result.test_metrics or result.train_metrics
    summary = result.to_dict()
    summary["evaluated_on"] = "test" if result.test_metrics else "train"
    report_emit(primary, out / "metrics", extra=summary, labels=STAGE_LABELS, title="tabular")
    print(f"train-tabular: {summary['evaluated_on']} acc {primary.accuracy:.4f} -> {out}")


def cmd_fuse(args) -> None:
    tensors, meta = _read_kind(args.checkpoint, "fusion")
    if args.strategy and canonical_strategy(args.strategy) != meta["strategy"]:
        raise ConfigError(f"checkpoint strategy is {meta['strategy']!r}, requested {args.strategy!r}")
    fold = meta["best_fold"] if args.fold is None else args.fold
    if not 0 <= fold < meta["k"]:
        raise ConfigError(f"fold must lie in [0, {meta['k']})")
    model = _load_module(FusionModel(meta["strategy"]), tensors, f"fold{fold}.")
    ds = load_dataset(_require(args.dataset))
    images = read_embeddings(_require(args.embeddings))
    mapping = _read_manifest(args.manifest) if args.manifest else {}
    index = ds.index_of()
    rows = []
    for sid in images.ids:
        src = mapping.get(sid, sid)
        if src not in index:
            raise UnknownIdError(f"no tabular record for {sid!r} (source {src!r})")
        rows.append(index[src])
    view = ds.subset(np.array(rows, dtype=np.int64))
    img, tab = fusion_inputs(view, images.data, Scaler.from_dict(meta["scaler"]))
    fused = model.embed(img, tab)
    write_embeddings(args.out, fused, images.ids)
    print(f"fuse[{meta['strategy']}, fold {fold}]: {fused.shape[0]} x {FUSED_DIM} -> {args.out}")


def _deferral_config(cfg: RunConfig) -> DeferralConfig:
    d = cfg.section("deferral")
    return DeferralConfig(seed=cfg.seed, **d)


def _deferral_report(y, p, threshold) -> MetricsReport:
    accept = accept_mask(p, threshold).astype(np.int64)
    auc_good = auroc_binary(p, y == GOOD)
    return MetricsReport(confusion_matrix(y, accept, 2), accuracy(y, accept),
                         [auroc_binary(1.0 - p, y == ADVERSARIAL), auc_good], auc_good, int(y.size))


def cmd_train_deferral(args) -> None:
    cfg = _settings(args, {"epochs": "deferral.epochs", "threshold": "deferral.threshold"})
    config = _deferral_config(cfg)
    good = read_embeddings(_require(args.good))
    adv = read_embeddings(_require(args.adversarial))
    result = train_deferral(good.data, adv.data, config)
    x = np.vstack([good.data, adv.data]).astype(np.float64)
    y = np.concatenate([np.full(good.rows, GOOD), np.full(adv.rows, ADVERSARIAL)])
    p = score(result.net, x[result.val_idx])
    report = _deferral_report(y[result.val_idx], p, config.threshold)
    out = _out_dir(args.out)
    write_checkpoint(out / "model.ckpt", _module_state(result.net),
                     {"kind": "deferral", "in_dim": int(x.shape[1]), "threshold": config.threshold})
    extra = {"kind": "deferral", "history": result.history, "summary": result.summary(),
             "deferral_rate": float(1.0 - accept_mask(p, config.threshold).mean()),
             "rows": "true (0 adversarial, 1 good)", "cols": "verdict (0 defer, 1 accept)"}
    report_emit(report, out / "metrics", extra=extra, labels=["adversarial/defer", "good/accept"],
                title="deferral (validation)")
    print(f"train-deferral: val acc {report.accuracy:.4f} -> {out}")


def _load_deferral(path) -> tuple[ContrastiveNet, dict]:
    tensors, meta = _read_kind(path, "deferral")
    return _load_module(ContrastiveNet(in_dim=meta["in_dim"]), tensors), meta


def cmd_score(args) -> None:
    cfg = _settings(args, {"threshold": "deferral.threshold"})
    threshold = cfg.get("deferral.threshold")
    net, meta = _load_deferral(args.checkpoint)
    emb = read_embeddings(_require(args.embeddings))
    if emb.cols != meta["in_dim"]:
        raise ConfigError(f"embeddings have {emb.cols} columns, checkpoint expects {meta['in_dim']}")
    p = score(net, emb.data)
    rows = []
    for sid, s in zip(emb.ids, p):
        d = decide(s, threshold)
        rows.append([sid, _num(d.quality_score), d.verdict])
    atomic_write_text(args.out, _csv_text(["sample_id", "quality_score", "verdict"], rows))
    deferred = sum(r[2] == "defer" for r in rows)
    print(f"score: {deferred}/{len(rows)} deferred at threshold {threshold} -> {args.out}")


def cmd_tsne(args) -> None:
    cfg = _settings(args, {"perplexity": "tsne.perplexity", "iterations": "tsne.iterations"})
    t = cfg.section("tsne")
    parts = [("good", read_embeddings(_require(args.good)))]
    if args.adversarial:
        parts.append(("adversarial", read_embeddings(_require(args.adversarial))))
    ids = [sid for _, e in parts for sid in e.ids]
    labels = [lab for lab, e in parts for _ in e.ids]
    x = np.vstack([e.data for _, e in parts]).astype(np.float64)
    if args.checkpoint:
        net, _ = _load_deferral(args.checkpoint)
        x = net.project(x)
    config = TsneConfig(perplexity=min(t["perplexity"], (x.shape[0] - 1) / 3.0), iterations=t["iterations"],
                        learning_rate=t["learning_rate"], exaggeration=t["exaggeration"],
                        exaggeration_iters=t["exaggeration_iters"], seed=cfg.seed)
    res = tsne_embed(x, config)
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    rows = [[sid, _num(px), _num(py), lab] for sid, (px, py), lab in zip(ids, res.embedding, labels)]
    atomic_write_text(base.with_name(base.name + ".csv"), _csv_text(["sample_id", "x", "y", "label"], rows))
    title = "t-SNE of deferral projections" if args.checkpoint else "t-SNE of embeddings"
    atomic_write_text(base.with_name(base.name + ".svg"), scatter_svg(res.embedding, labels, title))
    print(f"tsne: {x.shape[0]} points, final KL {res.kl_history[-1]:.4f} -> {base}.csv/.svg")


def cmd_report(args) -> None:
    files = [_require(p) for p in args.inputs]
    markdown, index = aggregate(files)
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(base.with_name(base.name + ".md"), markdown)
    write_json(base.with_name(base.name + ".json"), index)
    print(f"report: {len(files)} metrics files -> {base}.md/.json")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k} (default {v[1]!r})" for k, v in SCHEMA.items())
    parser = argparse.ArgumentParser(
        prog="retifuse",
        description="Multimodal retinopathy staging with deferral: file-based pipeline stages.",
        epilog="config keys (section.key = value):\n" + keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides global.seed)")
    common.add_argument("--error-json", action="store_true", help="report failures as JSON on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset, image embeddings and fundus-like images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", dest="per_class", type=int, help="train samples per stage")
    p.add_argument("--holdout-per-class", dest="holdout_per_class", type=int, help="test samples per stage")
    p.add_argument("--images-per-class", dest="images_per_class", type=int, help="PPM images per stage")
    p.add_argument("--image-size", dest="image_size", type=int, help="PPM side length")

    p = add("prep", cmd_prep, "clean a raw CSV, assign train/test splits, record scaler and class weights")
    p.add_argument("--input", required=True, help="raw tabular CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ratio", type=float, help="train fraction")

    p = add("embed", cmd_embed, "build a 512-column embedding file from images or a precomputed file")
    p.add_argument("--encoder", choices=("baseline", "precomputed"), default="baseline")
    p.add_argument("--images", help="directory of .ppm images (baseline)")
    p.add_argument("--source", help="embedding file to look ids up in (precomputed)")
    p.add_argument("--ids", help="file with one sample id per line")
    p.add_argument("--encoder-seed", dest="encoder_seed", type=int, help="baseline projection seed")
    p.add_argument("--out", required=True, help="output embedding file")

    p = add("perturb", cmd_perturb, "write rotated, blurred and colour-jittered copies of a class-balanced image set")
    p.add_argument("--images", required=True, help="directory of .ppm images")
    p.add_argument("--dataset", required=True, help="dataset CSV with stage labels")
    p.add_argument("--per-class", dest="per_class", type=int, help="images per stage")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train-tabular", cmd_train_tabular, "train the 17-feature tabular baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="output directory")

    p = add("train-fusion", cmd_train_fusion, "k-fold training of one fusion strategy")
    p.add_argument("--dataset", required=True)
    p.add_argument("--embeddings", required=True, help="image embedding file keyed by sample id")
    p.add_argument("--strategy", choices=("concat", "fc", "xattn"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--k", type=int, help="number of folds")
    p.add_argument("--per-class", dest="per_class", type=int, help="downsampled pool size per stage")
    p.add_argument("--out", required=True, help="output directory")

    p = add("fuse", cmd_fuse, "map image embeddings to 1024-d fused embeddings with a fusion checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", help="perturbation manifest mapping ids to source ids")
    p.add_argument("--strategy", choices=("concat", "fc", "xattn"), help="fail unless the checkpoint matches")
    p.add_argument("--fold", type=int, help="fold model to use (default: best validation fold)")
    p.add_argument("--out", required=True, help="output embedding file")

    p = add("train-deferral", cmd_train_deferral, "train the contrastive quality scorer")
    p.add_argument("--good", required=True, help="fused embeddings of original images")
    p.add_argument("--adversarial", required=True, help="fused embeddings of perturbed images")
    p.add_argument("--epochs", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True, help="output directory")

    p = add("score", cmd_score, "per-sample quality scores and accept/defer verdicts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True, help="output CSV")

    p = add("tsne", cmd_tsne, "2-D t-SNE of good vs adversarial embeddings")
    p.add_argument("--good", required=True)
    p.add_argument("--adversarial")
    p.add_argument("--checkpoint", help="deferral checkpoint; embed its projections instead of raw inputs")
    p.add_argument("--perplexity", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", required=True, help="output prefix (writes .csv and .svg)")

    p = add("report", cmd_report, "aggregate metrics JSON files into markdown and JSON")
    p.add_argument("inputs", nargs="+", help="metrics JSON files")
    p.add_argument("--out", required=True, help="output prefix (writes .md and .json)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (RetifuseError, OSError, ValueError, KeyError) as exc:
        message = str(exc) if not isinstance(exc, KeyError) or isinstance(exc, UnknownIdError) else repr(exc)
        if args.error_json:
            print(json.dumps({"error": type(exc).__name__, "message": message, "command": args.command},
                             sort_keys=True), file=sys.stderr)
        else:
            print(f"retifuse {args.command}: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
