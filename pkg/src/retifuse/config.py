"""Flat ``section.key = value`` run configuration.

Lines starting with ``#`` are comments. Every key must appear in SCHEMA;
values are parsed with the listed type. Command-line flags override file
values.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip().lower() in ("none", "") else int(text)


SCHEMA = {
    "global.seed": (int, 0),
    "split.ratio": (float, 0.8),
    "synth.per_class": (int, 82),
    "synth.holdout_per_class": (int, 20),
    "synth.images_per_class": (int, 20),
    "synth.image_size": (int, 112),
    "synth.sigma": (float, 1.0),
    "synth.mean_scale": (float, 0.25),
    "encoder.seed": (int, 0),
    "tabular.epochs": (int, 20),
    "tabular.batch_size": (int, 32),
    "tabular.lr": (float, 1e-3),
    "fusion.strategy": (str, "concat"),
    "fusion.epochs": (int, 10),
    "fusion.batch_size": (int, 32),
    "fusion.lr": (float, 1e-3),
    "fusion.k": (int, 5),
    "fusion.per_class": (_opt_int, 82),
    "fusion.balance_test": (_bool, True),
    "perturb.per_class": (int, 20),
    "perturb.rotation_range": (float, 30.0),
    "perturb.blur_kernel": (int, 5),
    "perturb.blur_sigma_min": (float, 0.1),
    "perturb.blur_sigma_max": (float, 2.0),
    "perturb.brightness": (float, 0.2),
    "perturb.contrast": (float, 0.2),
    "perturb.saturation": (float, 0.2),
    "deferral.epochs": (int, 100),
    "deferral.batch_size": (int, 64),
    "deferral.lr": (float, 1e-3),
    "deferral.margin": (float, 1.0),
    "deferral.contrastive_weight": (float, 1.0),
    "deferral.bce_weight": (float, 1.0),
    "deferral.val_fraction": (float, 0.2),
    "deferral.patience": (int, 5),
    "deferral.factor": (float, 0.5),
    "deferral.min_lr": (float, 1e-6),
    "deferral.threshold": (float, 0.8),
    "tsne.perplexity": (float, 30.0),
    "tsne.iterations": (int, 1000),
    "tsne.learning_rate": (float, 200.0),
    "tsne.exaggeration": (float, 12.0),
    "tsne.exaggeration_iters": (int, 250),
}


def parse_config(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


def load_config(path) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


class RunConfig:
    """Resolved settings: flag > config file > built-in default."""

    def __init__(self, file_values: dict | None = None, overrides: dict | None = None):
        self.file_values = dict(file_values or {})
        self.overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        for key in self.overrides:
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")

    def get(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        if key in self.overrides:
            return self.overrides[key]
        if key in self.file_values:
            return self.file_values[key]
        return SCHEMA[key][1]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: self.get(k) for k in SCHEMA if k.startswith(prefix)}

    @property
    def seed(self) -> int:
        return int(self.get("global.seed"))

    def resolved(self) -> dict:
        return {k: self.get(k) for k in sorted(SCHEMA)}
