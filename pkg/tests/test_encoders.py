import math

import numpy as np
import pytest

from retifuse.encoders import BaselineEncoder, PrecomputedEncoder, TabularProjection, encode_image, project_tabular
from retifuse.errors import DimensionError, UnknownIdError
from retifuse.formats import EmbeddingFile
from retifuse.numcore import finite_diff_check
from retifuse.perturb import preprocess


def _file(n=4):
    data = np.random.default_rng(0).standard_normal((n, 512)).astype(np.float32)
    return EmbeddingFile([f"s{i}" for i in range(n)], data)


def test_precomputed_lookup_is_verbatim():
    ef = _file()
    before = ef.data.copy()
    enc = PrecomputedEncoder(ef)
    np.testing.assert_array_equal(encode_image("s2", enc), ef.data[2].astype(np.float64))
    np.testing.assert_array_equal(enc.encode_many(["s3", "s0"]), ef.data[[3, 0]].astype(np.float64))
    enc.encode("s1")[:] = 99.0
    np.testing.assert_array_equal(ef.data, before)


def test_precomputed_unknown_id_and_width():
    with pytest.raises(UnknownIdError):
        PrecomputedEncoder(_file()).encode("nope")
    with pytest.raises(DimensionError):
        PrecomputedEncoder(EmbeddingFile(["a"], np.zeros((1, 10))))


def test_baseline_zero_image_gives_zero():
    out = BaselineEncoder(3).encode(np.zeros((224, 224, 3)))
    assert out.shape == (512,)
    assert not out.any()


def test_baseline_deterministic_and_seeded():
    img = preprocess(np.random.default_rng(1).random((60, 80, 3)))
    a = BaselineEncoder(5).encode(img)
    b = BaselineEncoder(5).encode(img)
    c = BaselineEncoder(6).encode(img)
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(a, c)


def test_baseline_projection_scale():
    proj = BaselineEncoder(0).projection
    assert proj.shape == (512, 768)
    assert proj.std() == pytest.approx(1 / math.sqrt(768), rel=0.02)
    assert not proj.flags.writeable


def test_baseline_is_linear():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((224, 224, 3)), rng.standard_normal((224, 224, 3))
    enc = BaselineEncoder(1)
    np.testing.assert_allclose(enc.encode(2 * x + y), 2 * enc.encode(x) + enc.encode(y), atol=1e-10)


def test_projection_zero_input_tokens_equal_layernorm_of_bias():
    proj = TabularProjection(rng=np.random.default_rng(0))
    out = project_tabular(np.zeros(4), proj)
    b = proj.linear.params["b"]
    expected = (b - b.mean()) / np.sqrt(b.var() + 1e-5)
    for tok in out:
        np.testing.assert_allclose(tok, expected, atol=1e-12)


def test_projection_equal_scalars_equal_tokens_and_moments():
    out = project_tabular(np.array([0.7, -1.2, 0.7, 2.0]), TabularProjection(rng=np.random.default_rng(1)))
    assert out.shape == (4, 512)
    np.testing.assert_array_equal(out[0], out[2])
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=1), 1, atol=1e-3)


def test_projection_permutation_equivariant():
    proj = TabularProjection(rng=np.random.default_rng(2))
    x = np.random.default_rng(3).standard_normal((5, 4))
    perm = [2, 0, 3, 1]
    np.testing.assert_array_equal(proj.forward(x[:, perm]), proj.forward(x)[:, perm])


def test_projection_wrong_feature_count():
    with pytest.raises(DimensionError):
        TabularProjection().forward(np.zeros((2, 3)))


def test_projection_gradient_shared_across_tokens():
    proj = TabularProjection(rng=np.random.default_rng(4))
    x = np.random.default_rng(5).standard_normal((3, 4))
    assert finite_diff_check(proj, x, max_entries=64) < 1e-4
    # the shared weight gradient is the sum of per-token contributions
    proj.zero_grad()
    r = np.random.default_rng(6).standard_normal((3, 4, 512))
    proj.forward(x)
    proj.backward(r)
    total = proj.linear.grads["W"].copy()
    parts = np.zeros_like(total)
    for j in range(4):
        proj.zero_grad()
        proj.forward(x)
        mask = np.zeros_like(r)
        mask[:, j] = r[:, j]
        proj.backward(mask)
        parts += proj.linear.grads["W"]
    np.testing.assert_allclose(total, parts, atol=1e-12)
