import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retifuse.errors import ConfigError, DimensionError, FormatError, InsufficientDataError
from retifuse.perturb import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    PerturbConfig,
    adjust_brightness,
    color_jitter,
    decode_ppm,
    encode_ppm,
    gaussian_blur,
    gaussian_kernel1d,
    make_adversarial,
    preprocess,
    read_ppm,
    rotate,
    stream_rng,
    synth_fundus,
    write_ppm,
)


def _blob(h=40, w=40):
    yy, xx = np.mgrid[0:h, 0:w]
    g = np.exp(-(((yy - h / 2) ** 2 + (xx - w / 2) ** 2) / (2 * (h / 6) ** 2)))
    return np.stack([g, 0.6 * g, 0.3 * g], axis=-1)


def _balanced_set(per_class=20, size=24, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(5), per_class)
    images = [rng.random((size, size, 3)) for _ in labels]
    ids = [f"img{i:03d}" for i in range(labels.size)]
    return images, labels, ids


# -- PPM ---------------------------------------------------------------------

def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    assert encode_ppm(img).startswith(b"P6\n7 5\n255\n")


def test_ppm_comments_and_errors():
    body = bytes(range(12))
    img = decode_ppm(b"P6 # comment\n2 2\n255\n" + body)
    assert img.shape == (2, 2, 3)
    with pytest.raises(FormatError):
        decode_ppm(b"P3\n1 1\n255\n")
    with pytest.raises(FormatError):
        decode_ppm(b"P6\n2 2\n255\n" + body[:5])
    with pytest.raises(FormatError):
        decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))


# -- preprocess --------------------------------------------------------------

def test_preprocess_mean_cancels():
    img = np.full((300, 260, 3), 0.2)
    img[..., 0] = 0.485
    out = preprocess(img)
    assert out.shape == (224, 224, 3)
    np.testing.assert_allclose(out[..., 0], 0.0, atol=1e-12)


def test_preprocess_224_is_pure_normalization():
    img = np.random.default_rng(1).random((224, 224, 3))
    np.testing.assert_array_equal(preprocess(img), (img - IMAGENET_MEAN) / IMAGENET_STD)


def test_preprocess_wide_image_keeps_center_columns():
    img = np.random.default_rng(2).random((224, 448, 3))
    np.testing.assert_array_equal(preprocess(img), (img[:, 112:336] - IMAGENET_MEAN) / IMAGENET_STD)


def test_preprocess_too_small():
    with pytest.raises(DimensionError):
        preprocess(np.zeros((1, 5, 3)))


# -- rotation ----------------------------------------------------------------

def test_rotate_zero_is_bit_identity():
    img = np.random.default_rng(3).random((13, 17, 3))
    assert rotate(img, 0.0).tobytes() == img.tobytes()


def test_rotate_roundtrip_smooth():
    img = _blob()
    back = rotate(rotate(img, 30.0), -30.0)
    assert np.abs(back - img).mean() < 0.05


@pytest.mark.parametrize("angle", [7.0, 30.0, -45.0, 90.0, 180.0])
def test_rotate_center_pixel_fixed(angle):
    img = np.zeros((9, 9, 3))
    img[4, 4] = 1.0
    out = rotate(img, angle)
    np.testing.assert_allclose(out[4, 4], 1.0, atol=1e-12)
    assert out.shape == img.shape


def test_rotate_range_checked():
    with pytest.raises(ConfigError):
        rotate(np.zeros((3, 3, 3)), 200.0)


# -- blur --------------------------------------------------------------------

def test_blur_constant_image():
    img = np.full((10, 12, 3), 0.37)
    np.testing.assert_allclose(gaussian_blur(img, 5, 1.3), img, atol=1e-6)


def test_blur_impulse_gives_outer_product():
    img = np.zeros((11, 11, 3))
    img[5, 5] = 1.0
    k = gaussian_kernel1d(5, 0.8)
    out = gaussian_blur(img, 5, 0.8)
    np.testing.assert_allclose(out[3:8, 3:8, 1], np.outer(k, k), atol=1e-15)
    assert out[:3].sum() == 0 and out[8:].sum() == 0


def test_blur_even_kernel_rejected():
    with pytest.raises(ConfigError):
        gaussian_blur(np.zeros((5, 5, 3)), 4, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 2.0), st.floats(-3.0, 3.0))
def test_blur_variance_and_offset(seed, sigma, k):
    img = np.random.default_rng(seed).random((12, 10, 3))
    out = gaussian_blur(img, 5, sigma)
    assert out.var() <= img.var() + 1e-12
    np.testing.assert_allclose(gaussian_blur(img + k, 5, sigma), out + k, atol=1e-6)


def test_kernel_normalized():
    assert gaussian_kernel1d(5, 0.1).sum() == pytest.approx(1.0, abs=1e-15)


# -- jitter ------------------------------------------------------------------

def test_jitter_unit_factors_identity():
    img = np.random.default_rng(4).random((8, 8, 3))
    assert color_jitter(img, 1.0, 1.0, 1.0).tobytes() == img.tobytes()


def test_brightness_example():
    assert adjust_brightness(np.full((1, 1, 3), 0.5), 1.2)[0, 0, 0] == pytest.approx(0.6)


def test_saturation_zero_is_gray():
    img = np.random.default_rng(5).random((6, 6, 3))
    out = color_jitter(img, 1.0, 1.0, 0.0)
    np.testing.assert_allclose(out[..., 0], out[..., 1], atol=1e-15)
    np.testing.assert_allclose(out[..., 1], out[..., 2], atol=1e-15)
    np.testing.assert_allclose(out[..., 0], img @ [0.299, 0.587, 0.114], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.8, 1.2), st.floats(0.8, 1.2), st.floats(0.8, 1.2))
def test_jitter_stays_in_unit_range(seed, b, c, s):
    out = color_jitter(np.random.default_rng(seed).random((5, 5, 3)), b, c, s)
    assert out.min() >= 0.0 and out.max() <= 1.0


# -- adversarial set ---------------------------------------------------------

def test_make_adversarial_counts_and_tags():
    images, labels, ids = _balanced_set()
    out = make_adversarial(images, labels, ids, seed=3)
    assert len(out) == 100
    assert np.bincount([o.label for o in out]).tolist() == [20] * 5
    assert all(o.quality == "adversarial" and o.image.shape == (24, 24, 3) for o in out)
    for o in out:
        p = o.params
        assert -30 <= p["angle"] <= 30 and 0.1 <= p["sigma"] <= 2.0
        assert all(0.8 <= p[k] <= 1.2 for k in ("brightness", "contrast", "saturation"))


def test_make_adversarial_deterministic_and_order_free():
    images, labels, ids = _balanced_set(per_class=2)
    a = make_adversarial(images, labels, ids, seed=11)
    b = make_adversarial(images, labels, ids, seed=11)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    perm = np.random.default_rng(0).permutation(len(ids))
    c = make_adversarial([images[i] for i in perm], labels[perm], [ids[i] for i in perm], seed=11)
    by_id = {x.sample_id: x.image.tobytes() for x in c}
    assert all(by_id[x.sample_id] == x.image.tobytes() for x in a)
    d = make_adversarial(images, labels, ids, seed=12)
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, d))


def test_make_adversarial_identity_config():
    images, labels, ids = _balanced_set(per_class=1)
    out = make_adversarial(images, labels, ids, PerturbConfig.identity(), seed=0)
    assert all(o.image.tobytes() == img.tobytes() for o, img in zip(out, images))


def test_make_adversarial_rejects_imbalance():
    images, labels, ids = _balanced_set(per_class=2)
    with pytest.raises(InsufficientDataError):
        make_adversarial(images[:-1], labels[:-1], ids[:-1])


def test_config_validation():
    with pytest.raises(ConfigError):
        PerturbConfig(blur_kernel=4)
    with pytest.raises(ConfigError):
        PerturbConfig(brightness=-0.1)


def test_stream_rng_depends_on_seed_and_key():
    a = stream_rng(1, "x").random()
    assert a == stream_rng(1, "x").random()
    assert a != stream_rng(2, "x").random()
    assert a != stream_rng(1, "y").random()


def test_synth_fundus_range_and_determinism():
    a = synth_fundus(3, np.random.default_rng(0), 48)
    b = synth_fundus(3, np.random.default_rng(0), 48)
    assert a.shape == (48, 48, 3) and a.min() >= 0 and a.max() <= 1
    assert a.tobytes() == b.tobytes()
