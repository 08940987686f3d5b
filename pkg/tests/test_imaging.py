import colorsys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image as PILImage

from cyclelight import imaging

images = arrays(
    np.float32, (12, 10, 3),
    elements=st.floats(0, 1, width=32, allow_nan=False),
)


def test_rgb_to_hsv_black_image():
    hsv = imaging.rgb_to_hsv(np.zeros((8, 8, 3), dtype=np.float32))
    assert np.all(hsv[..., 1] == 0)
    assert np.all(hsv[..., 2] == 0)


def test_rgb_to_hsv_pure_red():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    img[..., 0] = 1.0
    hsv = imaging.rgb_to_hsv(img)
    assert np.allclose(hsv[..., 0], 0.0)
    assert np.allclose(hsv[..., 1], 1.0)
    assert np.allclose(hsv[..., 2], 1.0)


def test_rgb_to_hsv_pinned_pixel():
    # hand evaluation of the hexcone formula for (0.2, 0.4, 0.6):
    # V = 0.6, S = 0.4/0.6, blue is max -> H = 60*(4 + (r-g)/c) = 210
    img = np.full((8, 8, 3), (0.2, 0.4, 0.6), dtype=np.float64)
    hsv = imaging.rgb_to_hsv(img)
    assert np.allclose(hsv[..., 0], 210.0, atol=1e-12)
    assert np.allclose(hsv[..., 1], 0.4 / 0.6, atol=1e-12)
    assert np.allclose(hsv[..., 2], 0.6, atol=1e-12)


def test_rgb_to_hsv_roundtrip_against_colorsys():
    rng = np.random.default_rng(3)
    img = rng.random((16, 16, 3))
    hsv = imaging.rgb_to_hsv(img)
    for y, x in zip(rng.integers(0, 16, 64), rng.integers(0, 16, 64)):
        h, s, v = hsv[y, x]
        if s >= 1.0 or v == 0.0:
            continue
        back = colorsys.hsv_to_rgb(h / 360.0, s, v)
        assert np.allclose(back, img[y, x], atol=1e-6)


@given(images)
def test_illumination_prompt_sums_to_one(img):
    p = imaging.illumination_prompt(img)
    assert np.max(np.abs(p.v + p.v_reverse - 1.0)) <= 1e-7


def test_illumination_prompt_black():
    p = imaging.illumination_prompt(np.zeros((8, 8, 3), dtype=np.float32))
    assert np.all(p.v == 0.0)
    assert np.all(p.v_reverse == 1.0)


def test_illumination_prompt_is_max_channel():
    img = np.full((8, 8, 3), (0.25, 0.5, 0.75), dtype=np.float32)
    p = imaging.illumination_prompt(img)
    assert np.allclose(p.v, 0.75)
    assert np.allclose(p.v_reverse, 0.25)


@given(images)
def test_illumination_prompt_matches_hsv_v_exactly(img):
    p = imaging.illumination_prompt(img)
    assert np.array_equal(p.v, imaging.rgb_to_hsv(img)[..., 2])


def test_degrade_identity():
    rng = np.random.default_rng(0)
    img = rng.random((8, 8, 3)).astype(np.float32)
    out = imaging.degrade(img, gamma=1.0, noise_sigma=0.0, seed=0)
    assert np.allclose(out, img, atol=1e-7)


def test_degrade_gamma_square():
    img = np.full((8, 8, 3), 0.5, dtype=np.float32)
    out = imaging.degrade(img, gamma=2.0, noise_sigma=0.0, seed=0)
    assert np.allclose(out, 0.25, atol=1e-7)


def test_degrade_deterministic():
    rng = np.random.default_rng(1)
    img = rng.random((8, 8, 3)).astype(np.float32)
    a = imaging.degrade(img, 3.0, 0.05, seed=42)
    b = imaging.degrade(img, 3.0, 0.05, seed=42)
    assert np.array_equal(a, b)


@given(images, st.floats(1.0, 8.0))
def test_degrade_monotone_darkening(img, gamma):
    out = imaging.degrade(img, gamma, 0.0, seed=0)
    assert np.all(out <= img + 1e-6)


def test_degrade_rejects_nonpositive_gamma():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        imaging.degrade(img, 0.0, 0.0, seed=0)
    with pytest.raises(ValueError):
        imaging.degrade(img, -1.0, 0.0, seed=0)


def test_retinex_uniform_gray():
    img = np.full((32, 32, 3), 0.5, dtype=np.float32)
    t = imaging.retinex_decompose(img, blur_sigma=5.0, eps=0.01)
    assert np.allclose(t.illumination, 0.5, atol=1e-6)
    assert np.allclose(t.reflectance, 1.0, atol=1e-5)


def test_retinex_black_image():
    t = imaging.retinex_decompose(np.zeros((16, 16, 3), dtype=np.float32))
    assert np.allclose(t.illumination, 0.01)
    assert np.all(t.reflectance == 0.0)


def test_retinex_reconstruction_residual():
    rng = np.random.default_rng(5)
    img = rng.random((24, 24, 3))
    t = imaging.retinex_decompose(img, blur_sigma=3.0, eps=0.01)
    recon = t.reflectance * t.illumination[..., None]
    unclipped = img <= t.illumination[..., None]
    assert np.max(np.abs(recon - img)[unclipped]) <= 1e-6
    # direct-division oracle on the unclipped region
    oracle = img / t.illumination[..., None]
    assert np.allclose(t.reflectance[unclipped], oracle[unclipped], atol=1e-12)


def test_save_load_quantization_bound(tmp_path):
    rng = np.random.default_rng(6)
    img = rng.random((16, 16, 3)).astype(np.float32)
    path = tmp_path / "img.png"
    imaging.save_image(img, path)
    back = imaging.load_image(path)
    assert np.max(np.abs(back - img)) <= 1.0 / 510.0 + 1e-9


def test_load_all_white(tmp_path):
    path = tmp_path / "white.png"
    imaging.save_image(np.ones((16, 16, 3), dtype=np.float32), path)
    assert np.all(imaging.load_image(path) == 1.0)


def test_save_load_save_idempotent(tmp_path):
    rng = np.random.default_rng(7)
    img = rng.random((16, 16, 3)).astype(np.float32)
    first, second = tmp_path / "a.png", tmp_path / "b.png"
    imaging.save_image(img, first)
    imaging.save_image(imaging.load_image(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_load_missing_file(tmp_path):
    with pytest.raises(imaging.MissingImageError):
        imaging.load_image(tmp_path / "nope.png")


def test_load_corrupt_file(tmp_path):
    path = tmp_path / "bad.png"
    path.write_bytes(b"\x89PNG\r\n\x1a\nthis is not a real png")
    with pytest.raises(imaging.CorruptImageError):
        imaging.load_image(path)


def test_load_wrong_channel_count(tmp_path):
    path = tmp_path / "gray.png"
    PILImage.fromarray(np.zeros((16, 16), dtype=np.uint8), mode="L").save(path)
    with pytest.raises(imaging.ChannelLayoutError):
        imaging.load_image(path)


@pytest.mark.parametrize("bad", [
    np.zeros((4, 16, 3)),                       # too small
    np.zeros((16, 16, 4)),                      # wrong channels
    np.full((16, 16, 3), 1.5),                  # out of range
    np.full((16, 16, 3), np.nan),               # non-finite
])
def test_validate_image_rejections(bad):
    with pytest.raises(ValueError):
        imaging.validate_image(bad)
