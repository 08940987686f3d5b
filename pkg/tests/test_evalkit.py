import math

import numpy as np
import pytest
import torch

from cyclelight import evalkit
from cyclelight.backbone import Backbone
from cyclelight.config import TrainerConfig
from cyclelight.fixtures import CLASS_NAMES, render_scene
from cyclelight.trainer import save_checkpoint


def rand_image(seed, h=16, w=16):
    return np.random.default_rng(seed).random((h, w, 3))


# -- psnr ----------------------------------------------------------------------

def test_psnr_identical_hits_cap():
    img = rand_image(0)
    assert evalkit.psnr(img, img) == 100.0


def test_psnr_zero_vs_half():
    a = np.zeros((16, 16, 3))
    b = np.full((16, 16, 3), 0.5)
    assert evalkit.psnr(a, b) == pytest.approx(10 * math.log10(4.0), abs=1e-9)


def test_psnr_uniform_offset_point_one():
    a = np.full((16, 16, 3), 0.4)
    b = np.full((16, 16, 3), 0.5)
    assert evalkit.psnr(a, b) == pytest.approx(20.0, abs=1e-6)


def test_psnr_symmetric():
    a, b = rand_image(1), rand_image(2)
    assert evalkit.psnr(a, b) == evalkit.psnr(b, a)


def test_psnr_decreases_with_noise_amplitude():
    clean = rand_image(3) * 0.5 + 0.25
    noise = np.random.default_rng(4).standard_normal(clean.shape)
    values = [evalkit.psnr(np.clip(clean + amp * noise, 0, 1), clean)
              for amp in (0.01, 0.02, 0.05, 0.1)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_psnr_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        evalkit.psnr(rand_image(5), rand_image(6, h=8))


# -- ssim ----------------------------------------------------------------------

def test_ssim_identical_is_one():
    img = rand_image(7, 24, 24)
    assert evalkit.ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_constant_images_closed_form():
    a = np.full((16, 16, 3), 0.3)
    b = np.full((16, 16, 3), 0.7)
    c1 = 0.01**2
    expected = (2 * 0.3 * 0.7 + c1) / (0.3**2 + 0.7**2 + c1)
    assert evalkit.ssim(a, b) == pytest.approx(expected, abs=1e-9)


def brute_force_ssim(a, b, window, k1=0.01, k2=0.03):
    """Independent sliding-window evaluation with explicit loops."""
    size = window.shape[0]
    c1, c2 = k1**2, k2**2
    per_channel = []
    for ch in range(a.shape[2]):
        scores = []
        for y in range(a.shape[0] - size + 1):
            for x in range(a.shape[1] - size + 1):
                wa = a[y : y + size, x : x + size, ch]
                wb = b[y : y + size, x : x + size, ch]
                mu_a = (window * wa).sum()
                mu_b = (window * wb).sum()
                var_a = (window * wa * wa).sum() - mu_a**2
                var_b = (window * wb * wb).sum() - mu_b**2
                cov = (window * wa * wb).sum() - mu_a * mu_b
                scores.append(
                    ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                    / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
                )
        per_channel.append(np.mean(scores))
    return float(np.mean(per_channel))


def test_ssim_matches_brute_force_oracle():
    window = evalkit._gaussian_window()
    rng = np.random.default_rng(8)
    for _ in range(3):
        a = rng.random((14, 15, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert evalkit.ssim(a, b) == pytest.approx(brute_force_ssim(a, b, window), abs=1e-4)


def test_ssim_symmetric():
    a, b = rand_image(9, 16, 16), rand_image(10, 16, 16)
    assert evalkit.ssim(a, b) == pytest.approx(evalkit.ssim(b, a), abs=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        evalkit.ssim(rand_image(11, 8, 8), rand_image(11, 8, 8))


def test_metric_report_aggregates():
    report = evalkit.MetricReport()
    report.add("a", 10.0, 0.5)
    report.add("b", 20.0, 0.7)
    assert report.mean_psnr == pytest.approx(15.0)
    assert report.mean_ssim == pytest.approx(0.6)
    payload = report.to_dict()
    assert payload["aggregate"]["count"] == 2
    assert len(payload["images"]) == 2


# -- enhance -------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    cfg = TrainerConfig(base_channels=8, disc_channels=8, seed=6)
    backbone = Backbone(cfg.backbone())
    path = tmp_path_factory.mktemp("ckpt") / "final"
    save_checkpoint(backbone, cfg, path, step=0)
    return path


def test_enhance_deterministic_shape_range(tiny_checkpoint):
    enhancer = evalkit.load_enhancer(tiny_checkpoint)
    img = render_scene(np.random.default_rng(1), 64, 2)
    a = enhancer(img)
    b = enhancer(img)
    assert np.array_equal(a, b)
    assert a.shape == img.shape
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_enhance_rejects_missing_checkpoint(tmp_path):
    from cyclelight.trainer import CheckpointError

    with pytest.raises(CheckpointError):
        evalkit.load_enhancer(tmp_path / "nope")


# -- downstream evaluator ---------------------------------------------------------

@pytest.fixture(scope="module")
def small_evaluator():
    rng = np.random.default_rng(2)
    images = [render_scene(rng, 64, i % 4) for i in range(60)]
    labels = [i % 4 for i in range(60)]
    return evalkit.train_toy_classifier(images, labels, CLASS_NAMES, seed=0), images, labels


def test_toy_classifier_deterministic(small_evaluator):
    _, images, labels = small_evaluator
    a = evalkit.train_toy_classifier(images, labels, CLASS_NAMES, seed=3)
    b = evalkit.train_toy_classifier(images, labels, CLASS_NAMES, seed=3)
    assert a.fingerprint == b.fingerprint


def test_toy_classifier_meets_threshold(small_evaluator):
    evaluator, _, _ = small_evaluator
    assert evaluator.holdout_accuracy >= 0.95


def test_toy_classifier_failure_reports_curve():
    rng = np.random.default_rng(3)
    images = [rng.random((64, 64, 3)).astype(np.float32) for _ in range(24)]
    labels = [i % 4 for i in range(24)]  # pure noise: unlearnable
    with pytest.raises(evalkit.EvaluatorTrainingError, match="curve"):
        evalkit.train_toy_classifier(images, labels, CLASS_NAMES, seed=0, epochs=2)


def test_gefu_identity_enhancer_matches_dark_accuracy(small_evaluator):
    evaluator, images, labels = small_evaluator
    report = evalkit.gefu_evaluate(images[:16], labels[:16], lambda img: img, evaluator)
    assert report.enhanced_top1 == report.dark_top1
    assert report.count == 16


def test_gefu_does_not_mutate_evaluator(small_evaluator):
    evaluator, images, labels = small_evaluator
    before = evalkit.model_fingerprint(evaluator.model)
    evalkit.gefu_evaluate(images[:8], labels[:8], lambda img: np.clip(img * 1.1, 0, 1), evaluator)
    assert evalkit.model_fingerprint(evaluator.model) == before


def test_gefu_rejects_count_mismatch(small_evaluator):
    evaluator, images, labels = small_evaluator
    with pytest.raises(ValueError):
        evalkit.gefu_evaluate(images[:4], labels[:3], lambda img: img, evaluator)
