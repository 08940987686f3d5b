"""Image quality metrics, the enhancement entry point, and the
enhance-then-test harness that scores a frozen downstream classifier on raw
dark inputs and on enhanced outputs side by side."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from scipy.ndimage import correlate
from torch import nn

from . import imaging
from .backbone import Backbone, image_to_tensor, tensor_to_image
from .config import TrainerConfig
from .trainer import PROMPT_SCHEDULE, load_checkpoint

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes must match: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB at peak 1.0, capped at 100 dB."""
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM with an 11-tap Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, dynamic range 1.0, averaged over channels and valid
    window positions."""
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {a.shape[:2]}"
        )
    window = _gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    half = SSIM_WINDOW // 2
    channel_means = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = correlate(x, window, mode="constant")
        mu_y = correlate(y, window, mode="constant")
        xx = correlate(x * x, window, mode="constant")
        yy = correlate(y * y, window, mode="constant")
        xy = correlate(x * y, window, mode="constant")
        # weighted second moments; crop to positions where the window fits
        sl = np.s_[half:-half, half:-half]
        mu_x, mu_y = mu_x[sl], mu_y[sl]
        var_x = xx[sl] - mu_x**2
        var_y = yy[sl] - mu_y**2
        cov = xy[sl] - mu_x * mu_y
        score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        )
        channel_means.append(score.mean())
    return float(np.mean(channel_means))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM rows plus dataset means."""

    rows: list[dict] = field(default_factory=list)

    def add(self, name: str, psnr_db: float, ssim_value: float) -> None:
        self.rows.append({"image": name, "psnr_db": psnr_db, "ssim": ssim_value})

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r["psnr_db"] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r["ssim"] for r in self.rows])) if self.rows else float("nan")

    def to_dict(self) -> dict:
        return {
            "images": self.rows,
            "aggregate": {"psnr_db": self.mean_psnr, "ssim": self.mean_ssim, "count": len(self.rows)},
        }


def evaluate_pairs(pairs: list[tuple[str, np.ndarray, np.ndarray]]) -> MetricReport:
    report = MetricReport()
    for name, a, b in pairs:
        report.add(name, psnr(a, b), ssim(a, b))
    return report


# -- enhancement entry point --------------------------------------------------

def enhance(img: np.ndarray, backbone: Backbone, cfg: TrainerConfig,
            text_prompt: str | None = None) -> np.ndarray:
    """Single lighten pass conditioned on the reversed illumination map.

    No darken pass and no caption branch run at inference.
    """
    imaging.validate_image(img)
    if text_prompt is None:
        text_prompt = cfg.text_prompt_lighten
    direction, kind = PROMPT_SCHEDULE["enhance"]
    prompt = imaging.illumination_prompt(img)
    cond = backbone.build_condition(text_prompt, direction, prompt.v_reverse, prompt_kind=kind)
    with torch.no_grad():
        out, _ = backbone.translate(image_to_tensor(img), cond, cfg.adapter_mode)
    return tensor_to_image(out)


def load_enhancer(checkpoint_dir, text_prompt: str | None = None) -> Callable[[np.ndarray], np.ndarray]:
    """Bind a checkpoint into an image -> image callable."""
    backbone, cfg = load_checkpoint(checkpoint_dir)
    backbone.eval()

    def run(img: np.ndarray) -> np.ndarray:
        return enhance(img, backbone, cfg, text_prompt)

    return run


# -- frozen downstream evaluator ----------------------------------------------

class ToyClassifier(nn.Module):
    """Small conv classifier used as the frozen downstream model.

    Max pooling over the final feature map keeps the shape cues (corner and
    curvature detectors) that distinguish the fixture classes.
    """

    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveMaxPool2d(1),
        )
        self.head = nn.Linear(width * 4, num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


def model_fingerprint(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class DownstreamEvaluator:
    """Frozen classifier handle with its label set and fingerprint."""

    model: ToyClassifier
    class_names: tuple[str, ...]
    fingerprint: str
    holdout_accuracy: float

    def predict(self, img: np.ndarray) -> int:
        with torch.no_grad():
            logits = self.model(image_to_tensor(img))
        return int(logits.argmax(dim=1))


class EvaluatorTrainingError(Exception):
    """The toy classifier failed to reach its accuracy threshold."""


def _accuracy(model: nn.Module, images: list[np.ndarray], labels: list[int]) -> float:
    hits = 0
    with torch.no_grad():
        for img, label in zip(images, labels):
            hits += int(model(image_to_tensor(img)).argmax(dim=1)) == label
    return hits / len(labels)


def train_toy_classifier(images: list[np.ndarray], labels: list[int],
                         class_names: tuple[str, ...], seed: int = 0,
                         holdout_fraction: float = 0.2, epochs: int = 40,
                         batch_size: int = 16, threshold: float = 0.95) -> DownstreamEvaluator:
    """Train, verify >= threshold held-out accuracy, then freeze and fingerprint."""
    if len(images) != len(labels):
        raise ValueError("image and label counts must match")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_hold = max(1, int(len(images) * holdout_fraction))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    train_x = torch.cat([image_to_tensor(images[i]) for i in train_idx])
    train_y = torch.tensor([labels[i] for i in train_idx])
    hold_images = [images[i] for i in hold_idx]
    hold_labels = [labels[i] for i in hold_idx]

    model = ToyClassifier(num_classes=len(class_names))
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    loss_fn = nn.CrossEntropyLoss()
    curve = []
    for epoch in range(epochs):
        perm = torch.from_numpy(rng.permutation(len(train_idx)))
        for start in range(0, len(perm), batch_size):
            batch = perm[start : start + batch_size]
            opt.zero_grad()
            loss = loss_fn(model(train_x[batch]), train_y[batch])
            loss.backward()
            opt.step()
        model.eval()
        acc = _accuracy(model, hold_images, hold_labels)
        model.train()
        curve.append(acc)
        # train past the acceptance bar so the frozen model has margin
        if acc >= max(threshold, 0.99) and epoch >= 9:
            break
    model.eval()
    final_acc = _accuracy(model, hold_images, hold_labels)
    if final_acc < threshold:
        raise EvaluatorTrainingError(
            f"held-out accuracy {final_acc:.3f} below threshold {threshold}; "
            f"per-epoch curve: {[f'{a:.3f}' for a in curve]}"
        )
    for p in model.parameters():
        p.requires_grad_(False)
    return DownstreamEvaluator(model=model, class_names=tuple(class_names),
                               fingerprint=model_fingerprint(model),
                               holdout_accuracy=final_acc)


@dataclass
class GefuReport:
    """Top-1 accuracy on raw dark inputs and on enhanced outputs, side by side."""

    dark_top1: float
    enhanced_top1: float
    count: int
    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dark_top1": self.dark_top1,
            "enhanced_top1": self.enhanced_top1,
            "count": self.count,
            "rows": self.rows,
        }


def gefu_evaluate(images: list[np.ndarray], labels: list[int],
                  enhancer: Callable[[np.ndarray], np.ndarray],
                  evaluator: DownstreamEvaluator) -> GefuReport:
    """Enhance first, then test directly on the frozen downstream model."""
    if len(images) != len(labels):
        raise ValueError(f"image/label count mismatch: {len(images)} vs {len(labels)}")
    before = model_fingerprint(evaluator.model)
    rows = []
    dark_hits = 0
    enhanced_hits = 0
    for i, (img, label) in enumerate(zip(images, labels)):
        dark_pred = evaluator.predict(img)
        enhanced_pred = evaluator.predict(enhancer(img))
        dark_hits += dark_pred == label
        enhanced_hits += enhanced_pred == label
        rows.append({"index": i, "label": label, "dark_pred": dark_pred,
                     "enhanced_pred": enhanced_pred})
    after = model_fingerprint(evaluator.model)
    if before != after or before != evaluator.fingerprint:
        raise RuntimeError("downstream evaluator weights changed during evaluation")
    n = len(labels)
    return GefuReport(dark_top1=dark_hits / n, enhanced_top1=enhanced_hits / n,
                      count=n, rows=rows)
