"""Objective terms for the unsupervised cycle trainer.

Cycle and identity reconstructions use L1; caption consistency is
1 - mean token cosine; reflectance consistency is MSE between the two
stages' predictions plus L1 to the Retinex target; the adversarial terms
use the least-squares form. The full objective weights identity and GAN
terms by lambda_idt and lambda_gan.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import torch


@dataclass(frozen=True)
class ObjectiveWeights:
    lambda_idt: float = 0.5
    lambda_gan: float = 1.0

    def __post_init__(self):
        if self.lambda_idt < 0 or self.lambda_gan < 0:
            raise ValueError("objective weights must be >= 0")


def cycle_loss(reconstructed: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between a reconstruction and its source."""
    if reconstructed.shape != original.shape:
        raise ValueError(
            f"shape mismatch: {tuple(reconstructed.shape)} vs {tuple(original.shape)}"
        )
    return (reconstructed - original).abs().mean()


def caption_consistency_loss(feat_caption: torch.Tensor, feat_stage2: torch.Tensor) -> torch.Tensor:
    """1 - mean cosine similarity between corresponding token vectors.

    Both inputs are (tokens, channels); zero-norm vectors contribute
    similarity 0 (their token adds the maximal unit of loss).
    """
    if feat_caption.shape != feat_stage2.shape:
        raise ValueError(
            f"token layout mismatch: {tuple(feat_caption.shape)} vs {tuple(feat_stage2.shape)}"
        )
    a = feat_caption.reshape(feat_caption.shape[0], -1)
    b = feat_stage2.reshape(feat_stage2.shape[0], -1)
    dot = (a * b).sum(dim=1)
    denom = a.norm(dim=1) * b.norm(dim=1)
    cos = torch.where(denom > 0, dot / denom.clamp_min(1e-30), torch.zeros_like(dot))
    return 1.0 - cos.mean()


def reflectance_consistency_loss(ref_lighten: torch.Tensor, ref_darken: torch.Tensor,
                                 ref_target: torch.Tensor) -> torch.Tensor:
    """MSE between the two stage predictions plus L1 to the Retinex target."""
    if ref_lighten.shape != ref_darken.shape or ref_darken.shape != ref_target.shape:
        raise ValueError("all three reflectance maps must share a shape")
    consistency = ((ref_lighten - ref_darken) ** 2).mean()
    reconstruction = (ref_darken - ref_target).abs().mean()
    return consistency + reconstruction


def identity_loss(image_term: torch.Tensor, caption_term: torch.Tensor,
                  reflectance_term: torch.Tensor) -> torch.Tensor:
    """Sum of the identity branch's image, caption, and reflectance terms."""
    for name, term in (("image", image_term), ("caption", caption_term),
                       ("reflectance", reflectance_term)):
        if not torch.isfinite(torch.as_tensor(term)).all():
            raise ValueError(f"identity {name} term is not finite")
    return image_term + caption_term + reflectance_term


def generator_adversarial_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares generator term: push fake patch scores toward 1."""
    return ((fake_scores - 1.0) ** 2).mean()


def gan_losses(fake_scores: torch.Tensor, real_scores: torch.Tensor):
    """Least-squares adversarial terms.

    generator = mean((fake - 1)^2); discriminator = 0.5 * mean((real - 1)^2)
    + 0.5 * mean(fake^2). The discriminator side must be fed detached fakes.
    """
    generator = generator_adversarial_loss(fake_scores)
    discriminator = 0.5 * ((real_scores - 1.0) ** 2).mean() + 0.5 * (fake_scores**2).mean()
    return generator, discriminator


def full_objective(cycle: torch.Tensor, caption: torch.Tensor, reflectance: torch.Tensor,
                   identity: torch.Tensor, gan_generator: torch.Tensor,
                   weights: ObjectiveWeights) -> torch.Tensor:
    """Weighted sum of all terms (each already summed over both directions)."""
    total = cycle + caption + reflectance \
        + weights.lambda_idt * identity + weights.lambda_gan * gan_generator
    if not torch.isfinite(torch.as_tensor(total)).all():
        raise ValueError("objective is not finite")
    return total


TRACE_COLUMNS = (
    "step", "cycle", "caption", "reflectance", "identity",
    "gan_generator", "gan_generator_lighten", "gan_generator_darken",
    "gan_discriminator", "grad_norm_raw", "grad_norm", "total",
)


@dataclass
class LossReport:
    """Named scalar losses for one training step."""

    step: int
    cycle: float
    caption: float
    reflectance: float
    identity: float
    gan_generator: float
    gan_generator_lighten: float
    gan_generator_darken: float
    gan_discriminator: float
    grad_norm_raw: float
    grad_norm: float
    total: float

    def row(self) -> list[str]:
        return [f"{getattr(self, c):.10e}" if c != "step" else str(self.step)
                for c in TRACE_COLUMNS]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "LossReport":
        kwargs = {}
        for f in fields(cls):
            raw = row[f.name]
            kwargs[f.name] = int(raw) if f.name == "step" else float(raw)
        return cls(**kwargs)


def write_trace_header(path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(TRACE_COLUMNS)


def append_trace_row(path, report: LossReport) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow(report.row())


def read_trace(path) -> list[LossReport]:
    with open(path, newline="") as fh:
        return [LossReport.from_row(row) for row in csv.DictReader(fh)]
