"""Synthetic labeled fixture generation.

Scenes are 4-class geometric shapes (circle, square, triangle, cross) on
textured gradient backgrounds, brightness-balanced across classes. Shape
fills stay below the gamma-survival zone while a few class-independent
bright speckles (night light sources) sit near 1.0, so gamma darkening
removes class-relevant contrast but keeps the distractors. A fixture tree
holds unpaired training splits drawn from disjoint originals, a paired
held-out eval split, and a larger labeled bright split for the downstream
classifier.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import imaging

CLASS_NAMES = ("circle", "square", "triangle", "cross")


def make_caption(class_id: int) -> str:
    return f"a photo of a {CLASS_NAMES[class_id]}"


def render_scene(rng: np.random.Generator, size: int, class_id: int) -> np.ndarray:
    """One bright scene: gradient background, textured, one filled shape."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = rng.uniform(0.25, 0.45, size=3)
    slope_x = rng.uniform(-0.12, 0.12, size=3)
    slope_y = rng.uniform(-0.12, 0.12, size=3)
    img = base[None, None, :] + xs[..., None] * slope_x + ys[..., None] * slope_y
    img += rng.normal(0.0, 0.015, size=img.shape)

    cx = rng.uniform(0.3, 0.7) * size
    cy = rng.uniform(0.3, 0.7) * size
    radius = rng.uniform(0.18, 0.3) * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if class_id == 0:  # circle
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    elif class_id == 1:  # square
        mask = (np.abs(xx - cx) <= radius * 0.85) & (np.abs(yy - cy) <= radius * 0.85)
    elif class_id == 2:  # upward triangle
        rel = (yy - (cy - radius)) / (2 * radius)
        mask = (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * radius)
    elif class_id == 3:  # cross
        arm = radius / 3.0
        extent = (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
        mask = extent & ((np.abs(xx - cx) <= arm) | (np.abs(yy - cy) <= arm))
    else:
        raise ValueError(f"unknown class id {class_id}")

    fill = rng.uniform(0.55, 0.75, size=3)
    img[mask] = fill[None, :] + rng.normal(0.0, 0.01, size=(int(mask.sum()), 3))

    # bright speckles that survive gamma darkening, uncorrelated with class
    for _ in range(int(rng.integers(3, 7))):
        sx = rng.uniform(2, size - 2)
        sy = rng.uniform(2, size - 2)
        spot = (xx - sx) ** 2 + (yy - sy) ** 2 <= rng.uniform(0.8, 1.8) ** 2
        img[spot] = rng.uniform(0.85, 1.0)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _write_sample(path: str, img: np.ndarray, caption: str | None) -> None:
    imaging.save_image(img, path)
    if caption is not None:
        with open(os.path.splitext(path)[0] + ".caption.txt", "w") as fh:
            fh.write(caption + "\n")


def generate_fixture_tree(out_dir: str | os.PathLike, train_per_side: int = 32,
                          eval_count: int = 48, classifier_count: int = 200,
                          gamma_range: tuple[float, float] = (3.0, 5.0),
                          noise_sigma: float = 0.01, seed: int = 7,
                          size: int = 64) -> dict:
    """Write the full fixture tree and return its manifest.

    Layout: normal/ and low/ are the unpaired training sides (disjoint
    source scenes; low/ images are degraded, with their bright originals in
    low_gt/ for evaluation only), eval/ holds paired dark/bright images plus
    labels.json, classifier/ holds labeled bright images.
    """
    lo, hi = gamma_range
    if not (1.0 <= lo <= hi <= 8.0):
        raise ValueError(f"gamma range must satisfy 1 <= lo <= hi <= 8, got {gamma_range}")
    if not 0.0 <= noise_sigma <= 0.1:
        raise ValueError(f"noise_sigma must lie in [0, 0.1], got {noise_sigma}")
    out_dir = os.fspath(out_dir)
    rng = np.random.default_rng(seed)
    samples = []

    def next_degrade_params():
        gamma = float(rng.uniform(lo, hi))
        sample_seed = int(rng.integers(0, 2**31 - 1))
        return gamma, sample_seed

    for sub in ("normal", "low", "low_gt", "eval", "classifier"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    index = 0
    for i in range(train_per_side):
        class_id = i % len(CLASS_NAMES)
        img = render_scene(rng, size, class_id)
        path = os.path.join(out_dir, "normal", f"img_{index:04d}.png")
        _write_sample(path, img, make_caption(class_id))
        samples.append({"path": os.path.relpath(path, out_dir), "split": "normal",
                        "label": class_id, "class": CLASS_NAMES[class_id],
                        "gamma": None, "noise_sigma": None, "seed": None})
        index += 1

    for i in range(train_per_side):
        class_id = i % len(CLASS_NAMES)
        bright = render_scene(rng, size, class_id)
        gamma, sample_seed = next_degrade_params()
        dark = imaging.degrade(bright, gamma, noise_sigma, sample_seed)
        path = os.path.join(out_dir, "low", f"img_{index:04d}.png")
        _write_sample(path, dark, make_caption(class_id))
        imaging.save_image(bright, os.path.join(out_dir, "low_gt", f"img_{index:04d}.png"))
        samples.append({"path": os.path.relpath(path, out_dir), "split": "low",
                        "label": class_id, "class": CLASS_NAMES[class_id],
                        "gamma": gamma, "noise_sigma": noise_sigma, "seed": sample_seed})
        index += 1

    eval_labels = []
    for i in range(eval_count):
        class_id = i % len(CLASS_NAMES)
        bright = render_scene(rng, size, class_id)
        gamma, sample_seed = next_degrade_params()
        dark = imaging.degrade(bright, gamma, noise_sigma, sample_seed)
        imaging.save_image(bright, os.path.join(out_dir, "eval", f"bright_{i:04d}.png"))
        imaging.save_image(dark, os.path.join(out_dir, "eval", f"dark_{i:04d}.png"))
        eval_labels.append(class_id)
        samples.append({"path": os.path.join("eval", f"dark_{i:04d}.png"), "split": "eval",
                        "label": class_id, "class": CLASS_NAMES[class_id],
                        "gamma": gamma, "noise_sigma": noise_sigma, "seed": sample_seed})
    with open(os.path.join(out_dir, "eval", "labels.json"), "w") as fh:
        json.dump(eval_labels, fh)

    classifier_labels = []
    for i in range(classifier_count):
        class_id = i % len(CLASS_NAMES)
        img = render_scene(rng, size, class_id)
        imaging.save_image(img, os.path.join(out_dir, "classifier", f"img_{i:04d}.png"))
        classifier_labels.append(class_id)
        samples.append({"path": os.path.join("classifier", f"img_{i:04d}.png"),
                        "split": "classifier", "label": class_id,
                        "class": CLASS_NAMES[class_id],
                        "gamma": None, "noise_sigma": None, "seed": None})
    with open(os.path.join(out_dir, "classifier", "labels.json"), "w") as fh:
        json.dump(classifier_labels, fh)

    manifest = {
        "seed": seed,
        "size": size,
        "gamma_range": [lo, hi],
        "noise_sigma": noise_sigma,
        "class_names": list(CLASS_NAMES),
        "counts": {"normal": train_per_side, "low": train_per_side,
                   "eval": eval_count, "classifier": classifier_count},
        "samples": samples,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_eval_split(root: str | os.PathLike):
    """Returns (dark images, bright ground truths, labels) from eval/."""
    eval_dir = os.path.join(os.fspath(root), "eval")
    with open(os.path.join(eval_dir, "labels.json")) as fh:
        labels = json.load(fh)
    darks, brights = [], []
    for i in range(len(labels)):
        darks.append(imaging.load_image(os.path.join(eval_dir, f"dark_{i:04d}.png")))
        brights.append(imaging.load_image(os.path.join(eval_dir, f"bright_{i:04d}.png")))
    return darks, brights, labels


def load_classifier_split(root: str | os.PathLike):
    """Returns (bright images, labels) from classifier/."""
    cls_dir = os.path.join(os.fspath(root), "classifier")
    with open(os.path.join(cls_dir, "labels.json")) as fh:
        labels = json.load(fh)
    images = [imaging.load_image(os.path.join(cls_dir, f"img_{i:04d}.png"))
              for i in range(len(labels))]
    return images, labels
