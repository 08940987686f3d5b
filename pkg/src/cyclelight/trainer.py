"""Unsupervised cycle training loop.

Each iteration runs the cycle branch (lighten-then-darken round trip for
the low image and the mirrored round trip for the normal image, each with
caption and reflectance consistency), the identity branch, a generator
update on the weighted full objective, and one update of both patch
discriminators. Conditioning follows the tuple schedule of the cycle
algorithm: the first stage of each round trip receives the reversed
illumination map of its source image, the second stage and the identity
passes receive the direct map.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import imaging, losses
from .backbone import Backbone, ConditionBundle, image_to_tensor
from .config import (
    ConfigError,
    RunManifest,
    TrainerConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    fingerprint_tree,
    save_config,
    validate_config,
    _atomic_write_json,
)


class DataError(Exception):
    """Dataset layout or content problem."""


class NumericError(Exception):
    """A loss term became non-finite during training."""

    def __init__(self, step: int, term: str):
        super().__init__(f"non-finite loss term {term!r} at step {step}")
        self.step = step
        self.term = term


class CheckpointError(Exception):
    """Checkpoint directory is missing, inconsistent, or mismatched."""


FALLBACK_CAPTION = "a photo"

# pass name -> (direction, prompt kind) required by the cycle algorithm
PROMPT_SCHEDULE = {
    "cycle_low_stage1": ("lighten", "reverse"),
    "cycle_low_stage2": ("darken", "direct"),
    "cycle_low_caption": ("lighten", "none"),
    "cycle_normal_stage1": ("darken", "reverse"),
    "cycle_normal_stage2": ("lighten", "direct"),
    "cycle_normal_caption": ("darken", "none"),
    "identity_low": ("darken", "direct"),
    "identity_normal": ("lighten", "direct"),
    "enhance": ("lighten", "reverse"),
}


@dataclass
class Sample:
    image: np.ndarray
    caption: str
    path: str


def _read_caption(image_path: str) -> str:
    sidecar = os.path.splitext(image_path)[0] + ".caption.txt"
    if os.path.isfile(sidecar):
        text = open(sidecar).read().strip()
        if text:
            return text
    return FALLBACK_CAPTION


def load_split(root: str | os.PathLike, name: str) -> list[Sample]:
    split_dir = os.path.join(os.fspath(root), name)
    if not os.path.isdir(split_dir):
        raise DataError(f"dataset split directory missing: {split_dir}")
    paths = sorted(
        os.path.join(split_dir, n) for n in os.listdir(split_dir) if n.endswith(".png")
    )
    if not paths:
        raise DataError(f"dataset split is empty: {split_dir}")
    return [Sample(imaging.load_image(p), _read_caption(p), p) for p in paths]


def _resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    t = image_to_tensor(img)
    out = torch.nn.functional.interpolate(
        t, size=(height, width), mode="bilinear", align_corners=False
    )
    return out[0].numpy().transpose(1, 2, 0).clip(0.0, 1.0)


def _crop_flip(img: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    if h < crop or w < crop:
        scale = max(crop / h, crop / w)
        img = _resize_bilinear(img, max(crop, round(h * scale)), max(crop, round(w * scale)))
        h, w = img.shape[:2]
    flip = rng.integers(0, 2)
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    out = img[top : top + crop, left : left + crop]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def sample_pair(low: list[Sample], normal: list[Sample], rng: np.random.Generator,
                crop_size: int):
    """Independent uniform draws from both sides with flip/crop augmentation."""
    if not low or not normal:
        raise DataError("both dataset sides must be non-empty")
    a = low[int(rng.integers(0, len(low)))]
    b = normal[int(rng.integers(0, len(normal)))]
    img_l = _crop_flip(a.image, crop_size, rng)
    img_n = _crop_flip(b.image, crop_size, rng)
    return img_l, img_n, a.caption, b.caption


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_GROUPS = ("lora", "adapter", "reflectance_decoder", "discriminators")


def save_checkpoint(backbone: Backbone, cfg: TrainerConfig, out_dir: str | os.PathLike,
                    step: int) -> str:
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    groups = backbone.parameter_groups()
    shapes = {}
    for name in CHECKPOINT_GROUPS:
        params = {k: v.detach().clone() for k, v in groups[name].items()}
        torch.save(params, os.path.join(out_dir, f"{name}.pt"))
        shapes[name] = {k: list(v.shape) for k, v in params.items()}
    manifest = {
        "format": 1,
        "step": step,
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "shapes": shapes,
    }
    _atomic_write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return out_dir


def load_checkpoint(ckpt_dir: str | os.PathLike,
                    expected_config: TrainerConfig | None = None):
    """Rebuild a Backbone from a checkpoint directory. Returns (backbone, config)."""
    ckpt_dir = os.fspath(ckpt_dir)
    manifest_path = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"checkpoint manifest missing: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    try:
        cfg = config_from_dict(manifest["config"], source=manifest_path)
    except ConfigError as exc:
        raise CheckpointError(str(exc)) from exc
    if config_hash(cfg) != manifest.get("config_hash"):
        raise CheckpointError(f"{ckpt_dir}: config hash mismatch with manifest")
    if expected_config is not None and config_hash(expected_config) != manifest["config_hash"]:
        raise CheckpointError(
            f"{ckpt_dir}: checkpoint config hash {manifest['config_hash']} does not match "
            f"requested config hash {config_hash(expected_config)}"
        )
    backbone = Backbone(cfg.backbone())
    groups = backbone.parameter_groups()
    for name in CHECKPOINT_GROUPS:
        path = os.path.join(ckpt_dir, f"{name}.pt")
        if not os.path.isfile(path):
            raise CheckpointError(f"checkpoint group file missing: {path}")
        state = torch.load(path, weights_only=True)
        expected = manifest["shapes"][name]
        if set(state) != set(groups[name]) or set(state) != set(expected):
            raise CheckpointError(f"{path}: parameter name set mismatch")
        for key, value in state.items():
            if list(value.shape) != expected[key] or value.shape != groups[name][key].shape:
                raise CheckpointError(f"{path}: shape mismatch for {key}")
            with torch.no_grad():
                groups[name][key].copy_(value)
    return backbone, cfg


# -- trainer ----------------------------------------------------------------

@dataclass
class CycleState:
    """Intermediate products of one cycle-branch evaluation."""

    generated_normal: torch.Tensor
    reconstructed_low: torch.Tensor
    generated_low: torch.Tensor
    reconstructed_normal: torch.Tensor
    stack_low_stage1: object
    stack_low_stage2: object
    stack_normal_stage1: object
    stack_normal_stage2: object
    caption_stack_low: object | None
    caption_stack_normal: object | None


@dataclass
class TrainResult:
    out_dir: str
    checkpoint_dir: str
    trace_path: str
    manifest_path: str
    reports: list


class Trainer:
    def __init__(self, cfg: TrainerConfig, data_root: str | os.PathLike,
                 out_dir: str | os.PathLike):
        self.cfg = validate_config(cfg)
        self.data_root = os.fspath(data_root)
        self.out_dir = os.fspath(out_dir)
        self.low = load_split(data_root, "low")
        self.normal = load_split(data_root, "normal")
        self.backbone = Backbone(cfg.backbone())
        self.weights = losses.ObjectiveWeights(cfg.lambda_idt, cfg.lambda_gan)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen_opt = torch.optim.AdamW(
            list(self.backbone.generator_parameters()),
            lr=cfg.learning_rate, weight_decay=cfg.weight_decay, eps=cfg.optimizer_epsilon,
        )
        self.disc_opt = torch.optim.AdamW(
            list(self.backbone.discriminator_parameters()),
            lr=cfg.learning_rate, weight_decay=cfg.weight_decay, eps=cfg.optimizer_epsilon,
        )
        self.prompt_log: list[tuple[str, str, str]] = []
        self.last_term_details: dict[str, float] = {}

    # conditioning with schedule instrumentation
    def _condition(self, pass_name: str, text: str, prompt_map=None) -> ConditionBundle:
        direction, kind = PROMPT_SCHEDULE[pass_name]
        if (prompt_map is None) != (kind == "none"):
            raise AssertionError(f"pass {pass_name} prompt-map presence violates schedule")
        bundle = self.backbone.build_condition(text, direction, prompt_map, prompt_kind=kind)
        self.prompt_log.append((pass_name, direction, kind))
        return bundle

    def _consistency(self, caption_stack, stack_first, stack_second, target):
        """Caption and reflectance consistency terms for one cycle branch."""
        zero = torch.zeros(())
        l_cap = zero
        if self.cfg.caption_consistency:
            l_cap = losses.caption_consistency_loss(
                caption_stack.final_tokens(), stack_second.final_tokens()
            )
        l_ref = zero
        if self.cfg.reflectance_consistency:
            ref_first = self.backbone.reflectance_decode(stack_first.final)
            ref_second = self.backbone.reflectance_decode(stack_second.final)
            l_ref = losses.reflectance_consistency_loss(ref_first, ref_second, target)
        return l_cap, l_ref

    def cycle_branch(self, t_low, t_normal, cap_low, cap_normal, prompt_low, prompt_normal,
                     target_low, target_normal):
        cfg = self.cfg
        mode = cfg.adapter_mode

        # low image round trip: lighten then darken back
        cond = self._condition("cycle_low_stage1", cfg.text_prompt_lighten, prompt_low.v_reverse)
        fake_normal, stack_l1 = self.backbone.translate(t_low, cond, mode)
        cond = self._condition("cycle_low_stage2", cfg.text_prompt_darken, prompt_low.v)
        recon_low, stack_l2 = self.backbone.translate(fake_normal, cond, mode)
        cycle_low = losses.cycle_loss(recon_low, t_low)

        caption_stack_low = None
        if cfg.caption_consistency:
            cap_cond = self._condition("cycle_low_caption", cap_low)
            latent, skips = self.backbone.encode(t_low, "lighten")
            caption_stack_low = self.backbone.unet_forward(latent, skips, cap_cond, "text_only")
        cap_l, ref_l = self._consistency(caption_stack_low, stack_l1, stack_l2, target_low)

        # normal image round trip: darken then lighten back
        cond = self._condition("cycle_normal_stage1", cfg.text_prompt_darken, prompt_normal.v_reverse)
        fake_low, stack_n1 = self.backbone.translate(t_normal, cond, mode)
        cond = self._condition("cycle_normal_stage2", cfg.text_prompt_lighten, prompt_normal.v)
        recon_normal, stack_n2 = self.backbone.translate(fake_low, cond, mode)
        cycle_normal = losses.cycle_loss(recon_normal, t_normal)

        caption_stack_normal = None
        if cfg.caption_consistency:
            cap_cond = self._condition("cycle_normal_caption", cap_normal)
            latent, skips = self.backbone.encode(t_normal, "darken")
            caption_stack_normal = self.backbone.unet_forward(latent, skips, cap_cond, "text_only")
        cap_n, ref_n = self._consistency(caption_stack_normal, stack_n1, stack_n2, target_normal)

        state = CycleState(
            generated_normal=fake_normal, reconstructed_low=recon_low,
            generated_low=fake_low, reconstructed_normal=recon_normal,
            stack_low_stage1=stack_l1, stack_low_stage2=stack_l2,
            stack_normal_stage1=stack_n1, stack_normal_stage2=stack_n2,
            caption_stack_low=caption_stack_low, caption_stack_normal=caption_stack_normal,
        )
        terms = {
            "cycle": cycle_low + cycle_normal,
            "caption": cap_l + cap_n,
            "reflectance": ref_l + ref_n,
        }
        return state, terms

    def identity_branch(self, t_low, t_normal, prompt_low, prompt_normal,
                        target_low, target_normal, state: CycleState):
        cfg = self.cfg
        mode = cfg.adapter_mode
        zero = torch.zeros(())

        cond = self._condition("identity_low", cfg.text_prompt_darken, prompt_low.v)
        idt_low, stack_low = self.backbone.translate(t_low, cond, mode)
        image_low = losses.cycle_loss(idt_low, t_low)
        cap_low = zero
        if cfg.caption_consistency:
            cap_low = losses.caption_consistency_loss(
                state.caption_stack_low.final_tokens(), stack_low.final_tokens()
            )
        ref_low = zero
        if cfg.reflectance_consistency:
            pred = self.backbone.reflectance_decode(stack_low.final)
            ref_low = (pred - target_low).abs().mean()
        idt_term_low = losses.identity_loss(image_low, cap_low, ref_low)

        cond = self._condition("identity_normal", cfg.text_prompt_lighten, prompt_normal.v)
        idt_normal, stack_normal = self.backbone.translate(t_normal, cond, mode)
        image_normal = losses.cycle_loss(idt_normal, t_normal)
        cap_normal = zero
        if cfg.caption_consistency:
            cap_normal = losses.caption_consistency_loss(
                state.caption_stack_normal.final_tokens(), stack_normal.final_tokens()
            )
        ref_normal = zero
        if cfg.reflectance_consistency:
            pred = self.backbone.reflectance_decode(stack_normal.final)
            ref_normal = (pred - target_normal).abs().mean()
        idt_term_normal = losses.identity_loss(image_normal, cap_normal, ref_normal)

        self.last_term_details = {
            "identity_image": (image_low + image_normal).detach().item(),
            "identity_caption": (cap_low + cap_normal).detach().item(),
            "identity_reflectance": (ref_low + ref_normal).detach().item(),
        }
        return {"identity": idt_term_low + idt_term_normal}

    def discriminator_branch(self, fake_normal, fake_low, real_normal, real_low):
        """Least-squares update targets for both discriminators (detached fakes)."""
        _, d_lighten = losses.gan_losses(
            self.backbone.discriminate(fake_normal.detach(), "lighten"),
            self.backbone.discriminate(real_normal, "lighten"),
        )
        _, d_darken = losses.gan_losses(
            self.backbone.discriminate(fake_low.detach(), "darken"),
            self.backbone.discriminate(real_low, "darken"),
        )
        return d_lighten + d_darken

    def train_step(self, step: int) -> losses.LossReport:
        cfg = self.cfg
        self.prompt_log.clear()
        img_l, img_n, cap_l, cap_n = sample_pair(self.low, self.normal, self.rng, cfg.crop_size)
        prompt_low = imaging.illumination_prompt(img_l)
        prompt_normal = imaging.illumination_prompt(img_n)
        target_low = target_normal = None
        if cfg.reflectance_consistency:
            target_low = image_to_tensor(imaging.retinex_decompose(
                img_l, cfg.retinex_blur_sigma, cfg.retinex_eps).reflectance.astype(np.float32))
            target_normal = image_to_tensor(imaging.retinex_decompose(
                img_n, cfg.retinex_blur_sigma, cfg.retinex_eps).reflectance.astype(np.float32))
        t_low = image_to_tensor(img_l)
        t_normal = image_to_tensor(img_n)

        state, terms = self.cycle_branch(t_low, t_normal, cap_l, cap_n,
                                         prompt_low, prompt_normal, target_low, target_normal)
        self._check_finite(step, terms)
        try:
            terms.update(self.identity_branch(t_low, t_normal, prompt_low, prompt_normal,
                                              target_low, target_normal, state))
        except ValueError as exc:
            raise NumericError(step, "identity") from exc
        self._check_finite(step, terms)

        gan_lighten = losses.generator_adversarial_loss(
            self.backbone.discriminate(state.generated_normal, "lighten"))
        gan_darken = losses.generator_adversarial_loss(
            self.backbone.discriminate(state.generated_low, "darken"))
        terms["gan_generator"] = gan_lighten + gan_darken
        self._check_finite(step, terms)

        total = losses.full_objective(terms["cycle"], terms["caption"], terms["reflectance"],
                                      terms["identity"], terms["gan_generator"], self.weights)
        self._check_finite(step, {"total": total})

        self._check_schedule()

        self.gen_opt.zero_grad()
        total.backward()
        raw_norm = float(torch.nn.utils.clip_grad_norm_(
            list(self.backbone.generator_parameters()), cfg.grad_clip_max_norm))
        self.gen_opt.step()

        disc_loss = self.discriminator_branch(state.generated_normal, state.generated_low,
                                              t_normal, t_low)
        if not torch.isfinite(disc_loss).all():
            raise NumericError(step, "gan_discriminator")
        self.disc_opt.zero_grad()
        disc_loss.backward()
        torch.nn.utils.clip_grad_norm_(
            list(self.backbone.discriminator_parameters()), cfg.grad_clip_max_norm)
        self.disc_opt.step()

        return losses.LossReport(
            step=step,
            cycle=terms["cycle"].detach().item(),
            caption=terms["caption"].detach().item(),
            reflectance=terms["reflectance"].detach().item(),
            identity=terms["identity"].detach().item(),
            gan_generator=terms["gan_generator"].detach().item(),
            gan_generator_lighten=gan_lighten.detach().item(),
            gan_generator_darken=gan_darken.detach().item(),
            gan_discriminator=disc_loss.detach().item(),
            grad_norm_raw=raw_norm,
            grad_norm=min(raw_norm, cfg.grad_clip_max_norm),
            total=total.detach().item(),
        )

    @staticmethod
    def _check_finite(step: int, terms: dict) -> None:
        for name, value in terms.items():
            if not torch.isfinite(value).all():
                raise NumericError(step, name)

    def _check_schedule(self):
        for pass_name, direction, kind in self.prompt_log:
            expected = PROMPT_SCHEDULE[pass_name]
            if (direction, kind) != expected:
                raise AssertionError(
                    f"conditioning schedule violation in {pass_name}: "
                    f"got {(direction, kind)}, expected {expected}"
                )

    def train(self) -> TrainResult:
        cfg = self.cfg
        torch.set_num_threads(1)
        os.makedirs(self.out_dir, exist_ok=True)
        trace_path = os.path.join(self.out_dir, "trace.csv")
        ckpt_root = os.path.join(self.out_dir, "checkpoints")
        manifest = RunManifest(
            os.path.join(self.out_dir, "run_manifest.json"), "train", cfg,
            dataset_fingerprints={
                "low": fingerprint_tree(os.path.join(self.data_root, "low")),
                "normal": fingerprint_tree(os.path.join(self.data_root, "normal")),
            },
        )
        save_config(cfg, os.path.join(self.out_dir, "config.yaml"))
        losses.write_trace_header(trace_path)

        reports = []
        final_dir = os.path.join(ckpt_root, "final")
        try:
            for step in range(1, cfg.iterations + 1):
                report = self.train_step(step)
                reports.append(report)
                losses.append_trace_row(trace_path, report)
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(self.backbone, cfg, os.path.join(ckpt_root, f"step_{step:06d}"), step)
            save_checkpoint(self.backbone, cfg, final_dir, cfg.iterations)
        except Exception:
            manifest.finalize("failed")
            raise
        manifest.finalize("completed", extra={"final_checkpoint": final_dir})
        return TrainResult(self.out_dir, final_dir, trace_path,
                           os.path.join(self.out_dir, "run_manifest.json"), reports)


def train(cfg: TrainerConfig, data_root, out_dir) -> TrainResult:
    """Run a full training job; returns paths to checkpoint, trace, manifest."""
    return Trainer(cfg, data_root, out_dir).train()
