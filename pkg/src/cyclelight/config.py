"""Run configuration, config files, hashing, and run manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass

import yaml

from .adapter import ADAPTER_MODES
from .backbone import BackboneConfig


class ConfigError(Exception):
    """Invalid or unparseable run configuration."""


@dataclass
class TrainerConfig:
    # optimizer
    learning_rate: float = 1e-5
    weight_decay: float = 1e-2
    optimizer_epsilon: float = 1e-8
    grad_clip_max_norm: float = 10.0
    batch_size: int = 1
    # schedule
    crop_size: int = 64
    iterations: int = 500
    checkpoint_every: int = 100
    # objective
    lambda_idt: float = 0.5
    lambda_gan: float = 1.0
    caption_consistency: bool = True
    reflectance_consistency: bool = True
    # conditioning
    adapter_mode: str = "cycle_attention"
    text_prompt_lighten: str = "bright normal light photo"
    text_prompt_darken: str = "dark low light photo"
    # backbone
    lora_rank: int = 4
    lora_alpha: float = 4.0
    base_channels: int = 16
    num_scales: int = 3
    text_dim: int = 64
    text_vocab: int = 4096
    text_max_tokens: int = 16
    prompt_dim: int = 16
    disc_channels: int = 16
    # reflectance oracle
    retinex_blur_sigma: float = 5.0
    retinex_eps: float = 0.01
    # reproducibility
    seed: int = 7

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            base_channels=self.base_channels,
            num_scales=self.num_scales,
            text_dim=self.text_dim,
            text_vocab=self.text_vocab,
            text_max_tokens=self.text_max_tokens,
            prompt_dim=self.prompt_dim,
            lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha,
            disc_channels=self.disc_channels,
            seed=self.seed,
        )


def validate_config(cfg: TrainerConfig) -> TrainerConfig:
    if cfg.learning_rate <= 0:
        raise ConfigError(f"field learning_rate: must be > 0, got {cfg.learning_rate}")
    if cfg.batch_size != 1:
        raise ConfigError(f"field batch_size: fixed at 1, got {cfg.batch_size}")
    if cfg.crop_size % (2**cfg.num_scales):
        raise ConfigError(
            f"field crop_size: must be divisible by 2^num_scales={2**cfg.num_scales}, "
            f"got {cfg.crop_size}"
        )
    if cfg.adapter_mode not in ADAPTER_MODES:
        raise ConfigError(
            f"field adapter_mode: expected one of {ADAPTER_MODES}, got {cfg.adapter_mode!r}"
        )
    if cfg.iterations < 1:
        raise ConfigError(f"field iterations: must be >= 1, got {cfg.iterations}")
    if cfg.lora_rank < 1:
        raise ConfigError(f"field lora_rank: must be >= 1, got {cfg.lora_rank}")
    if cfg.lambda_idt < 0 or cfg.lambda_gan < 0:
        raise ConfigError("fields lambda_idt/lambda_gan: must be >= 0")
    if not cfg.text_prompt_lighten.split() or not cfg.text_prompt_darken.split():
        raise ConfigError("fields text_prompt_*: prompts must be non-empty")
    return cfg


def config_to_dict(cfg: TrainerConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict, source: str = "<dict>") -> TrainerConfig:
    known = {f.name: f for f in dataclasses.fields(TrainerConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{source}: unknown config field {key!r}")
        target = known[key].type
        try:
            if target == "bool":
                if not isinstance(value, bool):
                    raise ValueError("expected true/false")
                kwargs[key] = value
            elif target == "int":
                kwargs[key] = int(value)
            elif target == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = str(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: field {key!r}: {exc}") from exc
    return validate_config(TrainerConfig(**kwargs))


def load_config(path: str | os.PathLike) -> TrainerConfig:
    path = os.fspath(path)
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: no such config file") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" (line {mark.line + 1})" if mark else ""
        raise ConfigError(f"{path}{line}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping of fields")
    return config_from_dict(data, source=path)


def save_config(cfg: TrainerConfig, path: str | os.PathLike) -> None:
    with open(os.fspath(path), "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def config_hash(cfg: TrainerConfig) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def _atomic_write_json(path: str, payload: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def fingerprint_tree(root: str | os.PathLike, suffixes: tuple[str, ...] = (".png", ".txt", ".json")) -> str:
    """Order-independent digest of a directory's files (names + bytes)."""
    root = os.fspath(root)
    digest = hashlib.sha256()
    for dirpath, _, names in sorted(os.walk(root)):
        for name in sorted(names):
            if not name.endswith(suffixes):
                continue
            rel = os.path.relpath(os.path.join(dirpath, name), root)
            digest.update(rel.encode("utf-8"))
            with open(os.path.join(dirpath, name), "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()[:16]


class RunManifest:
    """Run metadata written atomically at start and finalized at exit."""

    def __init__(self, path: str | os.PathLike, command: str, cfg: TrainerConfig,
                 dataset_fingerprints: dict[str, str] | None = None):
        from . import __version__

        self.path = os.fspath(path)
        self.data = {
            "command": command,
            "artifact_version": __version__,
            "config": config_to_dict(cfg),
            "config_hash": config_hash(cfg),
            "seed": cfg.seed,
            "dataset_fingerprints": dataset_fingerprints or {},
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "finished_at": None,
            "outcome": "running",
        }
        _atomic_write_json(self.path, self.data)

    def finalize(self, outcome: str, extra: dict | None = None) -> None:
        self.data["outcome"] = outcome
        self.data["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        if extra:
            self.data.update(extra)
        _atomic_write_json(self.path, self.data)
