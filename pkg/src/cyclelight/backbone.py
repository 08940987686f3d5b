"""Trainable lighten/darken encoder-UNet-decoder stack.

The core weights (encoders, shared UNet, decoders, text embedder, text
attention projections) are frozen at seeded random init; the trainable set
is exactly the low-rank deltas on encoder/decoder convs, the per-site
prompt projections, the reflectance decoder, and the two patch
discriminators. Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapter import ADAPTER_MODES, AdapterSite, extract_image_prompt_features

DIRECTIONS = ("lighten", "darken")


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int = 16
    num_scales: int = 3
    text_dim: int = 64
    text_vocab: int = 4096
    text_max_tokens: int = 16
    prompt_dim: int = 16
    lora_rank: int = 4
    lora_alpha: float = 4.0
    disc_channels: int = 16
    seed: int = 7


@dataclass
class LatentStack:
    """Per-scale UNet token features (coarse -> fine), final latent, encoder skips."""

    scales: list[torch.Tensor]
    final: torch.Tensor
    skips: list[torch.Tensor]

    def final_tokens(self) -> torch.Tensor:
        """Final latent flattened to (tokens, channels)."""
        grid = self.final[0]
        return grid.reshape(grid.shape[0], -1).T


@dataclass
class ConditionBundle:
    """Conditioning for one UNet pass: text tokens, per-scale prompt tokens
    (coarse -> fine, aligned with LatentStack.scales), optional caption
    tokens, and instrumentation tags."""

    text_tokens: torch.Tensor
    image_prompt_tokens: list[torch.Tensor] | None
    direction: str
    caption_tokens: torch.Tensor | None = None
    prompt_kind: str = "none"  # 'reverse' | 'direct' | 'none'


def apply_lora(base_weight: torch.Tensor, delta_a: torch.Tensor, delta_b: torch.Tensor, alpha: float) -> torch.Tensor:
    """Effective weight = base + (alpha / rank) * delta_a @ delta_b.

    base_weight is (out, in) and is never modified; delta_a is (out, rank),
    delta_b is (rank, in).
    """
    if delta_a.ndim != 2 or delta_b.ndim != 2:
        raise ValueError("lora deltas must be 2-D matrices")
    rank = delta_a.shape[1]
    if rank < 1 or delta_b.shape[0] != rank:
        raise ValueError(
            f"rank mismatch: delta_a is {tuple(delta_a.shape)}, delta_b is {tuple(delta_b.shape)}"
        )
    if delta_a.shape[0] != base_weight.shape[0] or delta_b.shape[1] != base_weight.shape[1]:
        raise ValueError(
            f"delta shapes {tuple(delta_a.shape)} x {tuple(delta_b.shape)} do not match "
            f"base weight {tuple(base_weight.shape)}"
        )
    return base_weight + (alpha / rank) * (delta_a @ delta_b)


class LoraConv2d(nn.Module):
    """Conv with a frozen base kernel and a trainable low-rank weight delta."""

    def __init__(self, in_ch, out_ch, kernel_size, stride, padding, rank, alpha,
                 gen: torch.Generator, gain: float = 1.0):
        super().__init__()
        k = kernel_size
        std = gain * math.sqrt(2.0 / (in_ch * k * k))
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, k, k, generator=gen) * std,
                                   requires_grad=False)
        self.bias = nn.Parameter(torch.randn(out_ch, generator=gen) * 0.01, requires_grad=False)
        self.delta_a = nn.Parameter(torch.randn(out_ch, rank, generator=gen) / math.sqrt(rank))
        self.delta_b = nn.Parameter(torch.zeros(rank, in_ch * k * k))
        self.alpha = float(alpha)
        self.stride = stride
        self.padding = padding
        self.lora_enabled = True

    def forward(self, x):
        if self.lora_enabled:
            flat = self.weight.reshape(self.weight.shape[0], -1)
            w = apply_lora(flat, self.delta_a, self.delta_b, self.alpha).reshape(self.weight.shape)
        else:
            w = self.weight
        return F.conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)


def _frozen_conv(in_ch, out_ch, kernel_size, gen, stride=1, gain=1.0):
    conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=kernel_size // 2)
    std = gain * math.sqrt(2.0 / (in_ch * kernel_size * kernel_size))
    with torch.no_grad():
        conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
        conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.01)
    conv.weight.requires_grad_(False)
    conv.bias.requires_grad_(False)
    return conv


def _frozen_groupnorm(channels):
    norm = nn.GroupNorm(min(8, channels), channels)
    norm.weight.requires_grad_(False)
    norm.bias.requires_grad_(False)
    return norm


class ResBlock(nn.Module):
    """Frozen norm-act-conv residual block."""

    def __init__(self, channels, gen):
        super().__init__()
        self.norm1 = _frozen_groupnorm(channels)
        self.conv1 = _frozen_conv(channels, channels, 3, gen)
        self.norm2 = _frozen_groupnorm(channels)
        self.conv2 = _frozen_conv(channels, channels, 3, gen, gain=0.5)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class TextEmbedder(nn.Module):
    """Frozen hash-bucket embedder: whitespace tokens -> rows of a seeded table."""

    def __init__(self, vocab, dim, max_tokens, gen):
        super().__init__()
        self.table = nn.Parameter(torch.randn(vocab, dim, generator=gen) / math.sqrt(dim),
                                  requires_grad=False)
        self.max_tokens = max_tokens

    def token_index(self, token: str) -> int:
        return zlib.crc32(token.encode("utf-8")) % self.table.shape[0]

    def forward(self, prompt: str) -> torch.Tensor:
        tokens = prompt.split()
        if not tokens:
            raise ValueError("text prompt must contain at least one token")
        tokens = tokens[: self.max_tokens]
        idx = torch.tensor([self.token_index(t) for t in tokens], dtype=torch.long)
        return self.table[idx]


def _encoder_channels(cfg: BackboneConfig) -> list[int]:
    chans = [cfg.base_channels]
    for i in range(cfg.num_scales):
        chans.append(min(cfg.base_channels * 2 ** (i + 1), cfg.base_channels * 4))
    return chans


class Encoder(nn.Module):
    """Downsampling conv stack; returns the coarsest grid plus skip features."""

    def __init__(self, cfg: BackboneConfig, gen):
        super().__init__()
        chans = _encoder_channels(cfg)
        rank, alpha = cfg.lora_rank, cfg.lora_alpha
        self.num_scales = cfg.num_scales
        self.stem = LoraConv2d(3, chans[0], 3, 1, 1, rank, alpha, gen)
        self.stem_norm = _frozen_groupnorm(chans[0])
        self.downs = nn.ModuleList(
            LoraConv2d(chans[i], chans[i + 1], 3, 2, 1, rank, alpha, gen)
            for i in range(cfg.num_scales)
        )
        self.norms = nn.ModuleList(_frozen_groupnorm(chans[i + 1]) for i in range(cfg.num_scales))

    def forward(self, x):
        h = F.silu(self.stem_norm(self.stem(x)))
        skips = []
        for i, (down, norm) in enumerate(zip(self.downs, self.norms)):
            h = F.silu(norm(down(h)))
            if i < self.num_scales - 1:
                skips.append(h)
        return h, skips


class Decoder(nn.Module):
    """Upsampling stack consuming encoder skips; sigmoid output in [0, 1]."""

    def __init__(self, cfg: BackboneConfig, gen):
        super().__init__()
        chans = _encoder_channels(cfg)  # e.g. [16, 32, 64, 64]
        rank, alpha = cfg.lora_rank, cfg.lora_alpha
        self.num_scales = cfg.num_scales
        ups, fuses, norms = [], [], []
        for i in range(cfg.num_scales, 0, -1):
            ups.append(LoraConv2d(chans[i], chans[i - 1], 3, 1, 1, rank, alpha, gen))
            norms.append(_frozen_groupnorm(chans[i - 1]))
            if i - 1 >= 1:  # a skip exists at this resolution
                fuses.append(LoraConv2d(chans[i - 1] * 2, chans[i - 1], 3, 1, 1, rank, alpha, gen))
            else:
                fuses.append(None)
        self.ups = nn.ModuleList(ups)
        self.norms = nn.ModuleList(norms)
        self.fuses = nn.ModuleList(m for m in fuses if m is not None)
        self.out = LoraConv2d(chans[0], 3, 3, 1, 1, rank, alpha, gen, gain=0.2)

    def forward(self, latent, skips):
        if len(skips) != self.num_scales - 1:
            raise ValueError(f"expected {self.num_scales - 1} skip features, got {len(skips)}")
        h = latent
        fuse_idx = 0
        for i, (up, norm) in enumerate(zip(self.ups, self.norms)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.silu(norm(up(h)))
            skip_pos = len(skips) - 1 - i
            if skip_pos >= 0:
                skip = skips[skip_pos]
                if skip.shape[-2:] != h.shape[-2:] or skip.shape[1] != h.shape[1]:
                    raise ValueError(
                        f"skip feature shape {tuple(skip.shape)} does not match "
                        f"decoder grid {tuple(h.shape)}"
                    )
                h = F.silu(self.fuses[fuse_idx](torch.cat([h, skip], dim=1)))
                fuse_idx += 1
        return torch.sigmoid(self.out(h))


class ReflectanceDecoder(nn.Module):
    """Fully trainable upsampling head predicting a reflectance map from the latent."""

    def __init__(self, cfg: BackboneConfig, gen):
        super().__init__()
        chans = _encoder_channels(cfg)
        convs, norms = [], []
        for i in range(cfg.num_scales, 0, -1):
            conv = nn.Conv2d(chans[i], chans[i - 1], 3, padding=1)
            std = math.sqrt(2.0 / (chans[i] * 9))
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            convs.append(conv)
            norms.append(nn.GroupNorm(min(8, chans[i - 1]), chans[i - 1]))
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.out = nn.Conv2d(chans[0], 3, 3, padding=1)
        with torch.no_grad():
            self.out.weight.copy_(torch.randn(self.out.weight.shape, generator=gen) * 0.05)
            self.out.bias.zero_()

    def forward(self, latent):
        h = latent
        for conv, norm in zip(self.convs, self.norms):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.silu(norm(conv(h)))
        return torch.sigmoid(self.out(h))


class PatchDiscriminator(nn.Module):
    """4-layer conv critic emitting a grid of per-patch realness scores."""

    def __init__(self, cfg: BackboneConfig, gen):
        super().__init__()
        n = cfg.disc_channels
        spec = [(3, n, 4, 2), (n, n * 2, 4, 2), (n * 2, n * 4, 4, 2)]
        layers = []
        for in_ch, out_ch, k, s in spec:
            conv = nn.Conv2d(in_ch, out_ch, k, stride=s, padding=1)
            std = math.sqrt(2.0 / (in_ch * k * k))
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            layers.append(conv)
        self.layers = nn.ModuleList(layers)
        self.out = nn.Conv2d(n * 4, 1, 3, stride=1, padding=1)
        with torch.no_grad():
            self.out.weight.copy_(torch.randn(self.out.weight.shape, generator=gen) * 0.05)
            self.out.bias.zero_()

    def forward(self, x):
        h = x
        for layer in self.layers:
            h = F.leaky_relu(layer(h), 0.2)
        return self.out(h)


class UNetCore(nn.Module):
    """Frozen 2-block UNet over the latent, with one adapter site per scale."""

    def __init__(self, cfg: BackboneConfig, gen):
        super().__init__()
        channels = _encoder_channels(cfg)[-1]
        self.block_in = ResBlock(channels, gen)
        self.site_fine = AdapterSite(channels, cfg.text_dim, cfg.prompt_dim, gen)
        self.down = _frozen_conv(channels, channels, 3, gen, stride=2)
        self.block_mid = ResBlock(channels, gen)
        self.site_coarse = AdapterSite(channels, cfg.text_dim, cfg.prompt_dim, gen)
        self.up = _frozen_conv(channels, channels, 3, gen)
        self.block_out = ResBlock(channels, gen)

    @staticmethod
    def _inject(site, grid, cond: ConditionBundle, scale_idx: int, mode: str):
        _, c, h, w = grid.shape
        tokens = grid[0].reshape(c, h * w).T
        prompt_tokens = None
        if mode != "text_only":
            if cond.image_prompt_tokens is None:
                raise ValueError(f"adapter mode {mode!r} requires image prompt tokens")
            prompt_tokens = cond.image_prompt_tokens[scale_idx]
            if prompt_tokens.shape[0] != h * w:
                raise ValueError(
                    f"scale {scale_idx}: prompt token count {prompt_tokens.shape[0]} "
                    f"does not match latent token count {h * w}"
                )
        out = site(tokens, cond.text_tokens, prompt_tokens, mode)
        return out.T.reshape(1, c, h, w), out

    def forward(self, latent, skips, cond: ConditionBundle, mode: str) -> LatentStack:
        if mode not in ADAPTER_MODES:
            raise ValueError(f"unknown adapter mode {mode!r}; expected one of {ADAPTER_MODES}")
        if latent.shape[-1] % 2 or latent.shape[-2] % 2:
            raise ValueError(
                f"latent grid {tuple(latent.shape[-2:])} must have even sides for the coarse site"
            )
        h = self.block_in(latent)
        h, fine_tokens = self._inject(self.site_fine, h, cond, 1, mode)
        d = self.block_mid(self.down(h))
        d, coarse_tokens = self._inject(self.site_coarse, d, cond, 0, mode)
        u = self.up(F.interpolate(d, scale_factor=2, mode="nearest"))
        final = self.block_out(u + h)
        return LatentStack(scales=[coarse_tokens, fine_tokens], final=final, skips=skips)


def _component_seed(seed: int, name: str) -> int:
    return (seed * 1000003 + zlib.crc32(name.encode("utf-8"))) % (2**31 - 1)


def _gen(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(_component_seed(seed, name))
    return g


class Backbone(nn.Module):
    """Full model state: direction-specific encoders/decoders around a shared
    frozen UNet, plus reflectance decoder and patch discriminators.

    Lighten and darken encoders share identical frozen base weights (same
    component seed), diverging only through their LoRA deltas; decoders
    likewise.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        seed = config.seed
        self.text_embedder = TextEmbedder(config.text_vocab, config.text_dim,
                                          config.text_max_tokens, _gen(seed, "text"))
        self.lighten_encoder = Encoder(config, _gen(seed, "encoder"))
        self.darken_encoder = Encoder(config, _gen(seed, "encoder"))
        self.unet = UNetCore(config, _gen(seed, "unet"))
        self.lighten_decoder = Decoder(config, _gen(seed, "decoder"))
        self.darken_decoder = Decoder(config, _gen(seed, "decoder"))
        self.reflectance_decoder = ReflectanceDecoder(config, _gen(seed, "reflectance"))
        self.disc_lighten = PatchDiscriminator(config, _gen(seed, "disc_lighten"))
        self.disc_darken = PatchDiscriminator(config, _gen(seed, "disc_darken"))
        lift_gen = _gen(seed, "lift")
        self.prompt_lifts = nn.ParameterList(
            nn.Parameter(torch.randn(config.prompt_dim, generator=lift_gen)
                         / math.sqrt(config.prompt_dim), requires_grad=False)
            for _ in range(2)
        )

    # -- conditioning -----------------------------------------------------

    def embed_text(self, prompt: str) -> torch.Tensor:
        return self.text_embedder(prompt)

    def site_grid_shapes(self, height: int, width: int) -> list[tuple[int, int]]:
        """Site grids coarse -> fine for an input of the given size."""
        fine = 2 ** self.config.num_scales
        coarse = fine * 2
        return [(height // coarse, width // coarse), (height // fine, width // fine)]

    def build_condition(self, text: str, direction: str, prompt_map=None,
                        image_shape=None, prompt_kind: str = "none") -> ConditionBundle:
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        tokens = None
        if prompt_map is not None:
            if image_shape is None:
                image_shape = np.asarray(prompt_map).shape
            grids = self.site_grid_shapes(*image_shape)
            tokens = extract_image_prompt_features(prompt_map, grids, list(self.prompt_lifts))
        return ConditionBundle(text_tokens=self.embed_text(text), image_prompt_tokens=tokens,
                               direction=direction, prompt_kind=prompt_kind)

    # -- forward pieces ---------------------------------------------------

    def encode(self, img: torch.Tensor, direction: str):
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        div = 2 ** self.config.num_scales
        if img.shape[-2] % div or img.shape[-1] % div:
            raise ValueError(
                f"image sides must be divisible by {div}, got {tuple(img.shape[-2:])}"
            )
        encoder = self.lighten_encoder if direction == "lighten" else self.darken_encoder
        return encoder(img)

    def unet_forward(self, latent, skips, cond: ConditionBundle, adapter_mode: str) -> LatentStack:
        return self.unet(latent, skips, cond, adapter_mode)

    def decode(self, latent, skips, direction: str) -> torch.Tensor:
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        decoder = self.lighten_decoder if direction == "lighten" else self.darken_decoder
        return decoder(latent, skips)

    def reflectance_decode(self, final_latent) -> torch.Tensor:
        return self.reflectance_decoder(final_latent)

    def discriminate(self, img: torch.Tensor, direction: str) -> torch.Tensor:
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        disc = self.disc_lighten if direction == "lighten" else self.disc_darken
        return disc(img)

    def translate(self, img: torch.Tensor, cond: ConditionBundle, adapter_mode: str):
        """encode -> unet -> decode along cond.direction; returns (image, stack)."""
        latent, skips = self.encode(img, cond.direction)
        stack = self.unet_forward(latent, skips, cond, adapter_mode)
        return self.decode(stack.final, stack.skips, cond.direction), stack

    # -- parameter bookkeeping ---------------------------------------------

    def set_lora_enabled(self, enabled: bool) -> None:
        for module in self.modules():
            if isinstance(module, LoraConv2d):
                module.lora_enabled = enabled

    def parameter_groups(self) -> dict[str, dict[str, torch.Tensor]]:
        groups = {"lora": {}, "adapter": {}, "reflectance_decoder": {}, "discriminators": {}}
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            if "delta_a" in name or "delta_b" in name:
                groups["lora"][name] = p
            elif name.startswith("reflectance_decoder."):
                groups["reflectance_decoder"][name] = p
            elif name.startswith(("disc_lighten.", "disc_darken.")):
                groups["discriminators"][name] = p
            elif "prompt_query" in name or "prompt_key" in name or "prompt_value" in name:
                groups["adapter"][name] = p
            else:
                raise RuntimeError(f"unexpected trainable parameter: {name}")
        return groups

    def generator_parameters(self):
        groups = self.parameter_groups()
        for key in ("lora", "adapter", "reflectance_decoder"):
            yield from groups[key].values()

    def discriminator_parameters(self):
        yield from self.parameter_groups()["discriminators"].values()

    def frozen_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if not p.requires_grad}

    def frozen_fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.frozen_parameters()):
            digest.update(name.encode())
            digest.update(self.frozen_parameters()[name].detach().numpy().tobytes())
        return digest.hexdigest()


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """H x W x 3 float raster -> (1, 3, H, W) float32 tensor."""
    arr = np.asarray(img, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) tensor -> H x W x 3 float32 raster in [0, 1]."""
    if t.ndim == 4:
        t = t[0]
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)
