"""Conditioning injection for the UNet cross-attention sites.

Four modes are supported: plain text cross-attention, the sequential
"original" adapter (image attention queried from the text-attention
output), the decoupled image-prompt adapter, and the two-stage cycle
attention (prompt queries the latent, the response queries the prompt).
All attention helpers are pure functions over explicit weight matrices;
AdapterSite wraps one set of per-scale weights as a torch module.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

ADAPTER_MODES = ("text_only", "original", "ip_adapter", "cycle_attention")


def _attend(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor):
    """Scaled dot-product attention; scale uses the key channel width."""
    scale = 1.0 / math.sqrt(key.shape[-1])
    weights = torch.softmax(query @ key.transpose(-1, -2) * scale, dim=-1)
    return weights @ value, weights


def text_cross_attention(
    latent_tokens: torch.Tensor,
    text_tokens: torch.Tensor,
    query_proj: torch.Tensor,
    key_proj: torch.Tensor,
    value_proj: torch.Tensor,
    return_weights: bool = False,
):
    """Standard cross-attention: queries from the latent, keys/values from text."""
    out, weights = _attend(latent_tokens @ query_proj, text_tokens @ key_proj, text_tokens @ value_proj)
    return (out, weights) if return_weights else out


def cycle_attention(
    latent_tokens: torch.Tensor,
    prompt_tokens: torch.Tensor,
    query_proj: torch.Tensor,
    key_proj: torch.Tensor,
    value_proj: torch.Tensor,
    return_weights: bool = False,
):
    """Two chained attentions: the prompt queries the latent, then the
    response queries the prompt.

    Stage 1 uses the raw latent tokens as both keys and values (no
    projection). Requires one prompt token per latent token, which is why
    prompt maps are pooled to each site's grid before injection.
    """
    if prompt_tokens.shape[0] != latent_tokens.shape[0]:
        raise ValueError(
            "prompt/latent token counts must match: "
            f"{prompt_tokens.shape[0]} vs {latent_tokens.shape[0]}"
        )
    fused, first = _attend(prompt_tokens @ query_proj, latent_tokens, latent_tokens)
    out, second = _attend(fused, prompt_tokens @ key_proj, prompt_tokens @ value_proj)
    return (out, (first, second)) if return_weights else out


def ip_adapter_attention(
    latent_tokens: torch.Tensor,
    prompt_tokens: torch.Tensor,
    query_proj: torch.Tensor,
    key_proj: torch.Tensor,
    value_proj: torch.Tensor,
    return_weights: bool = False,
):
    """Decoupled image branch: queries from the latent (shared query
    projection), keys/values from the projected prompt tokens."""
    out, weights = _attend(
        latent_tokens @ query_proj, prompt_tokens @ key_proj, prompt_tokens @ value_proj
    )
    return (out, weights) if return_weights else out


def decoupled_combine(text_features: torch.Tensor, branch_features: torch.Tensor) -> torch.Tensor:
    """Elementwise sum of the text branch and the image branch."""
    if text_features.shape != branch_features.shape:
        raise ValueError(
            f"branch shapes must match: {tuple(text_features.shape)} vs {tuple(branch_features.shape)}"
        )
    return text_features + branch_features


def extract_image_prompt_features(
    prompt_map,
    grid_shapes: list[tuple[int, int]],
    lift_vectors: list[torch.Tensor],
) -> list[torch.Tensor]:
    """Pool a single-channel prompt map to each site grid and lift to tokens.

    The map is average-pooled to every (h, w) in `grid_shapes` (pooling
    factors must divide the map exactly) and each pooled pixel is lifted to
    a token by scaling the site's frozen lift vector, giving h*w rows of
    prompt tokens per scale.
    """
    if len(grid_shapes) != len(lift_vectors):
        raise ValueError("one lift vector per scale is required")
    pm = torch.as_tensor(prompt_map, dtype=lift_vectors[0].dtype, device=lift_vectors[0].device)
    if pm.ndim != 2:
        raise ValueError(f"prompt map must be 2-D, got shape {tuple(pm.shape)}")
    height, width = pm.shape
    tokens = []
    for (gh, gw), lift in zip(grid_shapes, lift_vectors):
        if height % gh or width % gw:
            raise ValueError(
                f"map {height}x{width} does not pool evenly to grid {gh}x{gw}"
            )
        pooled = F.avg_pool2d(pm[None, None], kernel_size=(height // gh, width // gw))
        tokens.append(pooled.reshape(-1, 1) * lift[None, :])
    return tokens


class AdapterSite(nn.Module):
    """One cross-attention injection point of the UNet.

    Text projections are frozen with the backbone core; the prompt
    projections are the trainable adapter weights.
    """

    def __init__(self, latent_dim: int, text_dim: int, prompt_dim: int, gen: torch.Generator):
        super().__init__()

        def draw(rows, cols):
            return torch.randn(rows, cols, generator=gen) / math.sqrt(rows)

        self.text_query = nn.Parameter(draw(latent_dim, latent_dim), requires_grad=False)
        self.text_key = nn.Parameter(draw(text_dim, latent_dim), requires_grad=False)
        self.text_value = nn.Parameter(draw(text_dim, latent_dim), requires_grad=False)
        self.prompt_query = nn.Parameter(draw(prompt_dim, latent_dim))
        self.prompt_key = nn.Parameter(draw(prompt_dim, latent_dim))
        self.prompt_value = nn.Parameter(draw(prompt_dim, latent_dim))

    def forward(
        self,
        latent_tokens: torch.Tensor,
        text_tokens: torch.Tensor,
        prompt_tokens: torch.Tensor | None,
        mode: str,
    ) -> torch.Tensor:
        if mode not in ADAPTER_MODES:
            raise ValueError(f"unknown adapter mode {mode!r}; expected one of {ADAPTER_MODES}")
        z_text = text_cross_attention(
            latent_tokens, text_tokens, self.text_query, self.text_key, self.text_value
        )
        if mode == "text_only":
            return latent_tokens + z_text
        if prompt_tokens is None:
            raise ValueError(f"adapter mode {mode!r} requires image prompt tokens")
        if mode == "cycle_attention":
            z_branch = cycle_attention(
                latent_tokens, prompt_tokens, self.prompt_query, self.prompt_key, self.prompt_value
            )
        elif mode == "ip_adapter":
            z_branch = ip_adapter_attention(
                latent_tokens, prompt_tokens, self.text_query, self.prompt_key, self.prompt_value
            )
        else:  # original: image attention chained after the text attention
            z_branch = ip_adapter_attention(
                z_text, prompt_tokens, self.text_query, self.prompt_key, self.prompt_value
            )
        return latent_tokens + decoupled_combine(z_text, z_branch)
