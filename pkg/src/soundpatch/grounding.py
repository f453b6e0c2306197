"""Text-to-image grounding: QKV projections, patch attention, test-time mask
substitution by moment matching, and the fused conditioning readout.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import EncoderConfig

VARIANTS = ("dot_product_single", "dot_product_multihead", "additive")

DEGENERATE_STD = 1e-12


class DegenerateMaskWarning(UserWarning):
    pass


@dataclass
class AttentionMap:
    weights: np.ndarray
    kind: str                    # softmax_attention | ground_truth_mask | rescaled_mask

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)


class GroundingModel(nn.Module):
    """Owns W^Q/W^K/W^V (bias-free, as pure projections), learnable positional
    encodings added to keys and values, the attention variants, and the MLP
    that turns the attention readout into the diffusion condition."""

    def __init__(self, cfg: EncoderConfig, n_patches: int,
                 variant: str = "dot_product_single", n_heads: int = 4,
                 use_positional_encoding: bool = True):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {variant!r}")
        L, d_k, d_v = cfg.embed_dim, cfg.d_k, cfg.d_v
        self.d_k = d_k
        self.d_v = d_v
        self.n_patches = n_patches
        self.variant = variant
        self.n_heads = n_heads
        self.use_positional_encoding = use_positional_encoding
        self.w_q = nn.Linear(L, d_k, bias=False)
        self.w_k = nn.Linear(L, d_k, bias=False)
        self.w_v = nn.Linear(L, d_v, bias=False)
        self.pos_k = nn.Parameter(0.02 * torch.randn(n_patches, d_k))
        self.pos_v = nn.Parameter(0.02 * torch.randn(n_patches, d_v))
        self.mlp = nn.Sequential(
            nn.Linear(d_v, cfg.mlp_hidden), nn.GELU(),
            nn.Linear(cfg.mlp_hidden, cfg.cond_dim))
        if variant == "dot_product_multihead":
            self.head_proj = nn.Linear(d_v, d_v)
        if variant == "additive":
            self.add_w1 = nn.Linear(d_k, d_k)
            self.add_w2 = nn.Linear(d_k, d_k)
            self.add_v = nn.Linear(d_k, 1, bias=False)
        self.log_tau = nn.Parameter(torch.log(torch.tensor(cfg.tau_init)))
        self._tau_bounds = (cfg.tau_min, cfg.tau_max)

    def tau(self) -> torch.Tensor:
        lo, hi = self._tau_bounds
        return self.log_tau.exp().clamp(lo, hi)

    def project(self, text_emb: torch.Tensor, patch_embs: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(B, L), (B, P, L) -> Q (B, 1, d_k), K (B, P, d_k), V (B, P, d_v);
        positional encodings go onto K and V rows."""
        if patch_embs.shape[1] != self.n_patches:
            raise ValueError(
                f"config mismatch: expected {self.n_patches} patches, got {patch_embs.shape[1]}")
        q = self.w_q(text_emb).unsqueeze(1)
        k = self.w_k(patch_embs)
        v = self.w_v(patch_embs)
        if self.use_positional_encoding:
            k = k + self.pos_k
            v = v + self.pos_v
        return q, k, v

    def attention_logits(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        """Single-map logits (B, P) for the default and additive variants; the
        multi-head variant averages per-head logits for its summary map."""
        if self.variant == "additive":
            h = torch.tanh(self.add_w1(q) + self.add_w2(k))
            return self.add_v(h).squeeze(-1)
        if self.variant == "dot_product_multihead":
            return self._head_logits(q, k).mean(dim=1)
        return (q @ k.transpose(1, 2)).squeeze(1) / self.d_k ** 0.5

    def _head_logits(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        b, p, _ = k.shape
        hd = self.d_k // self.n_heads
        qh = q.view(b, 1, self.n_heads, hd).transpose(1, 2)
        kh = k.view(b, p, self.n_heads, hd).transpose(1, 2)
        return (qh @ kh.transpose(2, 3)).squeeze(2) / hd ** 0.5   # (B, H, P)

    def attention_weights(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.attention_logits(q, k), dim=-1)

    def head_weights(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        if self.variant != "dot_product_multihead":
            raise ValueError("per-head maps only exist for the multi-head variant")
        return torch.softmax(self._head_logits(q, k), dim=-1)

    def fuse(self, weights: torch.Tensor, v: torch.Tensor,
             q: torch.Tensor | None = None, k: torch.Tensor | None = None) -> torch.Tensor:
        """Attention readout -> condition vector (B, cond_dim).

        weights (B, P) may be softmax attention or a substituted mask. The
        multi-head variant reads out per head and concatenate-projects, using
        its own per-head weights when q/k are supplied.
        """
        if self.variant == "dot_product_multihead" and q is not None and k is not None:
            hw = self.head_weights(q, k)                          # (B, H, P)
            b, p, _ = v.shape
            vh = v.view(b, p, self.n_heads, self.d_v // self.n_heads).transpose(1, 2)
            readout = (hw.unsqueeze(2) @ vh).squeeze(2).reshape(b, self.d_v)
            readout = self.head_proj(readout)
        else:
            readout = (weights.unsqueeze(1) @ v).squeeze(1)
            if self.variant == "dot_product_multihead":
                readout = self.head_proj(readout)
        return self.mlp(readout)


def rescale_mask(raw_mask: np.ndarray, reference: np.ndarray | AttentionMap) -> AttentionMap:
    """Affinely match the raw mask to the reference map's mean and variance.

    Values may come out negative; only the two moments are promised. Any
    degenerate side (zero variance) falls back to the uniform map.
    """
    ref = reference.weights if isinstance(reference, AttentionMap) else np.asarray(reference)
    raw = np.asarray(raw_mask, dtype=np.float64)
    if raw.shape != ref.shape:
        raise ValueError(f"mask shape {raw.shape} != reference shape {ref.shape}")
    p = raw.size
    mu_ref, sd_ref = float(ref.mean()), float(ref.std())
    mu_raw, sd_raw = float(raw.mean()), float(raw.std())
    if sd_raw < DEGENERATE_STD or sd_ref < DEGENERATE_STD:
        warnings.warn("degenerate mask or reference: falling back to uniform map",
                      DegenerateMaskWarning)
        return AttentionMap(np.full(p, 1.0 / p), "rescaled_mask")
    out = mu_ref + (sd_ref / sd_raw) * (raw - mu_raw)
    return AttentionMap(out, "rescaled_mask")


def combine_masks(masks: np.ndarray, extents: np.ndarray) -> np.ndarray:
    """Extent-weighted sum of per-object masks, renormalized to the simplex."""
    masks = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    w = np.asarray(extents, dtype=np.float64)
    combined = (masks * w[:, None]).sum(axis=0)
    total = combined.sum()
    if total <= 0:
        raise ValueError("no object selected")
    return combined / total


def uniform_map(n_patches: int) -> AttentionMap:
    return AttentionMap(np.full(n_patches, 1.0 / n_patches), "softmax_attention")


# ---------------------------------------------------------------------------
# visualization

def upsample_bilinear(weights: np.ndarray, grid: int, size: int) -> np.ndarray:
    from PIL import Image
    small = np.asarray(weights, dtype=np.float64).reshape(grid, grid)
    img = Image.fromarray(small.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float64)


def heatmap_png(weights: np.ndarray, grid: int = 4, size: int = 64) -> bytes:
    """Length-P map -> bilinear-upsampled viridis heatmap PNG bytes."""
    from matplotlib import cm
    from PIL import Image
    up = upsample_bilinear(weights, grid, size)
    lo, hi = up.min(), up.max()
    norm = (up - lo) / (hi - lo) if hi - lo > 1e-12 else np.full_like(up, 0.5)
    rgba = (cm.viridis(norm) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(rgba[..., :3]).save(buf, format="PNG")
    return buf.getvalue()
