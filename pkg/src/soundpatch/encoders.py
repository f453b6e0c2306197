"""Toy text and patch encoders plus their contrastive training objective.

The text encoder embeds class-name tokens, mean-pools (captions are unordered
class sets) and refines with a 2-layer MLP. The image encoder runs a shared
2-conv stack over each 16x16 patch. Both land in the same width so the
grounding projections can compare them.

The contrastive objective has two directions:
  - text->patches: cross-entropy between the attention weights (at the
    attention's own 1/sqrt(d_k) scaling) and the query's ground-truth patch
    distribution - the MLE form of the attention weights;
  - patches->text: batch-level InfoNCE at a learnable temperature tau.
Only the first direction defines the contrastive excess (the expected KL of
ground truth from attention), which is what the error bound consumes.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DataConfig, EncoderConfig
from .textures import class_names
from .theory import contrast_excess


class OOVTokenError(KeyError):
    pass


class ResolutionMismatchError(ValueError):
    pass


class Vocabulary:
    def __init__(self, num_classes: int):
        self.names = class_names(num_classes)
        self.index = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def encode(self, tokens: list[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise OOVTokenError(f"OOV token {exc.args[0]!r}; vocabulary: {self.names}")


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, cfg: EncoderConfig):
        super().__init__()
        L = cfg.embed_dim
        self.embedding = nn.Embedding(vocab_size, L)
        self.mlp = nn.Sequential(nn.Linear(L, L), nn.SiLU(), nn.Linear(L, L))

    def forward(self, token_ids: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """token_ids: (B, K) long, padded entries marked False in mask."""
        emb = self.embedding(token_ids.clamp_min(0))
        if mask is None:
            pooled = emb.mean(dim=1)
        else:
            w = mask.float().unsqueeze(-1)
            pooled = (emb * w).sum(dim=1) / w.sum(dim=1).clamp_min(1e-9)
        return self.mlp(pooled)


class PatchEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, data: DataConfig):
        super().__init__()
        self.grid = data.grid
        self.patch_px = data.patch_pixels
        self.image_size = data.image_size
        reduced = self.patch_px // 4
        self.conv = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.fc = nn.Linear(32 * reduced * reduced, cfg.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, 3, H, W) -> (B, P, L), patches in row-major order."""
        b, c, h, w = images.shape
        if h != self.image_size or w != self.image_size:
            raise ResolutionMismatchError(
                f"expected {self.image_size}x{self.image_size} images, got {h}x{w}")
        pp = self.patch_px
        patches = (images.unfold(2, pp, pp).unfold(3, pp, pp)
                   .permute(0, 2, 3, 1, 4, 5)
                   .reshape(b * self.grid * self.grid, c, pp, pp))
        feats = self.conv(patches).flatten(1)
        return self.fc(feats).view(b, self.grid * self.grid, -1)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ResolutionMismatchError(f"expected HxWx3 image, got {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def pad_token_batch(token_lists: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    k = max(len(t) for t in token_lists)
    ids = torch.zeros(len(token_lists), k, dtype=torch.long)
    mask = torch.zeros(len(token_lists), k, dtype=torch.bool)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = torch.tensor(toks)
        mask[i, : len(toks)] = True
    return ids, mask


def contrastive_train(text_enc: TextEncoder, patch_enc: PatchEncoder, grounding,
                      queries: list[dict], cfg: EncoderConfig, epochs: int | None = None,
                      seed: int = 0) -> list[dict]:
    """Train encoders + grounding projections on (caption, patch-distribution)
    queries. Each query: {"tokens": [id], "image": tensor (3,H,W), "p": (P,)}.

    Returns a per-epoch log with the attention cross-entropy excess.
    """
    if not queries:
        raise ValueError("no queries")
    epochs = cfg.epochs if epochs is None else epochs
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    params = (list(text_enc.parameters()) + list(patch_enc.parameters())
              + list(grounding.parameters()))
    opt = torch.optim.Adam(params, lr=cfg.lr)

    images = torch.stack([q["image"] for q in queries])
    ps = torch.stack([torch.as_tensor(q["p"], dtype=torch.float32) for q in queries])
    ids, mask = pad_token_batch([q["tokens"] for q in queries])

    n = len(queries)
    log = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        excess_sum = loss_sum = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].copy())
            e_t = text_enc(ids[idx], mask[idx])
            e_v = patch_enc(images[idx])
            q_proj, k_proj, _ = grounding.project(e_t, e_v)
            logits = grounding.attention_logits(q_proj, k_proj)     # (B, P)
            p = ps[idx]
            logp = F.log_softmax(logits, dim=-1)
            ce = -(p * logp).sum(dim=-1)
            entropy = -(p * torch.log(p.clamp_min(1e-12))).sum(dim=-1)
            t2p = ce.mean()

            # symmetric direction: match the p-weighted key readout back to
            # its own query among the batch, at temperature tau
            k_bar = torch.einsum("bp,bpd->bd", p, k_proj)
            sim = (k_bar @ q_proj.squeeze(1).T) / (
                grounding.d_k ** 0.5 * grounding.tau())
            p2t = F.cross_entropy(sim, torch.arange(len(idx)))

            loss = t2p + p2t
            if not torch.isfinite(loss):
                raise RuntimeError(f"contrastive training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            excess_sum += (ce - entropy).mean().item()
            loss_sum += loss.item()
            batches += 1
        log.append({"epoch": epoch, "loss": loss_sum / batches,
                    "excess": excess_sum / batches})
    return log


@torch.no_grad()
def attention_maps_for_queries(text_enc: TextEncoder, patch_enc: PatchEncoder,
                               grounding, queries: list[dict]) -> np.ndarray:
    images = torch.stack([q["image"] for q in queries])
    ids, mask = pad_token_batch([q["tokens"] for q in queries])
    e_t = text_enc(ids, mask)
    e_v = patch_enc(images)
    q_proj, k_proj, _ = grounding.project(e_t, e_v)
    return grounding.attention_weights(q_proj, k_proj).numpy()


def epsilon_contrast(text_enc: TextEncoder, patch_enc: PatchEncoder, grounding,
                     queries: list[dict]) -> float:
    """Exact expected KL(p_q || u_q) over the query set (0 log 0 = 0)."""
    u = attention_maps_for_queries(text_enc, patch_enc, grounding, queries)
    p = np.stack([np.asarray(q["p"], dtype=np.float64) for q in queries])
    return contrast_excess(p, u.astype(np.float64))
