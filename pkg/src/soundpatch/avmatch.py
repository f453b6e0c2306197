"""Audio-visual matching scorer and corpus filter.

A 2-layer transformer with rotary position embeddings runs over the
concatenation of per-patch image tokens and strided mel-frame tokens; 3-layer
MLP heads embed each side into the shared width. Trained as binary
match/mismatch classification with label smoothing (smoothing keeps the score
distribution spread out instead of saturating at the extremes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import DataConfig, MatcherConfig, MelConfig
from .dsp import wav_to_mel
from .encoders import image_to_tensor
from .scenes import DatasetManifest, Scene


def rotary_angles(n_pos: int, dim: int) -> torch.Tensor:
    inv_freq = 1.0 / (10000 ** (torch.arange(0, dim, 2).float() / dim))
    pos = torch.arange(n_pos).float()
    return pos[:, None] * inv_freq[None, :]      # (n_pos, dim/2)


def apply_rotary(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """x: (B, H, S, D) with D even; rotate pairs by position-dependent angles."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = angles.cos(), angles.sin()
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class RotarySelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        qkv = self.qkv(x).view(b, s, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        ang = rotary_angles(s, self.head_dim).to(x.dtype)
        q, k = apply_rotary(q, ang), apply_rotary(k, ang)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim ** 0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, s, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = RotarySelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(nn.Linear(d_model, ffn_dim), nn.GELU(),
                                 nn.Linear(ffn_dim, d_model))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def _mlp(dims: list[int]) -> nn.Sequential:
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


class AVMatcher(nn.Module):
    def __init__(self, cfg: MatcherConfig, data: DataConfig, mel: MelConfig):
        super().__init__()
        d = cfg.d_model
        pp = data.patch_pixels
        self.mel_stride = cfg.mel_stride
        self.patch_embed = nn.Sequential(
            nn.Conv2d(3, 8, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.SiLU(), nn.Flatten(),
            _mlp([16 * (pp // 4) ** 2, d, d, d]))
        self.mel_embed = _mlp([mel.n_mels * cfg.mel_stride, d, d, d])
        self.grid = data.grid
        self.patch_px = pp
        self.blocks = nn.ModuleList(
            [TransformerBlock(d, cfg.n_heads, cfg.ffn_dim) for _ in range(cfg.n_layers)])
        self.head = _mlp([d] * cfg.mlp_layers + [1])
        self.register_buffer("mel_mean", torch.zeros(()))
        self.register_buffer("mel_std", torch.ones(()))

    def tokens(self, images: torch.Tensor, mels: torch.Tensor) -> torch.Tensor:
        b = images.shape[0]
        pp = self.patch_px
        patches = (images.unfold(2, pp, pp).unfold(3, pp, pp)
                   .permute(0, 2, 3, 1, 4, 5)
                   .reshape(b * self.grid ** 2, 3, pp, pp))
        img_tok = self.patch_embed(patches).view(b, self.grid ** 2, -1)
        x = (mels - self.mel_mean) / self.mel_std
        t = (x.shape[1] // self.mel_stride) * self.mel_stride
        frames = x[:, :t].reshape(b, t // self.mel_stride, -1)
        mel_tok = self.mel_embed(frames)
        return torch.cat([img_tok, mel_tok], dim=1)

    def forward(self, images: torch.Tensor, mels: torch.Tensor) -> torch.Tensor:
        x = self.tokens(images, mels)
        for blk in self.blocks:
            x = blk(x)
        return self.head(x.mean(dim=1)).squeeze(-1)

    @torch.no_grad()
    def score(self, images: torch.Tensor, mels: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(images, mels))


def scene_tensors(scenes: list[Scene], mel_cfg: MelConfig
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.stack([image_to_tensor(s.image) for s in scenes])
    mels = torch.stack([torch.from_numpy(
        wav_to_mel(s.audio_ref, mel_cfg).values).float() for s in scenes])
    return images, mels


def train_matcher(matcher: AVMatcher, scenes: list[Scene], mel_cfg: MelConfig,
                  cfg: MatcherConfig, epochs: int | None = None,
                  seed: int = 0) -> list[dict]:
    """Binary match/mismatch training; mismatches pair a scene's image with a
    uniformly random different scene's audio."""
    if len(scenes) < 2:
        raise ValueError("need at least 2 scenes to form mismatched pairs")
    epochs = cfg.epochs if epochs is None else epochs
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    images, mels = scene_tensors(scenes, mel_cfg)
    matcher.mel_mean.fill_(mels.mean().item())
    matcher.mel_std.fill_(mels.std().item() + 1e-6)
    opt = torch.optim.Adam(matcher.parameters(), lr=cfg.lr)
    bce = nn.BCEWithLogitsLoss()
    n = len(scenes)
    sm = cfg.label_smoothing
    log = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            # 1:1 matched / mismatched within the batch
            offsets = rng.integers(1, n, size=len(idx))
            wrong = (idx + offsets) % n
            img = torch.cat([images[idx], images[idx]])
            mel = torch.cat([mels[idx], mels[wrong]])
            y = torch.cat([torch.full((len(idx),), 1.0 - sm),
                           torch.full((len(idx),), sm)])
            logits = matcher(img, mel)
            loss = bce(logits, y)
            if not torch.isfinite(loss):
                raise RuntimeError(f"matcher diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        log.append({"epoch": epoch, "loss": total / batches})
    matcher.eval()
    return log


@torch.no_grad()
def matcher_accuracy(matcher: AVMatcher, scenes: list[Scene], mel_cfg: MelConfig,
                     seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    images, mels = scene_tensors(scenes, mel_cfg)
    n = len(scenes)
    wrong = (np.arange(n) + rng.integers(1, n, size=n)) % n
    matched = matcher.score(images, mels).numpy()
    mismatched = matcher.score(images, mels[torch.from_numpy(wrong)]).numpy()
    return {"matched_acc": float((matched >= 0.5).mean()),
            "mismatched_acc": float((mismatched < 0.5).mean()),
            "matched_scores": matched.tolist(),
            "mismatched_scores": mismatched.tolist()}


@torch.no_grad()
def score_scenes(matcher: AVMatcher, scenes: list[Scene], mel_cfg: MelConfig,
                 batch: int = 64) -> dict[str, float]:
    scores = {}
    for start in range(0, len(scenes), batch):
        chunk = scenes[start:start + batch]
        images, mels = scene_tensors(chunk, mel_cfg)
        s = matcher.score(images, mels).numpy()
        for scene, val in zip(chunk, s):
            scores[scene.scene_id] = float(val)
    return scores


def filter_corpus(manifest: DatasetManifest, scores: dict[str, float],
                  threshold: float) -> DatasetManifest:
    """Keep scenes scoring >= threshold (inclusive; threshold 1.0 therefore
    keeps only exact-1.0 scores, typically none)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    kept = [sid for sid in manifest.scene_ids if scores[sid] >= threshold]
    return DatasetManifest(seed=manifest.seed, split=manifest.split,
                           scene_ids=kept,
                           config={**manifest.config, "filter_threshold": threshold})


def score_histogram(scores: dict[str, float], out_path: str | Path,
                    bins: int = 20) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    vals = np.array(list(scores.values()))
    counts, edges = np.histogram(vals, bins=bins, range=(0.0, 1.0))
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge")
    ax.set_xlabel("match score")
    ax.set_ylabel("scenes")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return {"counts": counts.tolist(), "edges": edges.tolist()}


# ---------------------------------------------------------------------------
# threshold sweep with a cheap downstream generator

class _SceneClassifier(nn.Module):
    """Image -> which classes sound; the downstream task for the sweep."""

    def __init__(self, num_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 8, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(4), nn.Flatten(),
            nn.Linear(16 * 16, num_classes))

    def forward(self, x):
        return self.net(x)


def corrupt_corpus(scenes: list[Scene], fraction: float, seed: int = 0) -> list[Scene]:
    """Swap the audio of a fraction of scenes with another scene's audio,
    breaking those scenes' audio-visual correspondence."""
    import copy
    rng = np.random.default_rng(seed)
    out = [copy.copy(s) for s in scenes]
    n_bad = round(fraction * len(scenes))
    bad = rng.choice(len(scenes), size=n_bad, replace=False)
    for i in bad:
        j = int((i + rng.integers(1, len(scenes))) % len(scenes))
        out[i] = copy.copy(out[i])
        out[i].audio_ref = scenes[j].audio_ref
    return out


def _downstream_acc(train_scenes: list[Scene], test_scenes: list[Scene],
                    num_classes: int, clip_seconds: float, seed: int) -> float:
    """Train image->sounding-classes on the (possibly corrupted, filtered)
    corpus, synthesize audio from the predictions, score with the oracle.

    Labels come from the scenes' AUDIO (band detection), so corrupted scenes
    teach wrong labels - exactly the failure the match filter should remove.
    """
    from .evaluate import acc_analog
    from .oracle import oracle_classify
    from .textures import mix_textures, render_texture
    torch.manual_seed(seed)
    clf = _SceneClassifier(num_classes)
    images = torch.stack([image_to_tensor(s.image) for s in train_scenes])
    labels = torch.stack([
        torch.from_numpy((oracle_classify(s.audio_ref, num_classes)
                          > 1.5 / (2 * num_classes)).astype(np.float32))
        for s in train_scenes])
    opt = torch.optim.Adam(clf.parameters(), lr=3e-3)
    bce = nn.BCEWithLogitsLoss()
    for _ in range(40):
        opt.zero_grad()
        loss = bce(clf(images), labels)
        loss.backward()
        opt.step()
    clf.eval()
    items = []
    with torch.no_grad():
        test_imgs = torch.stack([image_to_tensor(s.image) for s in test_scenes])
        probs = torch.sigmoid(clf(test_imgs)).numpy()
    for scene, pr in zip(test_scenes, probs):
        pred = np.where(pr > 0.5)[0]
        if len(pred) == 0:
            pred = np.array([int(np.argmax(pr))])
        parts = [render_texture(int(c), 0.6, clip_seconds, seed=11, num_classes=num_classes)
                 for c in pred]
        wav = mix_textures(parts)
        targets = [o.class_id for o in scene.objects]
        items.append((wav, targets))
    return acc_analog(items, num_classes)


def threshold_sweep(matcher: AVMatcher, scenes: list[Scene], test_scenes: list[Scene],
                    mel_cfg: MelConfig, num_classes: int, clip_seconds: float,
                    thresholds: tuple[float, ...] = (0.4, 0.5, 0.6, 0.7, 0.8),
                    seed: int = 0) -> dict:
    """Filter at each threshold, train the downstream generator on the kept
    scenes, report its oracle accuracy per threshold."""
    scores = [score_scenes(matcher, [s], mel_cfg)[s.scene_id] for s in scenes]
    accs, kept_counts = [], []
    for t in thresholds:
        kept = [s for s, sc in zip(scenes, scores) if sc >= t]
        kept_counts.append(len(kept))
        if len(kept) < 2:
            accs.append(0.0)
            continue
        accs.append(_downstream_acc(kept, test_scenes, num_classes,
                                    clip_seconds, seed))
    return {"thresholds": list(thresholds), "downstream_acc": accs,
            "kept": kept_counts}
