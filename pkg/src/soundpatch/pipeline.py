"""End-to-end pipeline: owns the model bundle (VAE, encoders, grounding,
denoiser), the three training stages, conditioning assembly, and generation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import diffusion as diff
from .checkpoint import (Checkpoint, CheckpointError, load_checkpoint,
                         load_module, module_arrays, save_checkpoint)
from .config import RunConfig
from .dsp import MelSpec, mel_to_wav, wav_to_mel
from .encoders import (PatchEncoder, TextEncoder, Vocabulary, image_to_tensor,
                       pad_token_batch)
from .grounding import AttentionMap, GroundingModel, combine_masks, rescale_mask
from .scenes import Scene
from .vae import SpectrogramVAE, denormalize_mel, fit_latent_scale, normalize_mel, pad_frames


class UnknownObjectError(KeyError):
    pass


@dataclass
class GenerationResult:
    waveform: np.ndarray
    map_used: AttentionMap
    mel: MelSpec
    latent: np.ndarray           # T' x F' x d


class Pipeline:
    def __init__(self, config: RunConfig):
        self.config = config
        torch.manual_seed(config.seed)
        self.vocab = Vocabulary(config.data.num_classes)
        self.vae = SpectrogramVAE(config.vae, n_mels=config.mel.n_mels)
        self.text_enc = TextEncoder(len(self.vocab), config.encoder)
        self.patch_enc = PatchEncoder(config.encoder, config.data)
        self.grounding = GroundingModel(
            config.encoder, config.data.n_patches,
            variant=config.diffusion.attention_variant,
            n_heads=config.diffusion.n_heads,
            use_positional_encoding=config.diffusion.use_positional_encoding)
        self.denoiser = diff.Denoiser(
            latent_channels=config.vae.latent_channels,
            base_width=config.diffusion.base_width,
            cond_dim=config.encoder.cond_dim,
            ctx_dim=config.encoder.d_v)
        self.schedule = diff.NoiseSchedule.linear(
            config.diffusion.n_steps, config.diffusion.beta_start,
            config.diffusion.beta_end)
        self.stats: dict = {"attn_std_mean": None, "stage_seeds": {}}
        self.stage = "init"

    # -- persistence --------------------------------------------------------

    _MODULES = ("vae", "text_enc", "patch_enc", "grounding", "denoiser")

    def save(self, path, stage: str) -> None:
        arrays = {}
        for name in self._MODULES:
            arrays.update(module_arrays(name, getattr(self, name)))
        save_checkpoint(path, Checkpoint(config=self.config, stage=stage,
                                         arrays=arrays, stats=self.stats))
        self.stage = stage

    @classmethod
    def load(cls, path) -> "Pipeline":
        ckpt = load_checkpoint(path)
        pipe = cls(ckpt.config)
        for name in cls._MODULES:
            load_module(getattr(pipe, name), ckpt, name)
        pipe.stats = dict(ckpt.stats)
        pipe.stage = ckpt.stage
        for m in cls._MODULES:
            getattr(pipe, m).eval()
        return pipe

    @classmethod
    def load_stage(cls, path, stage: str) -> "Pipeline":
        ckpt = load_checkpoint(path)
        ckpt.require_stage(stage)
        return cls.load(path)

    # -- mel / latent plumbing ----------------------------------------------

    def mel_frames(self) -> int:
        from .dsp import expected_frames
        return expected_frames(self.config.data.clip_samples, self.config.mel)

    def mel_to_tensor(self, mel: MelSpec) -> torch.Tensor:
        """Normalized, T-padded (1, 1, T_pad, F) tensor."""
        t = torch.from_numpy(np.asarray(mel.values, dtype=np.float32))
        x = normalize_mel(self.vae, t)
        t_pad = pad_frames(x.shape[0])
        floor = float(normalize_mel(
            self.vae, torch.tensor(math.log(self.config.mel.eps_floor))))
        out = torch.full((t_pad, x.shape[1]), floor)
        out[: x.shape[0]] = x
        return out.unsqueeze(0).unsqueeze(0)

    def tensor_to_mel(self, x: torch.Tensor) -> MelSpec:
        t_frames = self.mel_frames()
        values = denormalize_mel(self.vae, x)[0, 0, :t_frames].detach().numpy()
        return MelSpec(values=np.asarray(values, dtype=np.float64),
                       n_samples=self.config.data.clip_samples)

    @torch.no_grad()
    def encode_latent(self, scene: Scene, sample: bool = False,
                      generator: torch.Generator | None = None) -> torch.Tensor:
        """Scene audio -> scaled latent (1, d, T', F')."""
        mel = wav_to_mel(scene.audio_ref, self.config.mel)
        x = self.mel_to_tensor(mel)
        mean, logvar = self.vae.encode(x)
        z = self.vae.sample(mean, logvar, generator) if sample else mean
        return z / self.vae.latent_scale

    @torch.no_grad()
    def decode_latent(self, z: torch.Tensor) -> MelSpec:
        return self.tensor_to_mel(self.vae.decode(z * self.vae.latent_scale))

    # -- conditioning --------------------------------------------------------

    def caption_tokens(self, caption: list[str]) -> list[int]:
        return self.vocab.encode(sorted(caption))

    def scene_queries(self, scene: Scene) -> list[dict]:
        """One grounding query per object: single-class caption vs its mask."""
        image = image_to_tensor(scene.image)
        return [{"tokens": [obj.class_id], "image": image,
                 "p": scene.masks[i], "class_id": obj.class_id,
                 "scene_id": scene.scene_id, "object_index": i}
                for i, obj in enumerate(scene.objects)]

    def project_scene(self, images: torch.Tensor, token_lists: list[list[int]]):
        ids, mask = pad_token_batch(token_lists)
        e_t = self.text_enc(ids, mask)
        e_v = self.patch_enc(images)
        return self.grounding.project(e_t, e_v)

    def attention_for(self, scene: Scene, tokens: list[int] | None = None) -> AttentionMap:
        with torch.no_grad():
            tokens = self.caption_tokens(scene.caption) if tokens is None else tokens
            q, k, _ = self.project_scene(image_to_tensor(scene.image).unsqueeze(0), [tokens])
            w = self.grounding.attention_weights(q, k)[0].numpy()
        return AttentionMap(w, "softmax_attention")

    def mask_for_selection(self, scene: Scene, object_ids: list[int]) -> np.ndarray:
        if not object_ids:
            raise ValueError("no object selected")
        for oid in object_ids:
            if not 0 <= oid < len(scene.objects):
                raise UnknownObjectError(f"unknown object {oid} in scene {scene.scene_id}")
        masks = scene.masks[object_ids]
        extents = np.array([scene.objects[i].extent for i in object_ids], dtype=np.float64)
        return combine_masks(masks, extents)

    def reference_map(self, scene: Scene, caption_override: list[str] | None = None
                      ) -> AttentionMap:
        """Reference moments for mask rescaling: the attention computed with
        the scene's full caption, or stored aggregate moments when the caption
        is explicitly suppressed."""
        if caption_override is not None and len(caption_override) == 0:
            p = self.config.data.n_patches
            std = self.stats.get("attn_std_mean") or 0.0
            rng = np.random.default_rng(0)
            base = np.full(p, 1.0 / p)
            if std > 0:
                jitter = rng.standard_normal(p)
                jitter = (jitter - jitter.mean()) / max(jitter.std(), 1e-9)
                base = base + std * jitter
            return AttentionMap(base, "softmax_attention")
        caption = caption_override if caption_override else scene.caption
        return self.attention_for(scene, self.caption_tokens(caption))

    def condition_bundle(self, scene: Scene, weights: np.ndarray
                         ) -> tuple[torch.Tensor, torch.Tensor]:
        """Conditioning map -> (cond vector (1, C), gated value tokens (1, P, d_v))."""
        with torch.no_grad():
            e_v = self.patch_enc(image_to_tensor(scene.image).unsqueeze(0))
            v = self.grounding.w_v(e_v)
            if self.grounding.use_positional_encoding:
                v = v + self.grounding.pos_v
            w = torch.from_numpy(np.asarray(weights, dtype=np.float32)).unsqueeze(0)
            cond = self.grounding.fuse(w, v)
            ctx = self.config.data.n_patches * w.unsqueeze(-1) * v
        return cond, ctx

    # -- generation -----------------------------------------------------------

    def conditioning_map(self, scene: Scene, mode: str,
                         object_ids: list[int] | None = None,
                         patch_vector: np.ndarray | None = None,
                         caption_override: list[str] | None = None) -> AttentionMap:
        if mode == "attention":
            caption = caption_override if caption_override else scene.caption
            return self.attention_for(scene, self.caption_tokens(caption))
        if mode == "mask":
            if patch_vector is not None:
                raw = np.asarray(patch_vector, dtype=np.float64)
                if raw.shape != (self.config.data.n_patches,):
                    raise ValueError(
                        f"patch vector must have length {self.config.data.n_patches}")
                if np.any(raw < 0):
                    raise ValueError("patch vector must be non-negative")
                if raw.sum() <= 0:
                    raise ValueError("no object selected")
                raw = raw / raw.sum()
            else:
                raw = self.mask_for_selection(scene, object_ids or [])
            ref = self.reference_map(scene, caption_override)
            return rescale_mask(raw, ref)
        raise ValueError(f"unknown mode {mode!r}")

    def generate(self, scene: Scene, mode: str = "mask",
                 object_ids: list[int] | None = None,
                 patch_vector: np.ndarray | None = None,
                 caption_override: list[str] | None = None,
                 guidance: float | None = None, seed: int = 0,
                 steps: int | None = None, gl_iters: int | None = None
                 ) -> GenerationResult:
        """Full image-to-audio path for one scene and one selection."""
        cfg = self.config.diffusion
        amap = self.conditioning_map(scene, mode, object_ids, patch_vector,
                                     caption_override)
        cond, ctx = self.condition_bundle(scene, amap.weights)
        shape = (1, self.config.vae.latent_channels,
                 pad_frames(self.mel_frames()) // self.config.vae.downsample,
                 self.config.mel.n_mels // self.config.vae.downsample)
        z = diff.ddim_sample(self.denoiser, self.schedule, shape, cond, ctx,
                             steps=steps or cfg.ddim_steps,
                             guidance=cfg.guidance if guidance is None else guidance,
                             seed=seed)
        mel = self.decode_latent(z)
        wav = mel_to_wav(mel, n_iters=gl_iters, cfg=self.config.mel)
        peak = float(np.max(np.abs(wav))) if len(wav) else 0.0
        if peak > 0.99:
            wav = wav * (0.99 / peak)
        return GenerationResult(waveform=wav, map_used=amap, mel=mel,
                                latent=z[0].permute(1, 2, 0).numpy())

    @torch.no_grad()
    def generate_batch(self, scenes: list[Scene], maps: list[AttentionMap],
                       guidance: float, seeds: list[int],
                       steps: int | None = None, gl_iters: int | None = None
                       ) -> list[GenerationResult]:
        """Batched DDIM for evaluation; each item keeps its own noise seed."""
        cfg = self.config.diffusion
        conds, ctxs, noises = [], [], []
        shape = (self.config.vae.latent_channels,
                 pad_frames(self.mel_frames()) // self.config.vae.downsample,
                 self.config.mel.n_mels // self.config.vae.downsample)
        for scene, amap, seed in zip(scenes, maps, seeds):
            cond, ctx = self.condition_bundle(scene, amap.weights)
            conds.append(cond[0])
            ctxs.append(ctx[0])
            gen = torch.Generator().manual_seed(seed)
            noises.append(torch.randn(shape, generator=gen))
        z = diff.ddim_from(torch.stack(noises), self.denoiser, self.schedule,
                           torch.stack(conds), torch.stack(ctxs),
                           steps=steps or cfg.ddim_steps, guidance=guidance)
        out = []
        for i, (scene, amap) in enumerate(zip(scenes, maps)):
            mel = self.decode_latent(z[i: i + 1])
            wav = mel_to_wav(mel, n_iters=gl_iters, cfg=self.config.mel)
            peak = float(np.max(np.abs(wav)))
            if peak > 0.99:
                wav = wav * (0.99 / peak)
            out.append(GenerationResult(wav, amap, mel, z[i].permute(1, 2, 0).numpy()))
        return out


# ---------------------------------------------------------------------------
# training stages

def train_vae_stage(pipe: Pipeline, scenes: list[Scene],
                    epochs: int | None = None) -> list[dict]:
    from .vae import vae_train
    cfg = pipe.config
    mels = [wav_to_mel(s.audio_ref, cfg.mel).values for s in scenes]
    stack = np.stack(mels).astype(np.float32)
    pipe.vae.mel_mean.fill_(float(stack.mean()))
    pipe.vae.mel_std.fill_(float(stack.std() + 1e-6))
    tensors = torch.stack([pipe.mel_to_tensor(MelSpec(m, cfg.data.clip_samples))[0]
                           for m in mels])
    seed = cfg.seed * 1000 + 1
    pipe.stats["stage_seeds"]["vae"] = seed
    log = vae_train(pipe.vae, tensors, epochs or cfg.vae.epochs, seed=seed)
    fit_latent_scale(pipe.vae, tensors)
    pipe.vae.eval()
    pipe.stats["vae_final_recon"] = log[-1]["recon"]
    return log


def train_encoders_stage(pipe: Pipeline, scenes: list[Scene],
                         epochs: int | None = None) -> list[dict]:
    from .encoders import contrastive_train
    queries = [q for s in scenes for q in pipe.scene_queries(s)]
    seed = pipe.config.seed * 1000 + 2
    pipe.stats["stage_seeds"]["encoders"] = seed
    log = contrastive_train(pipe.text_enc, pipe.patch_enc, pipe.grounding,
                            queries, pipe.config.encoder, epochs=epochs, seed=seed)
    pipe.stats["encoder_final_excess"] = log[-1]["excess"]
    return log


def train_diffusion_stage(pipe: Pipeline, scenes: list[Scene],
                          train_steps: int | None = None,
                          log_every: int = 200) -> list[dict]:
    cfg = pipe.config.diffusion
    n_train = len(scenes)
    seed = pipe.config.seed * 1000 + 3
    pipe.stats["stage_seeds"]["diffusion"] = seed
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    z0_all = torch.cat([pipe.encode_latent(s) for s in scenes]).float()
    images = torch.stack([image_to_tensor(s.image) for s in scenes])
    tokens = [pipe.caption_tokens(s.caption) for s in scenes]
    union_masks = torch.stack([
        torch.from_numpy(combine_masks(
            s.masks, np.array([o.extent for o in s.objects], dtype=np.float64))).float()
        for s in scenes])

    params = (list(pipe.grounding.parameters()) + list(pipe.text_enc.parameters())
              + list(pipe.patch_enc.parameters()))
    if cfg.freeze_denoiser:
        for p in pipe.denoiser.parameters():
            p.requires_grad_(False)
        params += [pipe.denoiser.null_cond, pipe.denoiser.null_ctx]
        pipe.denoiser.null_cond.requires_grad_(True)
        pipe.denoiser.null_ctx.requires_grad_(True)
    else:
        params += list(pipe.denoiser.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr,
                            betas=(cfg.adam_beta1, cfg.adam_beta2),
                            eps=cfg.adam_eps, weight_decay=cfg.weight_decay)

    n_patches = pipe.config.data.n_patches
    steps = train_steps or cfg.train_steps
    log = []
    running = 0.0
    for step in range(steps):
        idx = rng.integers(0, n_train, cfg.batch_size)
        idx_t = torch.from_numpy(idx)
        z0 = z0_all[idx_t]
        ns = rng.integers(1, pipe.schedule.n_steps + 1, cfg.batch_size)
        xi = torch.randn(z0.shape)

        q, k, v = pipe.project_scene(images[idx_t], [tokens[i] for i in idx])
        attn = pipe.grounding.attention_weights(q, k)
        if cfg.train_condition == "mask":
            mu = attn.mean(dim=1, keepdim=True).detach()
            sd = attn.std(dim=1, unbiased=False, keepdim=True).detach()
            m = union_masks[idx_t]
            m_sd = m.std(dim=1, unbiased=False, keepdim=True).clamp_min(1e-9)
            weights = mu + (sd / m_sd) * (m - m.mean(dim=1, keepdim=True))
        else:
            weights = attn
        cond = pipe.grounding.fuse(weights, v, q, k)
        ctx = n_patches * weights.unsqueeze(-1) * v

        drop = torch.from_numpy(rng.random(cfg.batch_size) < cfg.drop_prob)
        if drop.any():
            null_cond, null_ctx = pipe.denoiser.null_condition(int(drop.sum()))
            cond = cond.clone()
            ctx = ctx.clone()
            cond[drop] = null_cond
            ctx[drop] = null_ctx.expand(-1, n_patches, -1)

        loss = diff.noise_prediction_loss(pipe.denoiser, pipe.schedule, z0,
                                          cond, ctx, ns, xi)
        if not torch.isfinite(loss):
            raise RuntimeError(f"diffusion training diverged at step {step}: loss={loss}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        running += loss.item()
        if (step + 1) % log_every == 0:
            log.append({"step": step + 1, "loss": running / log_every})
            running = 0.0

    with torch.no_grad():
        stds = []
        for start in range(0, n_train, 64):
            sl = slice(start, start + 64)
            q, k, _ = pipe.project_scene(images[sl], tokens[start:start + 64])
            stds.append(pipe.grounding.attention_weights(q, k).std(dim=1, unbiased=False))
        pipe.stats["attn_std_mean"] = float(torch.cat(stds).mean())
    for m in Pipeline._MODULES:
        getattr(pipe, m).eval()
    return log
