import numpy as np, torch
from soundpatch.config import RunConfig
from soundpatch.scenes import generate_scene
from soundpatch.pipeline import Pipeline
from soundpatch.oracle import oracle_classify
from soundpatch.dsp import wav_to_mel, mel_to_wav
from soundpatch import diffusion as diff
from soundpatch.textures import render_texture, mix_textures

torch.set_num_threads(2)
cfg = RunConfig(); cfg.data.n_train = 96
train = [generate_scene(1000+i, cfg.data, scene_id=f"train-{i:05d}") for i in range(96)]
test  = [generate_scene(900000+i, cfg.data, scene_id=f"test-{i:05d}") for i in range(24)]
pipe = Pipeline.load("tmp/diag.ckpt")

# ddim with x0 clamp
@torch.no_grad()
def ddim_clip(z, cond, ctx, steps, lam, clip=4.0):
    plan = pipe.schedule.ddim_steps(steps)
    import math
    for i, n in enumerate(plan):
        n_next = plan[i+1] if i+1 < len(plan) else 0
        n_t = torch.full((z.shape[0],), n, dtype=torch.long)
        eps = diff.cfg_predict(pipe.denoiser, z, n_t, cond, ctx, lam)
        ab, abn = pipe.schedule.alpha_bar(n), pipe.schedule.alpha_bar(n_next)
        x0 = (z - math.sqrt(1-ab)*eps) / math.sqrt(ab)
        x0 = x0.clamp(-clip, clip)
        eps_eff = (z - math.sqrt(ab)*x0) / math.sqrt(1-ab) if n_next > 0 else eps
        z = math.sqrt(abn)*x0 + math.sqrt(1-abn)*eps_eff
    return z

for lam in (1.0, 2.0, 3.0):
    masses, zs = [], []
    for s in train[:12]:
        amap = pipe.attention_for(s)
        cond, ctx = pipe.condition_bundle(s, amap.weights)
        gen = torch.Generator().manual_seed(11)
        z = torch.randn((1,8,26,16), generator=gen)
        z = ddim_clip(z, cond, ctx, 100, lam)
        zs.append(z.std().item())
        wav = mel_to_wav(pipe.decode_latent(z), n_iters=32, cfg=cfg.mel)
        probs = oracle_classify(wav, 4)
        masses.append(probs[[o.class_id for o in s.objects]].sum())
    print(f"clip lam={lam}: train mass {np.mean(masses):.3f} z-std {np.mean(zs):.2f}", flush=True)

# per-class VAE+GL roundtrip
for cid in range(4):
    wav0 = render_texture(cid, 0.6, 1.04, seed=3)
    z = pipe.encode_latent(type("S", (), {"audio_ref": wav0})())
    wav1 = mel_to_wav(pipe.decode_latent(z), n_iters=32, cfg=cfg.mel)
    p0, p1 = oracle_classify(wav0,4), oracle_classify(wav1,4)
    print(f"class {cid}: clean prob {p0[cid]:.3f} roundtrip prob {p1[cid]:.3f}", flush=True)

# multi-class roundtrip detail
for s in test[:6]:
    z = pipe.encode_latent(s)
    wav1 = mel_to_wav(pipe.decode_latent(z), n_iters=32, cfg=cfg.mel)
    t = [o.class_id for o in s.objects]
    print(s.caption, "gains", [round(o.gain,2) for o in s.objects], "->", np.round(oracle_classify(wav1,4),3), "targets", t, flush=True)
# GL-only roundtrip (no VAE) for same scenes
print("--- GL only (no VAE) ---")
for s in test[:6]:
    mel = wav_to_mel(s.audio_ref, cfg.mel)
    wav1 = mel_to_wav(mel, n_iters=32, cfg=cfg.mel)
    print(s.caption, np.round(oracle_classify(wav1,4),3), flush=True)
