import os, time, numpy as np, torch
from soundpatch.config import RunConfig
from soundpatch.scenes import generate_scene
from soundpatch.pipeline import Pipeline, train_vae_stage, train_encoders_stage, train_diffusion_stage
from soundpatch.oracle import oracle_classify
from soundpatch.dsp import wav_to_mel, mel_to_wav
from soundpatch import diffusion as diff

torch.set_num_threads(2)
cfg = RunConfig()
cfg.data.n_train = 96
train = [generate_scene(1000+i, cfg.data, scene_id=f"train-{i:05d}") for i in range(96)]
test  = [generate_scene(900000+i, cfg.data, scene_id=f"test-{i:05d}") for i in range(24)]

ck = "tmp/diag.ckpt"
if os.path.exists(ck):
    pipe = Pipeline.load(ck)
    print("loaded cached", flush=True)
else:
    pipe = Pipeline(cfg)
    train_vae_stage(pipe, train, epochs=50)
    train_encoders_stage(pipe, train, epochs=25)
    t0=time.time()
    dlog = train_diffusion_stage(pipe, train, train_steps=1500, log_every=250)
    print("diff loss", [round(l['loss'],1) for l in dlog], f"{time.time()-t0:.0f}s", flush=True)
    pipe.save(ck, stage="full")

# 1. VAE roundtrip acc on test references
items = []
for s in test:
    z = pipe.encode_latent(s)
    mel = pipe.decode_latent(z)
    wav = mel_to_wav(mel, n_iters=16, cfg=cfg.mel)
    probs = oracle_classify(wav, 4)
    targets = [o.class_id for o in s.objects]
    items.append(probs[targets].sum())
print("VAE-roundtrip target mass:", round(float(np.mean(items)),3), flush=True)

# 2. latent stats
z0s = torch.cat([pipe.encode_latent(s) for s in train[:32]])
print("z0 mean/std:", z0s.mean().item(), z0s.std().item(), flush=True)

# 3. conditional generation on TRAIN scenes (in-distribution check)
for lam in (0.0, 1.0, 2.0):
    masses = []
    zmags = []
    for s in train[:8]:
        amap = pipe.attention_for(s)
        cond, ctx = pipe.condition_bundle(s, amap.weights)
        shape = (1, 8, 26, 16)
        z = diff.ddim_sample(pipe.denoiser, pipe.schedule, shape, cond, ctx, steps=100, guidance=lam, seed=7)
        zmags.append(z.std().item())
        mel = pipe.decode_latent(z)
        wav = mel_to_wav(mel, n_iters=16, cfg=cfg.mel)
        probs = oracle_classify(wav, 4)
        targets = [o.class_id for o in s.objects]
        masses.append(probs[targets].sum())
    print(f"lam={lam}: train-scene target mass {np.mean(masses):.3f}, z std {np.mean(zmags):.2f}", flush=True)

# 4. compare a generated mel to the scene's real mel (column means)
s = train[0]
amap = pipe.attention_for(s)
cond, ctx = pipe.condition_bundle(s, amap.weights)
z = diff.ddim_sample(pipe.denoiser, pipe.schedule, (1,8,26,16), cond, ctx, steps=100, guidance=1.0, seed=3)
mel_gen = pipe.decode_latent(z).values
mel_real = wav_to_mel(s.audio_ref, cfg.mel).values
print("scene caption:", s.caption)
print("real mel col-mean top bins:", np.argsort(mel_real.mean(0))[-6:])
print("gen  mel col-mean top bins:", np.argsort(mel_gen.mean(0))[-6:])
print("gen mel range", mel_gen.min(), mel_gen.max(), "real", mel_real.min(), mel_real.max(), flush=True)
