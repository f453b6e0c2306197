import os, time, numpy as np, torch
from soundpatch.config import RunConfig
from soundpatch.scenes import generate_scene
from soundpatch.pipeline import Pipeline, train_vae_stage, train_encoders_stage, train_diffusion_stage
from soundpatch.evaluate import eval_single_object, eval_multi_object, measure_trained_pipeline

torch.set_num_threads(2)
cfg = RunConfig()
pipe = Pipeline(cfg)
train = [generate_scene(1000+i, cfg.data, scene_id=f"train-{i:05d}") for i in range(512)]
test  = [generate_scene(900000+i, cfg.data, scene_id=f"test-{i:05d}") for i in range(32)]

t0=time.time()
ck = "tmp/tiny.ckpt"
if os.path.exists(ck):
    pipe = Pipeline.load(ck); print("loaded cache", flush=True)
else:
    vlog = train_vae_stage(pipe, train, epochs=60)
    print(f"[{time.time()-t0:6.0f}s] vae recon {vlog[-1]['recon']:.4f}", flush=True)
    elog = train_encoders_stage(pipe, train, epochs=30)
    print(f"[{time.time()-t0:6.0f}s] enc excess {elog[-1]['excess']:.5f}", flush=True)
    dlog = train_diffusion_stage(pipe, train, train_steps=4000, log_every=500)
    print(f"[{time.time()-t0:6.0f}s] diff loss {[round(l['loss'],1) for l in dlog]}", flush=True)
    pipe.save(ck, stage="full")

budget = measure_trained_pipeline(pipe, test)
print("budget:", {k: round(v,5) if isinstance(v,float) else v for k,v in budget.to_dict().items() if k!='note'}, flush=True)
r_mask = eval_single_object(pipe, test, mode="mask", seed=1, steps=200, gl_iters=32, max_queries=48)
print(f"[{time.time()-t0:6.0f}s] heldout mask acc: {r_mask.acc_analog:.3f}", flush=True)
r_attn = eval_single_object(pipe, test, mode="attention", seed=1, steps=200, gl_iters=32, max_queries=48)
print(f"[{time.time()-t0:6.0f}s] heldout attn acc: {r_attn.acc_analog:.3f}  gap={abs(r_mask.acc_analog-r_attn.acc_analog):.3f}", flush=True)
multi = eval_multi_object(pipe, test, seed=2, steps=200, gl_iters=32)
print(f"[{time.time()-t0:6.0f}s] multi: {multi}", flush=True)
for lam in (1.0, 2.0):
    r = eval_single_object(pipe, test, mode="mask", seed=3, steps=200, gl_iters=32, guidance=lam, max_queries=32)
    print(f"[{time.time()-t0:6.0f}s] lam={lam} mask acc {r.acc_analog:.3f}", flush=True)
