import time, numpy as np, torch
from soundpatch.config import RunConfig
from soundpatch.scenes import generate_scene
from soundpatch.pipeline import Pipeline, train_vae_stage, train_encoders_stage, train_diffusion_stage
from soundpatch.evaluate import (eval_single_object, eval_multi_object,
                                 median_correct_patch_attention, measure_trained_pipeline)

torch.set_num_threads(2)
cfg = RunConfig()
cfg.data.n_train = 96; cfg.data.n_test = 24
pipe = Pipeline(cfg)
train = [generate_scene(1000+i, cfg.data, scene_id=f"train-{i:05d}") for i in range(96)]
test  = [generate_scene(900000+i, cfg.data, scene_id=f"test-{i:05d}") for i in range(24)]

t0=time.time()
vlog = train_vae_stage(pipe, train, epochs=50)
print(f"[{time.time()-t0:6.0f}s] vae recon: first={vlog[0]['recon']:.4f} last={vlog[-1]['recon']:.4f}", flush=True)

elog = train_encoders_stage(pipe, train, epochs=25)
print(f"[{time.time()-t0:6.0f}s] encoders excess: first={elog[0]['excess']:.4f} last={elog[-1]['excess']:.4f}", flush=True)
print("median correct-patch attention:", median_correct_patch_attention(pipe, test), flush=True)

dlog = train_diffusion_stage(pipe, train, train_steps=1200, log_every=200)
print(f"[{time.time()-t0:6.0f}s] diffusion loss:", [round(l['loss'],1) for l in dlog], flush=True)

budget = measure_trained_pipeline(pipe, test)
print("pipeline budget:", budget.to_dict(), flush=True)

for steps in (50, 200):
    r_mask = eval_single_object(pipe, test, mode="mask", seed=1, steps=steps, gl_iters=16, max_queries=24)
    r_attn = eval_single_object(pipe, test, mode="attention", seed=1, steps=steps, gl_iters=16, max_queries=24)
    print(f"[{time.time()-t0:6.0f}s] steps={steps} acc mask={r_mask.acc_analog:.3f} attn={r_attn.acc_analog:.3f}", flush=True)
multi = eval_multi_object(pipe, test, seed=2, steps=200, gl_iters=16)
print(f"[{time.time()-t0:6.0f}s] multi-object:", multi, flush=True)
