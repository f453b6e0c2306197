"""Desk-scale evaluation: accuracy/KL/AVC analogs over the oracle classifier,
paired ablation runs, attention-vs-mask visualization, and the identifiable
part of the generalization-error budget on a trained pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grounding import AttentionMap, heatmap_png, rescale_mask
from .oracle import oracle_classify
from .pipeline import Pipeline
from .scenes import Scene
from .theory import PipelineBudget, pipeline_budget

ABLATIONS = ("frozen_diffusion", "multihead", "additive", "attn_at_test",
             "mask_training", "no_positional_encoding")


@dataclass
class EvalReport:
    acc_analog: float
    kl_analog: float | None = None
    avc_analog: float | None = None
    attention_mask_l1: float | None = None
    budget: dict | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"acc_analog": self.acc_analog, "kl_analog": self.kl_analog,
                "avc_analog": self.avc_analog,
                "attention_mask_l1": self.attention_mask_l1,
                "budget": self.budget, **self.extras}


def acc_analog(items: list[tuple[np.ndarray, list[int]]], num_classes: int = 4) -> float:
    """Mean probability mass the oracle puts on each clip's target label set."""
    if not items:
        raise ValueError("empty evaluation set")
    scores = []
    for waveform, targets in items:
        probs = oracle_classify(waveform, num_classes)
        scores.append(float(probs[list(targets)].sum()))
    return float(np.mean(scores))


def kl_analog(generated: list[np.ndarray], reference: list[np.ndarray],
              num_classes: int = 4) -> float:
    """Symmetric KL between the two sets' mean class-probability vectors."""
    p = np.mean([oracle_classify(w, num_classes) for w in generated], axis=0)
    q = np.mean([oracle_classify(w, num_classes) for w in reference], axis=0)
    return float(np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p)))


def avc_analog(scene: Scene, waveform: np.ndarray, num_classes: int = 4) -> float:
    """Cosine similarity between the scene's class indicator and the oracle's
    class probabilities, clipped into [0, 1]."""
    ind = scene.class_indicator(num_classes)
    probs = oracle_classify(waveform, num_classes)
    cos = float(ind @ probs / (np.linalg.norm(ind) * np.linalg.norm(probs) + 1e-12))
    return min(max(cos, 0.0), 1.0)


# ---------------------------------------------------------------------------
# trained-pipeline evaluations

def single_object_queries(scenes: list[Scene]) -> list[tuple[Scene, int]]:
    """(scene, object index) pairs covering every object of every scene."""
    return [(s, i) for s in scenes for i in range(len(s.objects))]


def eval_single_object(pipe: Pipeline, scenes: list[Scene], mode: str,
                       guidance: float | None = None, seed: int = 0,
                       steps: int | None = None, gl_iters: int = 32,
                       max_queries: int | None = None) -> EvalReport:
    """Generate one clip per (scene, object) query, conditioned either on the
    single-class caption attention or on the rescaled object mask."""
    queries = single_object_queries(scenes)
    if max_queries is not None:
        queries = queries[:max_queries]
    num_classes = pipe.config.data.num_classes
    guidance = pipe.config.diffusion.guidance if guidance is None else guidance

    maps, q_scenes = [], []
    for scene, obj_idx in queries:
        if mode == "attention":
            tokens = [scene.objects[obj_idx].class_id]
            maps.append(pipe.attention_for(scene, tokens))
        else:
            raw = scene.masks[obj_idx]
            maps.append(rescale_mask(raw, pipe.reference_map(scene)))
        q_scenes.append(scene)
    seeds = [seed * 100003 + i for i in range(len(queries))]

    results, items, avcs = [], [], []
    batch = 32
    for start in range(0, len(queries), batch):
        sl = slice(start, start + batch)
        results.extend(pipe.generate_batch(q_scenes[sl], maps[sl], guidance,
                                           seeds[sl], steps=steps, gl_iters=gl_iters))
    for (scene, obj_idx), res in zip(queries, results):
        items.append((res.waveform, [scene.objects[obj_idx].class_id]))
    acc = acc_analog(items, num_classes)
    return EvalReport(acc_analog=acc, extras={
        "mode": mode, "guidance": guidance, "n_queries": len(queries)})


def eval_multi_object(pipe: Pipeline, scenes: list[Scene], seed: int = 0,
                      steps: int | None = None, gl_iters: int = 32) -> dict:
    """Two-object selections: fraction whose oracle top-2 equals the pair."""
    pairs = []
    for s in scenes:
        if len(s.objects) >= 2:
            pairs.append((s, [0, 1]))
    if not pairs:
        raise ValueError("no multi-object scenes in the evaluation set")
    maps, q_scenes = [], []
    for scene, ids in pairs:
        raw = pipe.mask_for_selection(scene, ids)
        maps.append(rescale_mask(raw, pipe.reference_map(scene)))
        q_scenes.append(scene)
    seeds = [seed * 90001 + i for i in range(len(pairs))]
    hits = 0
    batch = 32
    results = []
    for start in range(0, len(pairs), batch):
        sl = slice(start, start + batch)
        results.extend(pipe.generate_batch(q_scenes[sl], maps[sl],
                                           pipe.config.diffusion.guidance,
                                           seeds[sl], steps=steps, gl_iters=gl_iters))
    for (scene, ids), res in zip(pairs, results):
        probs = oracle_classify(res.waveform, pipe.config.data.num_classes)
        top2 = set(np.argsort(probs)[-2:].tolist())
        want = {scene.objects[i].class_id for i in ids}
        hits += int(top2 == want)
    return {"top2_match_rate": hits / len(pairs), "n_pairs": len(pairs)}


def grounding_maps(pipe: Pipeline, scenes: list[Scene]
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(p, u, m) rows for every single-object query on the given scenes."""
    ps, us, ms = [], [], []
    for scene in scenes:
        ref = pipe.reference_map(scene)
        for i, obj in enumerate(scene.objects):
            p = scene.masks[i]
            u = pipe.attention_for(scene, [obj.class_id]).weights
            m = rescale_mask(p, ref).weights
            ps.append(p)
            us.append(u)
            ms.append(m)
    return np.stack(ps), np.stack(us), np.stack(ms)


def measure_trained_pipeline(pipe: Pipeline, scenes: list[Scene]) -> PipelineBudget:
    """The identifiable error-budget quantities on held-out scenes."""
    p, u, m = grounding_maps(pipe, scenes)
    return pipeline_budget(p, u, m)


def median_correct_patch_attention(pipe: Pipeline, scenes: list[Scene]) -> float:
    """Median attention mass on the queried object's patches."""
    masses = []
    for scene in scenes:
        for i, obj in enumerate(scene.objects):
            u = pipe.attention_for(scene, [obj.class_id]).weights
            masses.append(float(u[scene.masks[i] > 0].sum()))
    return float(np.median(masses))


def visualize_attention(pipe: Pipeline, scene: Scene, out_dir: str | Path,
                        caption: list[str] | None = None) -> dict:
    """Side-by-side heatmaps of the caption attention and the ground-truth
    mask union, both bilinear-upsampled to the image resolution."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokens = pipe.caption_tokens(caption if caption else scene.caption)
    u = pipe.attention_for(scene, tokens)
    gt = pipe.mask_for_selection(scene, list(range(len(scene.objects))))
    size = pipe.config.data.image_size
    grid = pipe.config.data.grid
    attn_path = out / f"{scene.scene_id}-attention.png"
    mask_path = out / f"{scene.scene_id}-mask.png"
    attn_path.write_bytes(heatmap_png(u.weights, grid, size))
    mask_path.write_bytes(heatmap_png(gt, grid, size))
    from .theory import kl_simplex
    record = {
        "scene_id": scene.scene_id,
        "l1_distance": float(np.abs(u.weights - gt).sum()),
        "pinsker_budget": float(np.sqrt(2 * max(kl_simplex(gt, u.weights), 0.0))),
        "attention_png": str(attn_path),
        "mask_png": str(mask_path),
        "resolution": size,
    }
    (out / f"{scene.scene_id}-attention.json").write_text(json.dumps(record, indent=1))
    return record


# ---------------------------------------------------------------------------
# ablations

def ablation_config(base_cfg, name: str):
    """Variant config sharing the base seed and data."""
    import copy
    cfg = copy.deepcopy(base_cfg)
    if name == "frozen_diffusion":
        cfg.diffusion.freeze_denoiser = True
    elif name == "multihead":
        cfg.diffusion.attention_variant = "dot_product_multihead"
    elif name == "additive":
        cfg.diffusion.attention_variant = "additive"
    elif name == "mask_training":
        cfg.diffusion.train_condition = "mask"
    elif name == "no_positional_encoding":
        cfg.diffusion.use_positional_encoding = False
    elif name == "attn_at_test":
        pass                     # same model, different test-time conditioning
    else:
        raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    return cfg


def run_ablation(name: str, main_pipe: Pipeline, variant_pipe: Pipeline | None,
                 test_scenes: list[Scene], seed: int = 0,
                 steps: int | None = None, gl_iters: int = 32,
                 max_queries: int | None = None) -> EvalReport:
    """Paired evaluation of a variant against the main model on the same
    held-out scenes and generation seeds."""
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    main_mask = eval_single_object(main_pipe, test_scenes, mode="mask", seed=seed,
                                   steps=steps, gl_iters=gl_iters,
                                   max_queries=max_queries)
    if name == "attn_at_test":
        variant = eval_single_object(main_pipe, test_scenes, mode="attention",
                                     seed=seed, steps=steps, gl_iters=gl_iters,
                                     max_queries=max_queries)
    else:
        if variant_pipe is None:
            raise ValueError(f"ablation {name!r} needs a trained variant pipeline")
        variant = eval_single_object(variant_pipe, test_scenes, mode="mask",
                                     seed=seed, steps=steps, gl_iters=gl_iters,
                                     max_queries=max_queries)
    return EvalReport(
        acc_analog=variant.acc_analog,
        extras={"ablation": name, "acc_main": main_mask.acc_analog,
                "acc_variant": variant.acc_analog,
                "gap": main_mask.acc_analog - variant.acc_analog})
