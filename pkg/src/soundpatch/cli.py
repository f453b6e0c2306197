"""Command-line orchestration of the full workflow.

Every subcommand takes --config/--seed/--set overrides plus an --out run
directory, writes the resolved config snapshot there, and exits nonzero on
any assertion or bound failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig


class DependencyError(RuntimeError):
    pass


def _base_parser(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=str, default=None, help="YAML config file")
    sub.add_argument("--seed", type=int, default=None, help="global seed override")
    sub.add_argument("--out", type=str, default="runs/run0", help="run directory")
    sub.add_argument("--device", type=str, default=None)
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="PATH=VALUE", help="dotted config override, repeatable")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.apply_overrides(args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "device", None):
        cfg.device = args.device
    return cfg


def _run_dir(args, cfg: RunConfig, stage: str) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / f"config-{stage}.yaml")
    return out


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing upstream artifact {path}; run `{hint}` first")
    return path


def _load_scenes(out: Path, split: str):
    from .scenes import load_split
    _require(out / f"manifest-{split}.json", "soundpatch dataset-gen")
    return load_split(out, split)


def cmd_dataset_gen(args) -> int:
    from .scenes import build_dataset, manifest_hash
    cfg = _load_config(args)
    out = _run_dir(args, cfg, "dataset")
    manifests = build_dataset(cfg.data, cfg.data.n_train, cfg.data.n_test,
                              out, seed=cfg.seed)
    for split in manifests:
        print(f"{split}: {len(manifests[split].scene_ids)} scenes "
              f"(manifest sha256 {manifest_hash(out, split)[:12]})")
    return 0


def cmd_train_vae(args) -> int:
    from .pipeline import Pipeline, train_vae_stage
    cfg = _load_config(args)
    out = _run_dir(args, cfg, "vae")
    scenes = _load_scenes(out, "train")
    pipe = Pipeline(cfg)
    log = train_vae_stage(pipe, scenes)
    pipe.save(out / "vae.ckpt", stage="vae")
    (out / "vae-train-log.json").write_text(json.dumps(log, indent=1))
    print(f"vae: recon {log[0]['recon']:.4f} -> {log[-1]['recon']:.4f}; "
          f"saved {out / 'vae.ckpt'}")
    return 0


def cmd_train_encoders(args) -> int:
    from .pipeline import Pipeline, train_encoders_stage
    cfg = _load_config(args)
    out = _run_dir(args, cfg, "encoders")
    scenes = _load_scenes(out, "train")
    ckpt = _require(out / "vae.ckpt", "soundpatch train-vae")
    pipe = Pipeline.load_stage(ckpt, "vae")
    log = train_encoders_stage(pipe, scenes)
    pipe.save(out / "encoders.ckpt", stage="encoders")
    (out / "encoders-train-log.json").write_text(json.dumps(log, indent=1))
    print(f"encoders: excess {log[0]['excess']:.4f} -> {log[-1]['excess']:.4f}; "
          f"saved {out / 'encoders.ckpt'}")
    return 0


def cmd_train_diffusion(args) -> int:
    from .pipeline import Pipeline, train_diffusion_stage
    cfg = _load_config(args)
    out = _run_dir(args, cfg, "diffusion")
    scenes = _load_scenes(out, "train")
    ckpt = _require(out / "encoders.ckpt", "soundpatch train-encoders")
    pipe = Pipeline.load_stage(ckpt, "encoders")
    pipe.config = cfg
    t0 = time.time()
    log = train_diffusion_stage(pipe, scenes)
    pipe.save(out / "model.ckpt", stage="full")
    (out / "diffusion-train-log.json").write_text(json.dumps(log, indent=1))
    print(f"diffusion: {cfg.diffusion.train_steps} steps in {time.time() - t0:.0f}s, "
          f"final loss {log[-1]['loss']:.1f}; saved {out / 'model.ckpt'}")
    return 0


def cmd_sample(args) -> int:
    from .dsp import write_wav
    from .pipeline import Pipeline
    cfg = _load_config(args)
    out = _run_dir(args, cfg, "sample")
    ckpt = _require(Path(args.checkpoint or out / "model.ckpt"),
                    "soundpatch train-diffusion")
    pipe = Pipeline.load_stage(ckpt, "full")
    scenes = _load_scenes(out, "test")
    scene = next((s for s in scenes if s.scene_id == args.scene), scenes[0])
    object_ids = ([int(x) for x in args.objects.split(",")]
                  if args.objects else list(range(len(scene.objects))))
    res = pipe.generate(scene, mode=args.mode, object_ids=object_ids,
                        guidance=args.guidance, seed=cfg.seed)
    wav_path = out / f"sample-{scene.scene_id}-{args.mode}.wav"
    write_wav(wav_path, res.waveform)
    (out / f"sample-{scene.scene_id}-{args.mode}.json").write_text(json.dumps({
        "scene_id": scene.scene_id, "mode": args.mode, "objects": object_ids,
        "map_kind": res.map_used.kind, "map": res.map_used.weights.tolist(),
    }, indent=1))
    print(f"wrote {wav_path}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluate import (eval_multi_object, eval_single_object,
                           measure_trained_pipeline, visualize_attention)
    from .oracle import CrossCheckedOracle
    cfg = _load_config(args)
    out = _run_dir(args, cfg, "evaluate")
    from .pipeline import Pipeline
    ckpt = _require(Path(args.checkpoint or out / "model.ckpt"),
                    "soundpatch train-diffusion")
    pipe = Pipeline.load_stage(ckpt, "full")
    test = _load_scenes(out, "test")
    oracle = CrossCheckedOracle(cfg.data.num_classes, cfg.mel, seed=cfg.seed)
    budget = measure_trained_pipeline(pipe, test)
    r_mask = eval_single_object(pipe, test, mode="mask", seed=cfg.seed,
                                max_queries=args.max_queries)
    r_attn = eval_single_object(pipe, test, mode="attention", seed=cfg.seed,
                                max_queries=args.max_queries)
    multi = eval_multi_object(pipe, test, seed=cfg.seed)
    vis = visualize_attention(pipe, test[0], out / "plots")
    report = {
        "oracle_agreement": oracle.agreement,
        "acc_mask": r_mask.acc_analog,
        "acc_attention": r_attn.acc_analog,
        "attention_mask_gap": abs(r_mask.acc_analog - r_attn.acc_analog),
        "multi_object": multi,
        "budget": budget.to_dict(),
        "visualization": vis,
    }
    (out / "eval-report.json").write_text(json.dumps(report, indent=1))
    _print_markdown_summary(out / "eval-summary.md", report)
    print(json.dumps(report, indent=1))
    if not budget.lemma_holds:
        print("FAIL: attention-vs-mask error exceeded the contrastive budget",
              file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    from .evaluate import ABLATIONS, ablation_config, run_ablation
    from .pipeline import Pipeline, train_diffusion_stage
    cfg = _load_config(args)
    out = _run_dir(args, cfg, f"ablate-{args.name}")
    main_ckpt = _require(Path(args.checkpoint or out / "model.ckpt"),
                         "soundpatch train-diffusion")
    main_pipe = Pipeline.load_stage(main_ckpt, "full")
    test = _load_scenes(out, "test")
    variant_pipe = None
    if args.name != "attn_at_test":
        vcfg = ablation_config(cfg, args.name)
        variant_ckpt = out / f"model-{args.name}.ckpt"
        if variant_ckpt.exists() and not args.retrain:
            variant_pipe = Pipeline.load_stage(variant_ckpt, "full")
        else:
            enc = _require(out / "encoders.ckpt", "soundpatch train-encoders")
            variant_pipe = Pipeline.load_stage(enc, "encoders")
            variant_pipe.config = vcfg
            variant_pipe.grounding = _rebuild_grounding(variant_pipe, vcfg)
            train_scenes = _load_scenes(out, "train")
            train_diffusion_stage(variant_pipe, train_scenes)
            variant_pipe.save(variant_ckpt, stage="full")
    report = run_ablation(args.name, main_pipe, variant_pipe, test, seed=cfg.seed,
                          max_queries=args.max_queries)
    (out / f"ablation-{args.name}.json").write_text(json.dumps(report.to_dict(), indent=1))
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def _rebuild_grounding(pipe, cfg):
    """Variant grounding modules differ structurally; rebuild and keep the
    trained projections where shapes still match."""
    import torch
    from .grounding import GroundingModel
    new = GroundingModel(cfg.encoder, cfg.data.n_patches,
                         variant=cfg.diffusion.attention_variant,
                         n_heads=cfg.diffusion.n_heads,
                         use_positional_encoding=cfg.diffusion.use_positional_encoding)
    old_state = pipe.grounding.state_dict()
    state = new.state_dict()
    for k in state:
        if k in old_state and old_state[k].shape == state[k].shape:
            state[k] = old_state[k]
    new.load_state_dict(state)
    return new


def cmd_verify_theory(args) -> int:
    from .theory import random_instance_batch, verify_bound, write_report
    cfg = _load_config(args)
    out = _run_dir(args, cfg, "theory")
    instances = random_instance_batch(args.instances, seed=cfg.seed)
    report = verify_bound(instances)
    if args.corrupt:
        # negative-path self test: undersize a stored Lipschitz constant and
        # show that the harness notices
        bad = instances[0]
        bad.l_f = bad.l_f * 1e-4
        bad.l_v = bad.l_v * 1e-4
        report = verify_bound(instances)
    write_report(report, out)
    print(report.table())
    if not report.ok:
        print("BOUND VIOLATION", file=sys.stderr)
        return 1
    return 0


def cmd_match_filter(args) -> int:
    from .avmatch import (AVMatcher, filter_corpus, matcher_accuracy,
                          score_histogram, score_scenes, train_matcher)
    from .scenes import load_manifest
    cfg = _load_config(args)
    out = _run_dir(args, cfg, "match")
    scenes = _load_scenes(out, "train")
    matcher = AVMatcher(cfg.matcher, cfg.data, cfg.mel)
    import torch
    torch.manual_seed(cfg.seed)
    train_matcher(matcher, scenes, cfg.mel, cfg.matcher, seed=cfg.seed)
    test = _load_scenes(out, "test")
    acc = matcher_accuracy(matcher, test, cfg.mel, seed=cfg.seed)
    scores = score_scenes(matcher, scenes, cfg.mel)
    manifest = load_manifest(out, "train")
    filtered = filter_corpus(manifest, scores, args.threshold)
    (out / "manifest-train-filtered.json").write_text(
        json.dumps(filtered.to_dict(), indent=1))
    (out / "match-scores.json").write_text(json.dumps(scores, indent=1))
    hist = score_histogram(scores, out / "match-histogram.png")
    (out / "match-report.json").write_text(json.dumps({
        "matched_acc": acc["matched_acc"], "mismatched_acc": acc["mismatched_acc"],
        "threshold": args.threshold, "kept": len(filtered.scene_ids),
        "total": len(manifest.scene_ids), "histogram": hist}, indent=1))
    print(f"matcher: matched {acc['matched_acc']:.2f} mismatched "
          f"{acc['mismatched_acc']:.2f}; kept {len(filtered.scene_ids)}"
          f"/{len(manifest.scene_ids)} at threshold {args.threshold}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    cfg = _load_config(args)
    ckpt = _require(Path(args.checkpoint), "soundpatch train-diffusion")
    app = create_app(checkpoint_path=ckpt, dataset_dir=Path(args.dataset))
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="soundpatch",
        description="object-aware image-to-audio generation, desk scale")
    subs = parser.add_subparsers(dest="command", required=True)

    specs = {
        "dataset-gen": (cmd_dataset_gen, "generate the synthetic corpus"),
        "train-vae": (cmd_train_vae, "train the spectrogram VAE"),
        "train-encoders": (cmd_train_encoders, "contrastive-train the encoders"),
        "train-diffusion": (cmd_train_diffusion, "train the latent diffusion model"),
        "sample": (cmd_sample, "generate audio for one scene"),
        "evaluate": (cmd_evaluate, "run the evaluation metrics"),
        "ablate": (cmd_ablate, "train + evaluate an ablation variant"),
        "verify-theory": (cmd_verify_theory, "check the error bound numerically"),
        "match-filter": (cmd_match_filter, "train the AV matcher and filter the corpus"),
        "serve": (cmd_serve, "serve the HTTP generation API"),
    }
    for name, (fn, help_text) in specs.items():
        sub = subs.add_parser(name, help=help_text)
        _base_parser(sub)
        sub.set_defaults(fn=fn)
        if name == "sample":
            sub.add_argument("--checkpoint", type=str, default=None)
            sub.add_argument("--scene", type=str, default=None)
            sub.add_argument("--mode", choices=("attention", "mask"), default="mask")
            sub.add_argument("--objects", type=str, default=None,
                             help="comma-separated object indices")
            sub.add_argument("--guidance", type=float, default=None)
        elif name == "evaluate":
            sub.add_argument("--checkpoint", type=str, default=None)
            sub.add_argument("--max-queries", type=int, default=None)
        elif name == "ablate":
            sub.add_argument("name", choices=("frozen_diffusion", "multihead",
                                              "additive", "attn_at_test",
                                              "mask_training",
                                              "no_positional_encoding"))
            sub.add_argument("--checkpoint", type=str, default=None)
            sub.add_argument("--max-queries", type=int, default=None)
            sub.add_argument("--retrain", action="store_true")
        elif name == "verify-theory":
            sub.add_argument("--instances", type=int, default=100)
            sub.add_argument("--corrupt", action="store_true",
                             help="self-test: corrupt a constant and expect failure")
        elif name == "match-filter":
            sub.add_argument("--threshold", type=float, default=0.6)
        elif name == "serve":
            sub.add_argument("--checkpoint", type=str, required=True)
            sub.add_argument("--dataset", type=str, required=True)
            sub.add_argument("--host", type=str, default="127.0.0.1")
            sub.add_argument("--port", type=int, default=817)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _print_markdown_summary(path: Path, report: dict) -> None:
    lines = ["# Evaluation summary", ""]
    lines.append(f"- oracle agreement: {report['oracle_agreement']:.3f}")
    lines.append(f"- acc (mask conditioning): {report['acc_mask']:.3f}")
    lines.append(f"- acc (attention conditioning): {report['acc_attention']:.3f}")
    lines.append(f"- attention-vs-mask gap: {report['attention_mask_gap']:.3f}")
    lines.append(f"- multi-object top-2 rate: "
                 f"{report['multi_object']['top2_match_rate']:.3f}")
    b = report["budget"]
    lines.append(f"- eps_contrast {b['eps_contrast']:.4f}, eps_sam {b['eps_sam']:.4f}, "
                 f"mean |u-p|_1 {b['mean_l1_attention']:.4f}, "
                 f"lemma holds: {b['lemma_holds']}")
    path.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    sys.exit(main())
