"""Command-line entry point: ``afformer <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np


def _res(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError(f"resolution {text!r} has a zero dimension")
    return h, w


def _distribution(path: str) -> np.ndarray:
    from .heatmaps import HeatmapKind, load_heatmap, softmax_normalize, sum_normalize

    hm = load_heatmap(path)
    if hm.kind == HeatmapKind.LOGITS:
        return softmax_normalize(hm.values).values
    return sum_normalize(hm.values).values


def cmd_score(args) -> int:
    from .heatmaps import load_annotation
    from .metrics import evaluate_at

    gt = _distribution(args.gt)
    pred = _distribution(args.pred)
    res = args.res or gt.shape
    if args.points:
        rep = evaluate_at(gt, pred, res, points=load_annotation(args.points), auc_mode="points")
    else:
        rep = evaluate_at(gt, pred, res, auc_mode="heatmap")
    print(json.dumps({"kld": rep.kld, "sim": rep.sim, "auc_j": rep.auc_j}))
    return 0


def cmd_gen_corpus(args) -> int:
    from .synthetic import CorpusSpec, generate_synthetic_corpus

    spec = CorpusSpec(n_samples=args.n, image_size=args.size, clip_len=args.clip_len, seed=args.seed)
    generate_synthetic_corpus(spec, args.out)
    print(Path(args.out) / "manifest.jsonl")
    return 0


def cmd_synth(args) -> int:
    from .io import load_clip
    from .maskahand import SynthParams, make_pretrain_dataset, read_detections, write_dataset

    frames = load_clip(args.frames)
    detections = read_detections(args.detections)
    params = SynthParams(hand_mask_count=args.hand_masks, random_mask_count=args.random_masks,
                         mask_scale=args.scale, distortion=args.distortion, seed=args.seed)
    samples = make_pretrain_dataset(frames, detections, params, args.count, args.clip_len, args.stride,
                                    args.threshold)
    manifest = write_dataset(args.out, samples, frames, video_id=Path(args.frames).stem)
    print(manifest)
    return 0


def _run_training(cfg, data_manifest: str, out: str, init: str | None) -> None:
    from .data import load_dataset
    from .model import load_checkpoint
    from .training import finetune_model, train

    dataset = load_dataset(data_manifest)
    model = None
    if init is not None:
        pretrained, _ = load_checkpoint(init)
        model = finetune_model(pretrained, cfg)
    result = train(cfg, dataset, out, model=model)
    print(json.dumps({"checkpoint": str(result.checkpoint), "initial_loss": result.losses[0],
                      "final_loss": result.losses[-1], "iterations": len(result.losses)}))


def cmd_train(args) -> int:
    from .config import RunConfig

    cfg = RunConfig.load(args.config)
    if cfg.mode == "finetune" and args.init is None:
        raise SystemExit("finetune mode needs --init <pretrained checkpoint>")
    _run_training(cfg, args.data, args.out, args.init)
    return 0


def cmd_pretrain(args) -> int:
    from .config import RunConfig

    cfg = replace(RunConfig.load(args.config), mode="maskahand_pretrain")
    _run_training(cfg, args.synth_manifest, args.out, None)
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluation import evaluate
    from .model import load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    result = evaluate(model, load_dataset(args.data), args.res, out_file=args.per_sample)
    print(json.dumps(result.to_record()))
    return 0


def cmd_zeroshot(args) -> int:
    from .data import load_dataset
    from .evaluation import center_bias_baseline, zero_shot_eval
    from .model import load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    result = zero_shot_eval(model, dataset, args.res, out_file=args.per_sample)
    rec = result.to_record()
    rec["center_bias_kld"] = center_bias_baseline(dataset, args.res).report.kld
    print(json.dumps(rec))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afformer")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("score", help="score one predicted heatmap against a ground-truth heatmap")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--res", type=_res)
    s.add_argument("--points", help="annotation JSON; AUC-J uses its points instead of the gt half-max region")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("gen-corpus", help="render a synthetic supervised corpus")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clip-len", type=int, default=8)
    s.add_argument("--out", default="corpus")
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("synth", help="masked-hand samples from one video and its detection sidecar")
    s.add_argument("--frames", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=float, default=1.5)
    s.add_argument("--distortion", type=float, default=0.5)
    s.add_argument("--hand-masks", type=int, default=1)
    s.add_argument("--random-masks", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1_000_000)
    s.add_argument("--clip-len", type=int, default=32)
    s.add_argument("--stride", type=int, default=16)
    s.add_argument("--threshold", type=float, default=0.99)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="supervised training or fine-tuning")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="pre-trained checkpoint to fine-tune from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("pretrain", help="masked-hand pre-training")
    s.add_argument("--config", required=True)
    s.add_argument("--synth-manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    for name, func in (("eval", cmd_eval), ("zeroshot", cmd_zeroshot)):
        s = sub.add_parser(name)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--res", type=_res)
        s.add_argument("--per-sample", help="write per-sample metrics as JSON lines")
        s.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
