"""Command-line surface tying the pipeline together.

Sub-commands: gen-data, train, infer, eval, gradcheck, report. Exit codes
are stable: 0 success, 1 usage/config, 2 I/O or file format, 3 numeric
abort. Setting UVGU_REFERENCE_MODE=1 forces deterministic single-threaded
execution (wall-clock fields are zeroed in logs).
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from .errors import (CheckpointError, ConfigError, ContractError, FormatError,
                     IntegrationError, NumericError, VtflowError)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


def _load_dataset(path):
    from . import world
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == world.DATASET_MAGIC:
        return world.load_dataset_binary(path)
    return world.load_dataset_jsonl(path)


def _atomic_text(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def cmd_gen_data(args):
    from . import world
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    samples = world.build_dataset(args.n, args.seed, split=args.split)
    tmp = args.out + ".tmp"
    if args.binary:
        world.save_dataset_binary(tmp, samples)
    else:
        world.save_dataset_jsonl(tmp, samples)
    os.replace(tmp, args.out)
    combos = sorted({(s.scene.color, s.scene.direction) for s in samples})
    print(f"wrote {len(samples)} samples to {args.out}")
    print(f"scene coverage: {len(combos)}/12 (color, direction) pairs")
    return EXIT_OK


def cmd_train(args):
    from .config import load_run_config
    from .model import ModelConfig, init_fresh, init_from_video_checkpoint, load_model, save_model
    from .prng import SplitMix64
    from .train import TrainConfig, train_stage
    from . import checkpoint

    if args.config:
        run = load_run_config(args.config)
        model_cfg = run["model"]
        base_train = run["train"].to_dict()
        base_train.pop("stage", None)
    else:
        model_cfg = ModelConfig()
        base_train = {}
    overrides = dict(base_train)
    for key in ("steps", "seed", "lr", "batch_size", "log_every"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.dropout is not None:
        overrides["condition_dropout_p"] = args.dropout
    cfg = TrainConfig.for_stage(args.stage, **overrides)

    if args.stage == 0:
        if args.init:
            raise ConfigError("stage 0 starts fresh; --init is not accepted")
        model = init_fresh(model_cfg, SplitMix64(cfg.seed))
    else:
        if not args.init:
            raise ConfigError(f"stage {args.stage} requires --init with a "
                              f"stage-{args.stage - 1} checkpoint")
        donor, donor_stage = load_model(args.init)
        if donor_stage != args.stage - 1:
            raise ConfigError(
                f"stage {args.stage} must initialize from a stage-{args.stage - 1} "
                f"checkpoint, got stage {donor_stage}")
        if args.stage == 1:
            model = init_from_video_checkpoint(model_cfg, donor.state_arrays(),
                                               SplitMix64(cfg.seed))
        else:
            model = donor
    samples = _load_dataset(args.data)
    metrics_path = args.out + ".metrics.jsonl"
    last = {}

    def progress(rec):
        last.update(rec)
        if not args.quiet:
            print(f"step {rec['step']:6d}  loss {rec['loss_total']:.5f}  "
                  f"(v {rec['loss_v']:.5f} / t {rec['loss_t']:.5f})")

    train_stage(model, samples, cfg, metrics_path=metrics_path, progress=progress)
    save_model(args.out, model, args.stage)
    print(f"stage {args.stage} finished; checkpoint {args.out}, metrics {metrics_path}")
    return EXIT_OK


def cmd_infer(args):
    from . import world
    from .infer import InferenceConfig, canonical_tokens, generate, joint_generate, oracle_classify, understand
    from .model import load_model
    from .world import VOCAB, VideoSample, Scene

    model, _ = load_model(args.ckpt)
    cfg = InferenceConfig(steps=args.steps, mode=args.mode, seed=args.seed).validate()
    samples = _load_dataset(args.input) if args.input else None

    def caption_lines(ids):
        lines = []
        for row in canonical_tokens(ids):
            words = [VOCAB.word_of(int(t)) for t in row if t != world.PAD]
            lines.append(" ".join(words))
        return "\n".join(lines) + "\n"

    if args.mode == "understand":
        if samples is None:
            raise ConfigError("--input dataset is required for understand mode")
        frames = np.stack([s.frames for s in samples])
        cond = np.stack([s.prompt_ids for s in samples])
        ids = understand(model, frames, condition_ids=cond, cfg=cfg)
        _atomic_text(args.out + ".captions.txt", caption_lines(ids))
        print(f"wrote {len(samples)} captions to {args.out}.captions.txt")
    elif args.mode == "generate":
        if samples is None:
            raise ConfigError("--input dataset is required for generate mode")
        prompts = np.stack([s.prompt_ids for s in samples])
        frames = generate(model, prompts, cfg=cfg)
        out_samples = []
        for i, s in enumerate(samples):
            scene = oracle_classify(frames[i]) or Scene("red", "up", 1, 0, 0)
            out_samples.append(VideoSample(scene=scene,
                                           frames=np.round(frames[i]).astype(np.float32),
                                           prompt_ids=s.prompt_ids,
                                           caption_ids=np.zeros(world.MAX_CAPTION_LEN, dtype=np.int64)))
        tmp = args.out + ".tmp"
        world.save_dataset_binary(tmp, out_samples)
        os.replace(tmp, args.out)
        print(f"wrote {len(out_samples)} generated videos to {args.out}")
    else:  # joint
        batch = len(samples) if samples is not None else args.n
        frames, ids = joint_generate(model, condition_ids=None, batch=batch, cfg=cfg)
        out_samples = []
        for i in range(batch):
            scene = oracle_classify(frames[i]) or Scene("red", "up", 1, 0, 0)
            out_samples.append(VideoSample(scene=scene,
                                           frames=np.round(frames[i]).astype(np.float32),
                                           prompt_ids=np.zeros(world.MAX_PROMPT_LEN, dtype=np.int64),
                                           caption_ids=canonical_tokens(ids[i:i + 1])[0]))
        tmp = args.out + ".tmp"
        world.save_dataset_binary(tmp, out_samples)
        _atomic_text(args.out + ".captions.txt", caption_lines(ids))
        os.replace(tmp, args.out)
        print(f"wrote {batch} joint samples to {args.out} (+ captions)")
    return EXIT_OK


def cmd_eval(args):
    from .infer import InferenceConfig, evaluate
    from .model import load_model

    model, _ = load_model(args.ckpt)
    samples = _load_dataset(args.dataset)
    cfg = InferenceConfig(steps=args.steps, mode=args.mode, seed=args.seed).validate()
    report = evaluate(model, samples, args.mode, cfg=cfg)
    _atomic_text(args.out, json.dumps(report.to_dict(), indent=2) + "\n")
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_gradcheck(args):
    from .acceptance_checks import run_gradcheck_suite
    results = run_gradcheck_suite()
    worst = 0.0
    for name, err in results:
        print(f"{name:32s} max rel error {err:.3e}")
        worst = max(worst, err)
    if worst > 1e-4:
        print(f"FAIL: worst relative error {worst:.3e} exceeds 1e-4", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"OK: worst relative error {worst:.3e}")
    return EXIT_OK


def cmd_report(args):
    rows = []
    try:
        with open(args.metrics, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise FormatError(
                            f"{args.metrics}:{line_no + 1}: bad JSONL: {exc}") from exc
    except OSError as exc:
        raise FormatError(f"cannot read {args.metrics}: {exc}") from exc
    tmp = args.out + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_total", "loss_v", "loss_t"])
        for rec in rows:
            writer.writerow([rec.get("step"), rec.get("loss_total"),
                             rec.get("loss_v"), rec.get("loss_t")])
    os.replace(tmp, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="vtflow",
                                     description="Unified video+text flow matching at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=["all", "held-out", "held-out-only"], default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config")
    p.add_argument("--stage", type=int, choices=[0, 1, 2], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run one inference mode")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=["understand", "generate", "joint"], required=True)
    p.add_argument("--input", help="dataset file supplying videos/prompts")
    p.add_argument("--n", type=int, default=16, help="joint-mode sample count without --input")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="attribute-accuracy evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["understand", "generate", "joint"], required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="metrics JSONL to plot-ready CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except IntegrationError as exc:
        print(f"error: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VtflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
