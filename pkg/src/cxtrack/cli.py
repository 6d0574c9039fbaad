"""Command-line entry point: generate data, train, track, evaluate, verify.

Exit codes: 0 success, 1 validation/usage failure, 2 runtime error.
Printed metrics use repr formatting and the CSV files carry the exact same
strings, so scripts never see a rounded copy. ``CXTRACK_SEED`` overrides the
configured seed.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, DEFAULTS, load_config, save_config
from .geometry import PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, success_precision
from .pipeline import (Settings, evaluate, load_params, save_checkpoint,
                       track_boxes, train)
from .synth import (ParseError, discover_sequences, load_box_file, load_manifest,
                    load_cloud, load_sequence_dir, save_box_file,
                    write_sequence_dir)
from . import verify as V

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract here is usage -> exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _load_cfg(path):
    cfg = load_config(path) if path else dict(DEFAULTS)
    env_seed = os.environ.get("CXTRACK_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"CXTRACK_SEED must be an integer, got {env_seed!r}") from None
    return cfg


def _spec_for_sequence(cfg, index):
    from .config import scene_spec_from_config

    return scene_spec_from_config(cfg, seed=cfg["seed"] + index)


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen(args) -> int:
    cfg = _load_cfg(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .synth import generate_sequence

    for i in range(cfg["data.sequences"]):
        seq = generate_sequence(_spec_for_sequence(cfg, i))
        write_sequence_dir(out / f"seq_{i:03d}", seq)
    save_config(out / "generation_config.txt", cfg)
    print(f"wrote {cfg['data.sequences']} sequences of {cfg['data.frames']} frames to {out}")
    return 0


def _load_pairs(data_dir):
    pairs = []
    for seq_dir in discover_sequences(data_dir):
        seq = load_sequence_dir(seq_dir)
        pairs.extend(seq.frame_pairs())
    if not pairs:
        raise ValueError(f"no frame pairs found under {data_dir}")
    return pairs


def _cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    settings = Settings.from_config(cfg)
    pairs = _load_pairs(args.data)
    params, history = train(pairs, settings, log_every=args.log_every)
    save_checkpoint(args.out, params)
    print(f"trained {settings.steps} steps on {len(pairs)} pairs: "
          f"loss {_fmt(history[0])} -> {_fmt(history[-1])}")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_track(args) -> int:
    cfg = _load_cfg(args.config)
    settings = Settings.from_config(cfg)
    params = load_params(args.ckpt, settings)
    box0, cloud_paths = load_manifest(args.manifest)
    clouds = [load_cloud(p) for p in cloud_paths]
    if args.teacher_forcing:
        from .pipeline import track_sequence
        from .synth import Sequence

        gt = load_box_file(Path(args.manifest).parent / "boxes.txt")
        result = track_sequence(Sequence(clouds=clouds, boxes=gt), params, settings,
                                teacher_forcing=True)
        boxes = result.boxes
    else:
        boxes, carried = track_boxes(clouds, box0, params, settings)
        if any(carried):
            print(f"warning: {sum(carried)} empty frames carried the previous box",
                  file=sys.stderr)
    save_box_file(args.out, boxes)
    print(f"tracked {len(boxes)} frames -> {args.out}")

    gt_path = Path(args.manifest).parent / "boxes.txt"
    if gt_path.is_file():
        from .geometry import iou3d

        gt = load_box_file(gt_path)[1:]
        if len(gt) == len(boxes):
            ious = [iou3d(p, g) for p, g in zip(boxes, gt)]
            errs = [float(np.linalg.norm(p.center - g.center)) for p, g in zip(boxes, gt)]
            s, p = success_precision(ious, errs)
            print(f"Success {_fmt(s)} Precision {_fmt(p)}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args.config)
    settings = Settings.from_config(cfg)
    params = load_params(args.ckpt, settings)
    sequences = [load_sequence_dir(d) for d in discover_sequences(args.data)]
    result = evaluate(sequences, params, settings, threads=args.threads)

    for idx, frames, s, p in result.per_sequence:
        print(f"seq {idx:3d} frames {frames:4d} Success {_fmt(s)} Precision {_fmt(p)}")
    print(f"Success {_fmt(result.success)} Precision {_fmt(result.precision)}")

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("curve,threshold,fraction\n")
        for t, f in zip(SUCCESS_THRESHOLDS, result.success_curve):
            fh.write(f"success,{_fmt(t)},{_fmt(f)}\n")
        for t, f in zip(PRECISION_THRESHOLDS, result.precision_curve):
            fh.write(f"precision,{_fmt(t)},{_fmt(f)}\n")
    with open(args.metrics, "w", encoding="utf-8") as fh:
        fh.write("sequence,frames,success,precision\n")
        for idx, frames, s, p in result.per_sequence:
            fh.write(f"{idx},{frames},{_fmt(s)},{_fmt(p)}\n")
        total_frames = sum(r[1] for r in result.per_sequence)
        fh.write(f"aggregate,{total_frames},{_fmt(result.success)},{_fmt(result.precision)}\n")
    print(f"curves -> {args.out}; metrics -> {args.metrics}")
    return 0


def _cmd_gradcheck(args) -> int:
    worst_ops = V.op_gradient_suite(instances=args.instances)
    for name in sorted(worst_ops):
        print(f"{name:32s} {worst_ops[name]:.3e}")
    op_max = max(worst_ops.values())
    model_max = V.model_gradient_suite(instances=args.instances)
    print(f"worst op relative error    {op_max:.3e} (tolerance {V.OP_TOLERANCE:.0e})")
    print(f"worst model relative error {model_max:.3e} (tolerance {V.MODEL_TOLERANCE:.0e})")
    ok = op_max <= V.OP_TOLERANCE and model_max <= V.MODEL_TOLERANCE
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def _cmd_verify(args) -> int:
    checks = []

    diff = V.variant_equivalence(seeds=args.seeds)
    checks.append(("variant equivalence (vanilla vs semi, p=0)", diff <= 1e-10, f"max abs {diff:.2e}"))
    diff = V.permutation_equivariance()
    checks.append(("permutation equivariance", diff <= 1e-9, f"max abs {diff:.2e}"))
    diff = V.xrpn_global_equivalence()
    checks.append(("x-rpn r=inf vs global attention", diff <= 1e-10, f"max abs {diff:.2e}"))
    checks.append(("train determinism (bitwise)", V.determinism_check(), ""))

    s, p = success_precision([0.5] * 13, [1.0] * 13)
    checks.append(("metric grid: constant iou 0.5", abs(s - 49.504950495049506) < 1e-9, f"success {s!r}"))
    checks.append(("metric grid: constant error 1 m", abs(p - 50.495049504950494) < 1e-9, f"precision {p!r}"))
    s, p = success_precision([1.0] * 5, [0.0] * 5)
    checks.append(("metric grid: perfect oracle", s == 100.0 and p == 100.0, f"{s!r}/{p!r}"))

    from .losses import LossWeights

    rigid = LossWeights.preset("rigid")
    nonrigid = LossWeights.preset("non_rigid")
    checks.append(("loss preset rigid (0.2, 1.0, 1.5)",
                   (rigid.gamma1, rigid.gamma2, rigid.gamma3) == (0.2, 1.0, 1.5), ""))
    checks.append(("loss preset non-rigid (0.2, 10.0, 1.0)",
                   (nonrigid.gamma1, nonrigid.gamma2, nonrigid.gamma3) == (0.2, 10.0, 1.0), ""))

    ok = True
    for name, passed, detail in checks:
        ok &= passed
        tag = "PASS" if passed else "FAIL"
        print(f"[{tag}] {name}" + (f": {detail}" if detail else ""))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="cxtrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", help="config file with data.* keys (defaults otherwise)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", help="run config file")
    p.add_argument("--data", required=True, help="dataset directory from gen")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--log-every", type=int, default=0, help="print loss every N steps")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("track", help="track one sequence from a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="predicted boxes file to write")
    p.add_argument("--config", help="run config file (must match the checkpoint)")
    p.add_argument("--teacher-forcing", action="store_true",
                   help="feed ground-truth previous boxes (debugging aid)")
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="run config file (must match the checkpoint)")
    p.add_argument("--out", default="eval_curves.csv", help="plot-data CSV for both curves")
    p.add_argument("--metrics", default="eval_metrics.csv", help="per-sequence metrics CSV")
    p.add_argument("--threads", type=int, default=1, help="evaluation parallelism cap")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("verify", help="run equivalence and invariant suites")
    p.add_argument("--seeds", type=int, default=100, help="variant-equivalence seeds")
    p.set_defaults(func=_cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
