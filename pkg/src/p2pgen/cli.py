"""Command-line surface: dataset generation, training, evaluation, the
generation modes, and curve-data emission.

Exit codes: 0 ok, 1 usage error, 2 runtime failure. Every command is
deterministic given its inputs and --seed; generated artifacts carry the
seed and a config digest in a JSON sidecar. P2PGEN_OUT sets the default
output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import data, metrics, trainer
from .model import (
    load_checkpoint,
    loop_generate,
    sample_sequence,
    stitch_boundaries,
    stitch_generate,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _out_dir(path=None):
    d = path or os.environ.get("P2PGEN_OUT", ".")
    os.makedirs(d, exist_ok=True)
    return d


def _digest(payload):
    return hashlib.sha256(repr(payload).encode()).hexdigest()[:16]


def _write_sidecar(path, payload):
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _parse_vector(text):
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise _UsageError(f"bad vector {text!r}, want comma-separated floats") from None


def _parse_grid(text, cast=float):
    try:
        grid = [cast(v) for v in text.split(",")]
    except ValueError:
        raise _UsageError(f"bad grid {text!r}") from None
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise _UsageError(f"grid {text!r} must be non-empty and strictly increasing")
    return grid


def _load_frames(args, n_needed):
    """Control frames from inline vectors or the first frames of file sequences."""
    if args.points:
        pts = [_parse_vector(p) for p in args.points.split(";")]
    else:
        if not args.frames:
            raise _UsageError("need --points or --frames")
        batch = data.read_sequences(args.frames)
        idx = [int(i) for i in args.indices.split(",")] if args.indices else list(range(n_needed))
        try:
            pts = [batch.sequences[i][0] for i in idx]
        except IndexError:
            raise _UsageError(f"sequence index out of range for {args.frames}") from None
    if len(pts) < n_needed:
        raise _UsageError(f"need at least {n_needed} control frames, got {len(pts)}")
    return pts


# ---------------------------------------------------------------------------
# subcommands


def _cmd_dataset_gen(args):
    rng = data.split_rng(args.seed, args.split)
    if args.kind == "bouncing":
        cfg = data.BouncingPointConfig(
            n_points=args.n_points, speed_scale=args.speed_scale,
            length=args.length, n_sequences=args.count,
        )
        batch = data.gen_bouncing(cfg, rng)
    else:
        cfg = data.ToySkeletonConfig(
            n_joints=args.n_joints, length=args.length, n_sequences=args.count
        )
        batch = data.gen_skeleton(cfg, rng)
    out = os.path.join(_out_dir(args.out_dir), args.out)
    data.write_sequences(out, batch)
    _write_sidecar(out, {"seed": args.seed, "split": args.split,
                         "config_digest": _digest(cfg)})
    print(f"wrote {len(batch)} sequences to {out}")
    return EXIT_OK


def _cmd_train(args):
    cfg = trainer.load_run_config(args.config)
    if args.ablation:
        cfg.ablation = args.ablation
    if args.steps is not None:
        cfg.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    out_dir = _out_dir(args.out_dir)
    result = trainer.train(cfg, out_dir, log_every=args.log_every)
    _write_sidecar(result.checkpoint_path,
                   {"seed": cfg.seed, "config_digest": cfg.digest()})
    print(f"trained {result.steps_run} steps; checkpoint at {result.checkpoint_path}")
    return EXIT_OK


def _cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    batch = data.read_sequences(args.test_data)
    for seq in batch:
        if seq.shape[1] != model.frame_dim:
            raise ValueError(
                f"test data dim {seq.shape[1]} does not match checkpoint dim {model.frame_dim}"
            )
    rng = data.split_rng(args.seed, "eval")
    report = metrics.evaluate_model(
        model, batch.sequences, n_samples=args.n_samples, kind=args.kind, rng=rng
    )
    out = os.path.join(_out_dir(args.out_dir), args.out)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    with open(out + ".csv", "w", encoding="utf-8") as fh:
        fh.write(metrics.REPORT_CSV_HEADER + "\n" + report.to_csv_row() + "\n")
    print(report.to_json())
    return EXIT_OK


def _write_generated(args, frames, boundaries, extra=None):
    out = os.path.join(_out_dir(args.out_dir), args.out)
    batch = data.SequenceBatch(frames.shape[1], [frames])
    data.write_sequences(out, batch)
    sidecar = {
        "seed": args.seed,
        "config_digest": _digest((args.checkpoint, args.seed, frames.shape)),
        "timestamps": list(range(1, frames.shape[0] + 1)),
        "control_point_indices": boundaries,
    }
    if extra:
        sidecar.update(extra)
    _write_sidecar(out, sidecar)
    print(f"wrote {frames.shape[0]} frames to {out}")
    return EXIT_OK


def _cmd_generate(args):
    model = load_checkpoint(args.checkpoint)
    pts = _load_frames(args, 2)
    rng = np.random.default_rng(args.seed)
    frames = sample_sequence(model, pts[0], pts[1], args.length, rng)
    return _write_generated(args, frames, [0, args.length - 1])


def _cmd_stitch(args):
    model = load_checkpoint(args.checkpoint)
    lengths = [int(v) for v in args.lengths.split(",")]
    pts = _load_frames(args, len(lengths) + 1)
    rng = np.random.default_rng(args.seed)
    frames = stitch_generate(model, pts, lengths, rng)
    return _write_generated(args, frames, stitch_boundaries(lengths),
                            extra={"clip_lengths": lengths})


def _cmd_loop(args):
    model = load_checkpoint(args.checkpoint)
    pts = _load_frames(args, 1)
    rng = np.random.default_rng(args.seed)
    frames = loop_generate(model, pts[0], args.length, rng)
    return _write_generated(args, frames, [0, args.length - 1])


def _eval_variant(model, cfg, lengths, n_samples, kind, n_test, seed):
    rows = []
    for t_len in lengths:
        batch = trainer.make_test_set(cfg, n_test, t_len, seed=seed)
        rng = data.split_rng(seed, "eval")
        report = metrics.evaluate_model(
            model, batch.sequences, n_samples=n_samples, kind=kind, rng=rng,
            include_r_best=False,
        )
        rows.append(report)
    return rows


def _cmd_curves(args):
    out = os.path.join(_out_dir(args.out_dir), args.out)
    n_test, n_samples, kind = args.n_test, args.n_samples, args.kind
    checkpoints = {}
    for spec in (args.checkpoints or "").split(","):
        if spec:
            name, _, path = spec.partition("=")
            if not path:
                raise _UsageError(f"bad checkpoint spec {spec!r}, want name=path")
            checkpoints[name] = path

    if args.analysis in ("cpc_vs_length", "quality_vs_length"):
        if not checkpoints:
            raise _UsageError("this analysis needs --checkpoints")
        lengths = _parse_grid(args.lengths, int)
        base_cfg = trainer.load_run_config(args.config) if args.config else trainer.RunConfig()
        names = sorted(checkpoints)
        table = {}
        for name in names:
            model = load_checkpoint(checkpoints[name])
            reports = _eval_variant(model, base_cfg, lengths, n_samples, kind,
                                    n_test, args.seed)
            field = "s_cpc" if args.analysis == "cpc_vs_length" else "s_best"
            table[name] = [getattr(r, field) for r in reports]
        with open(out, "w", encoding="utf-8") as fh:
            cols = ",".join(f"{n}_y,{n}_ci" for n in names)
            fh.write(f"length,{cols}\n")
            for row, t_len in enumerate(lengths):
                cells = [str(t_len)]
                for n in names:
                    m, ci = table[n][row]
                    cells += [f"{m:.10g}", f"{ci:.10g}"]
                fh.write(",".join(cells) + "\n")

    elif args.analysis in ("div_through_time", "quality_through_time"):
        if not checkpoints:
            raise _UsageError("this analysis needs --checkpoints")
        base_cfg = trainer.load_run_config(args.config) if args.config else trainer.RunConfig()
        t_len = args.length
        batch = trainer.make_test_set(base_cfg, n_test, t_len, seed=args.seed)
        names = sorted(checkpoints)
        fn = (metrics.diversity_through_time if args.analysis == "div_through_time"
              else metrics.quality_through_time)
        table = {}
        for name in names:
            model = load_checkpoint(checkpoints[name])
            rng = data.split_rng(args.seed, "eval")
            table[name] = fn(model, batch.sequences, n_samples=n_samples, kind=kind, rng=rng)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("t," + ",".join(f"{n}_y" for n in names) + "\n")
            for t in range(t_len):
                cells = [str(t + 1)] + [f"{table[n][t]:.10g}" for n in names]
                fh.write(",".join(cells) + "\n")

    elif args.analysis == "cpc_weight_sweep":
        if not args.config:
            raise _UsageError("cpc_weight_sweep needs --config for training variants")
        weights = _parse_grid(args.weights)
        base_cfg = trainer.load_run_config(args.config)
        results = {}
        for target in ("prior", "posterior"):
            row = []
            for w in weights:
                cfg = dataclasses.replace(
                    base_cfg, alpha_cpc=w, cpc_on=target, ablation="c"
                ).validate()
                run_dir = os.path.join(_out_dir(args.out_dir),
                                       f"sweep_{target}_{cfg.digest()}")
                ckpt = os.path.join(run_dir, "model.ckpt")
                if os.path.exists(ckpt):
                    model = load_checkpoint(ckpt)
                else:
                    model = trainer.train(cfg, run_dir).model
                batch = trainer.make_test_set(cfg, n_test, cfg.t_min + 2, seed=args.seed)
                rng = data.split_rng(args.seed, "eval")
                report = metrics.evaluate_model(
                    model, batch.sequences, n_samples=n_samples, kind=kind, rng=rng,
                    include_r_best=False,
                )
                row.append(report)
            results[target] = row
        with open(out, "w", encoding="utf-8") as fh:
            cols = ",".join(f"w{w:g}_sbest,w{w:g}_ci" for w in weights)
            fh.write(f"variant,{cols}\n")
            for target in ("prior", "posterior"):
                cells = [target]
                for rep in results[target]:
                    m, ci = rep.s_best
                    cells += [f"{m:.10g}", f"{ci:.10g}"]
                fh.write(",".join(cells) + "\n")
    else:
        raise _UsageError(f"unknown analysis {args.analysis!r}")

    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = _Parser(prog="p2pgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset utilities")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    gen = ds_sub.add_parser("gen", help="generate a synthetic sequence file")
    gen.add_argument("--kind", choices=("bouncing", "skeleton"), default="bouncing")
    gen.add_argument("--count", type=int, default=64)
    gen.add_argument("--length", type=int, default=12)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--split", choices=("train", "test", "eval"), default="test")
    gen.add_argument("--n-points", type=int, default=1)
    gen.add_argument("--n-joints", type=int, default=5)
    gen.add_argument("--speed-scale", type=float, default=1.0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--out-dir", default=None)
    gen.set_defaults(fn=_cmd_dataset_gen)

    tr = sub.add_parser("train", help="train a model from a run config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--ablation", choices=tuple(trainer.ABLATION_FLAGS), default=None)
    tr.add_argument("--steps", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--log-every", type=int, default=0)
    tr.add_argument("--out-dir", default=None)
    tr.set_defaults(fn=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a sequence file")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--test-data", required=True)
    ev.add_argument("--n-samples", type=int, default=100)
    ev.add_argument("--kind", choices=metrics.KINDS, default="mse")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", default="report.json")
    ev.add_argument("--out-dir", default=None)
    ev.set_defaults(fn=_cmd_eval)

    def add_gen_common(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--points", default=None,
                       help="inline control frames 'x,y;x,y;...'")
        p.add_argument("--frames", default=None, help="sequence file with control frames")
        p.add_argument("--indices", default=None,
                       help="sequence indices into --frames (first frame of each)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.add_argument("--out-dir", default=None)

    g = sub.add_parser("generate", help="point-to-point generation")
    add_gen_common(g)
    g.add_argument("--length", type=int, required=True)
    g.set_defaults(fn=_cmd_generate)

    st = sub.add_parser("stitch", help="merge clips through multiple control points")
    add_gen_common(st)
    st.add_argument("--lengths", required=True, help="comma-separated clip lengths")
    st.set_defaults(fn=_cmd_stitch)

    lp = sub.add_parser("loop", help="loop generation (start == end)")
    add_gen_common(lp)
    lp.add_argument("--length", type=int, required=True)
    lp.set_defaults(fn=_cmd_loop)

    cv = sub.add_parser("curves", help="emit figure-analysis data as CSV")
    cv.add_argument("--analysis", required=True,
                    choices=("cpc_vs_length", "quality_vs_length",
                             "div_through_time", "quality_through_time",
                             "cpc_weight_sweep"))
    cv.add_argument("--checkpoints", default=None, help="name=path[,name=path...]")
    cv.add_argument("--config", default=None)
    cv.add_argument("--lengths", default="8,12,16,20")
    cv.add_argument("--length", type=int, default=12)
    cv.add_argument("--weights", default="10,100,1000")
    cv.add_argument("--n-test", type=int, default=16)
    cv.add_argument("--n-samples", type=int, default=100)
    cv.add_argument("--kind", choices=metrics.KINDS, default="mse")
    cv.add_argument("--seed", type=int, default=0)
    cv.add_argument("--out", required=True)
    cv.add_argument("--out-dir", default=None)
    cv.set_defaults(fn=_cmd_curves)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # argparse exits 0 for --help; map its error exits to the usage code
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.fn(args)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # noqa: BLE001 - single CLI failure surface
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
