"""Command-line entry point: ``sanereg gen|train|register|eval|verify-bounds|gradcheck``.

Exit codes: 0 success, 1 gradient check failure, 2 bad input, 3 divergence,
4 bound violation.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import io
from .bounds import sample_checked_pairs, verify_cs_bound, verify_thm1
from .gradcheck import gradient_suite
from .grid import ShapeError, check_grid
from .metrics import MetricsReport, UndefinedMetric, aggregate, evaluate_pair
from .registration import DivergenceError, TinyNet, infer, register_pair_direct, train_model
from .synth import DegenerateRequest, make_dataset

EXIT_OK, EXIT_GRADCHECK, EXIT_INPUT, EXIT_DIVERGED, EXIT_BOUND = 0, 1, 2, 3, 4

log = logging.getLogger("sanereg")


class InputError(Exception):
    pass


def _shape(text):
    try:
        return check_grid(io.parse_shape(text))
    except (io.FormatError, ShapeError) as exc:
        raise InputError(f"invalid shape {text!r}: {exc}") from None


def _load_model(checkpoint):
    state, config, _ = io.load_checkpoint(checkpoint)
    model = TinyNet(2, width=config.width)
    model.load(state)
    return model, config


def cmd_gen(args):
    shape = _shape(args.shape)
    if args.pairs < 1:
        raise InputError("--pairs must be >= 1")
    try:
        pairs = make_dataset(args.pairs, shape, args.magnitude, args.smoothness, args.seed)
    except DegenerateRequest as exc:
        raise InputError(f"degenerate request: {exc}") from None
    params = {"shape": list(shape), "pairs": args.pairs, "magnitude": args.magnitude,
              "smoothness": args.smoothness, "seed": args.seed}
    io.write_dataset(args.out, pairs, params)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


TRAIN_COLUMNS = ["epoch", "total", "sim", "reg", "self", "cross", "violators",
                 "sse", "cse", "violators_eval"]


def cmd_train(args):
    config = io.RunConfig.load(args.config)
    if config.backend != "model":
        raise InputError("train needs backend=model; use register --direct for pairs")
    if not config.dataset:
        raise InputError("config has no dataset")
    dataset = io.read_dataset(config.dataset)
    monitor = io.read_dataset(config.monitor) if config.monitor else None
    model = None
    if config.init_checkpoint:
        model, _ = _load_model(config.init_checkpoint)
    os.makedirs(config.output, exist_ok=True)
    ckpt = os.path.join(config.output, "checkpoint")
    try:
        model, tlog = train_model(dataset, config.sanity(), config.epochs,
                                  config.learning_rate, config.seed, config.width,
                                  model=model, monitor=monitor)
    except DivergenceError as exc:
        if exc.checkpoint is not None:
            io.save_checkpoint(ckpt, exc.checkpoint, config, {"diverged_at_step": exc.step})
        print(f"error: {exc}; last good checkpoint kept in {ckpt}", file=sys.stderr)
        return EXIT_DIVERGED
    io.save_checkpoint(ckpt, model.state(), config, {"epochs": config.epochs})
    io.write_csv(os.path.join(config.output, "train_log.csv"), tlog.epochs,
                 TRAIN_COLUMNS, config.hash())
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _fields(m, f, model, config):
    """(g_mf, g_fm, g_mm, g_ff) from a model or the direct optimiser."""
    if model is not None:
        return infer(model, m, f), infer(model, f, m), infer(model, m, m), infer(model, f, f)
    res = register_pair_direct(m, f, config.sanity(), config.steps, config.learning_rate)
    return res.g_mf, res.g_fm, res.g_mm, res.g_ff


def _backend(args):
    if bool(args.checkpoint) == bool(args.direct):
        raise InputError("give exactly one of --checkpoint or --direct")
    if args.checkpoint:
        model, config = _load_model(args.checkpoint)
        if args.config:
            config = io.RunConfig.load(args.config)
        return model, config
    config = io.RunConfig.load(args.config) if args.config else io.RunConfig(
        backend="direct", learning_rate=0.1)
    return None, config


def cmd_register(args):
    model, config = _backend(args)
    m = io.read_volume(args.moving, "image")
    f = io.read_volume(args.fixed, "image")
    if m.shape != f.shape:
        raise InputError(f"moving {m.shape} and fixed {f.shape} differ")
    g_mf, g_fm, _, _ = _fields(m, f, model, config)
    os.makedirs(args.out, exist_ok=True)
    io.write_volume(os.path.join(args.out, "field_mf.sreg"), g_mf, "field")
    io.write_volume(os.path.join(args.out, "field_fm.sreg"), g_fm, "field")
    print(f"fields written to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    model, config = _backend(args)
    pairs = io.read_dataset(args.pairs)
    rows, reports = [], []
    for i, pair in enumerate(pairs):
        if args.identical:
            pair.fixed, pair.fixed_labels = pair.moving, pair.moving_labels
            pair.fixed_landmarks = pair.moving_landmarks
        fields = _fields(pair.moving, pair.fixed, model, config)
        report = evaluate_pair(pair, *fields, config.alpha, config.beta, config.spacing)
        reports.append(report)
        rows.append({"pair": f"pair_{i:03d}", "seed": pair.seed, **report.as_dict()})
    mean, std = aggregate(reports)
    rows.append({"pair": "mean", **mean.as_dict()})
    rows.append({"pair": "std", **std.as_dict()})
    io.write_csv(args.out, rows, ["pair", "seed"] + MetricsReport.columns(), config.hash())
    print(f"dice {mean.dice:.4f} sdice {mean.sdice:.4f} sse {mean.sse:.3g} "
          f"cse {mean.cse:.3g} -> {args.out}")
    return EXIT_OK


BOUND_COLUMNS = ["bound", "trial", "alpha", "beta", "N", "lhs", "rhs", "slack", "satisfied"]


def verify_bounds(trials, alpha, beta, shape=(8, 8), seed=0):
    """One report row per sampled trial for the relaxation and CS bounds."""
    rng = np.random.default_rng(seed)
    g, gt = sample_checked_pairs(2 * trials, shape, alpha, beta, rng)
    rows = []
    for t in range(trials):
        rows.append({"trial": t, **verify_thm1(g[t], gt[t], alpha, beta).row()})
    for t in range(trials):
        rep = verify_cs_bound(g[t], g[trials + t], alpha, beta,
                              tildes=(gt[t], gt[trials + t]))
        rows.append({"trial": t, **rep.row()})
    return rows


def cmd_verify_bounds(args):
    shape = _shape(args.shape)
    if args.trials < 1:
        raise InputError("--trials must be >= 1")
    rows = []
    for alpha, beta in zip(args.alpha, args.beta):
        try:
            batch = verify_bounds(args.trials, alpha, beta, shape, args.seed)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        for name in ("relaxation", "cs"):
            sel = [r for r in batch if r["bound"] == name]
            bad = sum(not r["satisfied"] for r in sel)
            worst = max(r["lhs"] / r["rhs"] for r in sel)
            print(f"{name:10s} alpha={alpha} beta={beta} violations={bad}/{len(sel)} "
                  f"worst lhs/rhs={worst:.4f}")
        rows += batch
    key = f"trials={args.trials};alpha={args.alpha};beta={args.beta};shape={shape};seed={args.seed}"
    if args.out:
        io.write_csv(args.out, rows, BOUND_COLUMNS, io.text_hash(key))
    return EXIT_BOUND if any(not r["satisfied"] for r in rows) else EXIT_OK


def cmd_gradcheck(args):
    results = gradient_suite(args.seeds, _shape(args.shape), args.tolerance)
    worst = {}
    for r in results:
        worst[r.term] = max(worst.get(r.term, 0.0), r.error)
    for term, err in worst.items():
        print(f"{term:13s} worst relative error {err:.3e}")
    failed = [r for r in results if not r.passed]
    if args.out:
        io.write_csv(args.out, [vars(r) for r in results],
                     ["term", "seed", "error", "tolerance"])
    if failed:
        print(f"{len(failed)} checks above tolerance {args.tolerance}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="sanereg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--shape", default="64x64")
    g.add_argument("--pairs", type=int, default=40)
    g.add_argument("--magnitude", type=float, default=2.0)
    g.add_argument("--smoothness", type=float, default=8.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a TinyNet from a run config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("register", cmd_register, "register one image pair"),
                                 ("eval", cmd_eval, "evaluate a dataset")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint")
        s.add_argument("--direct", action="store_true")
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)
        if name == "register":
            s.add_argument("--moving", required=True)
            s.add_argument("--fixed", required=True)
        else:
            s.add_argument("--pairs", required=True)
            s.add_argument("--identical", action="store_true",
                           help="register every moving image to itself")

    b = sub.add_parser("verify-bounds", help="sample checked fields and test the bounds")
    b.add_argument("--trials", type=int, default=10000)
    b.add_argument("--alpha", type=float, nargs="+", default=[0.1, 0.1, 0.01])
    b.add_argument("--beta", type=float, nargs="+", default=[12.0, 10.0, 0.03])
    b.add_argument("--shape", default="8x8")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_verify_bounds)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    c.add_argument("--seeds", type=int, default=100)
    c.add_argument("--shape", default="8x8")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    if getattr(args, "alpha", None) is not None and len(args.alpha) != len(args.beta):
        print("error: --alpha and --beta need the same number of values", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, io.FormatError, ShapeError, UndefinedMetric, OSError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
