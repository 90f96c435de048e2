"""Command-line entry point: ``atpfl pipeline | analysis | eval``.

Exit status: 0 when every stage completes and every embedded check passes,
1 when a check misses its tolerance, 2 for configuration/usage errors,
3 for numeric divergence (the message names the stage).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, config
from .adaptation import load_alpha
from .errors import ConfigError, DimensionError, DomainError
from .nn import load_checkpoint
from .parallel import default_jobs
from .pipeline import (StageError, build_population, evaluate, mean_accuracy, run_pipeline,
                       source_prior)
from .runtime import METHODS, aggregate_table, write_aggregate_csv, write_client_report

OUT_ENV = "ATPFL_OUT"

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("atpfl")


def _floats(text):
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _out_dir(args, default):
    """``--out`` beats the environment variable, which beats the config/default."""
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(default)


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n")


def _set_pairs(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _load_config(args):
    cfg = config.resolve(args.config)
    overrides = _set_pairs(getattr(args, "set", None))
    if args.seed is not None:
        overrides["seed"] = args.seed
    return config.override(cfg, **overrides) if overrides else cfg


# -- subcommands ----------------------------------------------------------------

def cmd_pipeline(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg.output)
    summary = run_pipeline(cfg, out, jobs=args.jobs)
    print(f"config {summary['config_hash']}  seed {cfg.seed}  -> {out}")
    for m, acc in summary["accuracy"].items():
        print(f"  {m:<11s} {100 * acc:6.2f}%")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg.output)
    w_G = load_checkpoint(args.checkpoint)
    rates = load_alpha(args.alpha, w_G.manifest)
    pop = build_population(cfg)
    methods = args.methods.split(",") if args.methods else list(cfg.eval.methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
    results = evaluate(pop.targets, w_G, rates, methods, cfg.eval.batch_size,
                       cfg.eval.tent_lr[0], source_prior(pop), args.jobs)
    (out / "eval").mkdir(parents=True, exist_ok=True)
    for m, rs in results.items():
        for r in rs:
            write_client_report(r, out / "eval" / f"client{r.client_id:03d}_{m}.json")
    write_aggregate_csv(aggregate_table(results), out / "aggregate.csv")
    for m, rs in results.items():
        print(f"  {m:<11s} {100 * mean_accuracy(rs):6.2f}%")
    return EXIT_OK


def _analysis_toy(args, out):
    cfg = analysis.ToyConfig(samples=args.samples, seed=args.seed or 0)
    res = analysis.toy_experiment(cfg)
    rows = [{"alpha": a, "accuracy": acc, "exact": float(analysis.toy_accuracy_exact(cfg, a)),
             "adapted_mean": m, "adapted_var": v} for a, acc, m, v in res.rows]
    analysis.write_rows_csv(rows, out / "toy.csv")
    print(f"train accuracy {res.train_accuracy:.4f}")
    ok = True
    for r in rows:
        # Monte-Carlo estimate vs closed form: 5 standard errors
        tol = 5 * np.sqrt(r["exact"] * (1 - r["exact"]) / cfg.samples)
        good = abs(r["accuracy"] - r["exact"]) <= tol
        ok &= good
        print(f"alpha={r['alpha']:+.2f}  acc={r['accuracy']:.4f}  exact={r['exact']:.4f}"
              f"  {'ok' if good else 'MISMATCH'}")
    _write_json(out / "toy.json", {"train_accuracy": res.train_accuracy, "rows": rows,
                                   "passed": bool(ok)})
    return ok


def _analysis_bound(args, out):
    b = analysis.BoundInput(args.L, args.H, args.R, args.d, args.N, args.K, args.eps)
    r = analysis.generalization_bound(b)
    print(f"log bound {r.log_value:.6f}  bound {r.value:.6g}  probability {r.probability:.6g}")
    _write_json(out / "bound.json", {"input": dataclasses.asdict(b),
                                     "log_value": r.log_value, "value": r.value,
                                     "probability": r.probability})
    return True


def _analysis_prop31(args, out):
    p, q = np.array(args.p), np.array(args.q)
    if p.shape != q.shape:
        raise DomainError("--p and --q need the same number of classes")
    if np.allclose(p, q):
        x = np.random.default_rng(args.seed or 0).standard_normal((1000, len(p)))
        model = analysis.gaussian_bayes_model(np.eye(len(p)) * 2.0, 1.0, p / p.sum())
        same = analysis.calibrate_last_layer(model, p, q)
        dev = float(np.abs(analysis.predict(same, x) - analysis.predict(model, x)).max())
        print(f"identity, max deviation {dev:g}")
        _write_json(out / "prop31.json", {"identity": True, "max_deviation": dev})
        return dev == 0.0
    rep = analysis.prop31_check(p, q, args.samples, seed=args.seed or 0)
    ok = rep.passed()
    print(f"max pointwise deviation {rep.max_pointwise_dev:.3g}  CE calibrated "
          f"{rep.ce_calibrated:.5f}  Bayes {rep.ce_bayes:.5f}  uncalibrated "
          f"{rep.ce_uncalibrated:.5f}  {'ok' if ok else 'FAIL'}")
    _write_json(out / "prop31.json", {"max_pointwise_dev": rep.max_pointwise_dev,
                                      "ce_calibrated": rep.ce_calibrated,
                                      "ce_bayes": rep.ce_bayes,
                                      "ce_uncalibrated": rep.ce_uncalibrated,
                                      "passed": bool(ok)})
    return ok


def _analysis_prop32(args, out):
    rep = analysis.bn_align_check(args.scale, args.offset, args.samples, shift=args.shift,
                                  seed=args.seed or 0)
    print(f"adapted mean {rep.adapted_mean:.4f}  std {rep.adapted_std:.4f}  "
          f"KS before {rep.ks_before:.4f}  after {rep.ks_after:.4f}  "
          f"{'aligned' if rep.aligned else 'not aligned'}")
    _write_json(out / "prop32.json", {"adapted_mean": rep.adapted_mean,
                                      "adapted_std": rep.adapted_std,
                                      "ks_before": rep.ks_before, "ks_after": rep.ks_after,
                                      "aligned": bool(rep.aligned)})
    # a non-affine shift is expected to stay misaligned
    return rep.aligned if args.shift == "affine" else True


_ANALYSES = {"toy": _analysis_toy, "bound": _analysis_bound, "prop31": _analysis_prop31,
             "prop32": _analysis_prop32}


def cmd_analysis(args):
    out = _out_dir(args, "runs/analysis")
    out.mkdir(parents=True, exist_ok=True)
    ok = _ANALYSES[args.check](args, out)
    return EXIT_OK if ok else EXIT_CHECK


# -- parser ---------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="atpfl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True,
                           help="JSON file, or the name of a shipped config "
                                f"({', '.join(config.reference_names())})")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config field, e.g. atp.eta=0.1")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=default_jobs())
        p.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else config)")

    p = sub.add_parser("pipeline", help="population -> pretrain -> rates -> evaluation")
    common(p)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint and rate file")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alpha", required=True)
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analysis", help="analytical checks")
    asub = p.add_subparsers(dest="check", required=True)
    t = asub.add_parser("toy")
    common(t, False)
    t.add_argument("--samples", type=int, default=100_000)
    b = asub.add_parser("bound")
    common(b, False)
    for name, typ, default in (("L", float, 1.0), ("H", float, 1.0), ("R", float, 1.0),
                               ("d", int, 2), ("N", int, 100), ("K", int, 4),
                               ("eps", float, 0.5)):
        b.add_argument(f"--{name}", type=typ, default=default)
    c = asub.add_parser("prop31")
    common(c, False)
    c.add_argument("--p", type=_floats, default=[0.5, 0.5])
    c.add_argument("--q", type=_floats, default=[0.2, 0.8])
    c.add_argument("--samples", type=int, default=100_000)
    s = asub.add_parser("prop32")
    common(s, False)
    s.add_argument("--scale", type=float, default=2.0)
    s.add_argument("--offset", type=float, default=3.0)
    s.add_argument("--samples", type=int, default=10_000)
    s.add_argument("--shift", choices=("affine", "cube"), default="affine")
    p.set_defaults(fn=cmd_analysis)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, DomainError, DimensionError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"error: numeric divergence in stage {e.stage}: {e.cause}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
