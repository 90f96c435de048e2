"""End-to-end run: population, FedAvg pretraining, rate training, target evaluation.

Every artifact is a pure function of the config (which carries the seed), so
two runs with the same config write byte-identical CSV files whatever the
number of worker processes.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from .adaptation import AdaptationRates, save_alpha
from .analysis import alpha_report, write_rows_csv
from .errors import NumericError
from .fedsim import (atp_train, fedavg_pretrain, load_csv_pool, sample_population,
                     write_rounds_csv)
from .nn import save_checkpoint
from .parallel import OrderedPool
from .runtime import aggregate_table, evaluate_client, write_aggregate_csv, write_client_report

log = logging.getLogger(__name__)

STAGES = ("population", "pretrain", "atp", "eval", "report")


class StageError(RuntimeError):
    """A numeric failure, tagged with the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def _staged(stage, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (NumericError, FloatingPointError) as e:
        raise StageError(stage, e) from e


def build_population(cfg):
    pool = None
    if cfg.pool_csv is not None:
        pool = load_csv_pool(cfg.pool_csv, cfg.label_column)
    return sample_population(cfg.shift, cfg.n_sources, cfg.n_targets, cfg.seed, pool)


def pretrain(cfg, pop):
    p = cfg.pretrain
    return fedavg_pretrain(pop.sources, cfg.model.hidden, p.rounds, p.cohort, p.lr,
                           p.batch_size, p.epochs, cfg.seed, p.bn_momentum)


def train_rates(cfg, pop, w_G, mask=None, jobs=1):
    a = cfg.atp
    return atp_train(pop.sources, w_G, a.rounds, a.cohort, a.eta, a.epochs, a.batch_size,
                     mask or a.mask, cfg.seed, jobs, a.normalize, a.grad_clip)


def source_prior(pop):
    return np.mean([c.label_prior for c in pop.sources], axis=0)


_ev = {}


def _init_eval(w_G, rates, batch_size, tent_lr, train_prior):
    _ev.update(w_G=w_G, rates=rates, batch_size=batch_size, tent_lr=tent_lr,
               train_prior=train_prior)


def _eval_task(task):
    client, method = task
    return evaluate_client(client, _ev["w_G"], method, _ev["rates"], _ev["batch_size"],
                           _ev["tent_lr"], _ev["train_prior"])


def evaluate(clients, w_G, rates, methods, batch_size=20, tent_lr=1e-2, train_prior=None,
             jobs=1):
    """``{method: [EvalResult per client]}``, clients in input order."""
    tasks = [(c, m) for m in methods for c in clients]
    with OrderedPool(jobs, _init_eval, (w_G, rates, batch_size, tent_lr, train_prior)) as pool:
        results = pool.map(_eval_task, tasks)
    out = {m: [] for m in methods}
    for (_, m), r in zip(tasks, results):
        out[m].append(r)
    return out


def tune_tent_lr(cfg, pop, w_G, jobs=1):
    """Pick the Tent step size with the best mean accuracy on source validation splits."""
    grid = list(cfg.eval.tent_lr)
    if len(grid) == 1:
        return grid[0]
    val = [dataclasses.replace(c, X=c.X_val, y=c.y_val) for c in pop.sources
           if c.X_val is not None and len(c.X_val) >= cfg.eval.batch_size]
    best, best_acc = grid[0], -1.0
    for lr in grid:
        res = evaluate(val, w_G, None, ["tent"], cfg.eval.batch_size, lr, jobs=jobs)["tent"]
        acc = float(np.mean([r.accuracy for r in res]))
        if acc > best_acc:
            best, best_acc = lr, acc
    return best


def mean_accuracy(results):
    return float(np.mean([r.accuracy for r in results]))


def run_pipeline(cfg, out_dir, jobs=1):
    """Run every stage and write the artifacts; returns the summary dict."""
    out = Path(out_dir)
    (out / "eval").mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")

    pop = build_population(cfg)
    log.info("population: %d sources, %d targets", len(pop.sources), len(pop.targets))
    w_G, pt_rows = _staged("pretrain", pretrain, cfg, pop)
    save_checkpoint(w_G, out / "checkpoint.json")
    write_rounds_csv(pt_rows, out / "pretrain_rounds.csv")

    rates, rows, ledger = _staged("atp", train_rates, cfg, pop, w_G, jobs=jobs)
    save_alpha(rates, out / "alpha.json")
    write_rounds_csv(rows, out / "atp_rounds.csv")
    led = ledger.to_dict()
    led["config_hash"] = chash
    (out / "ledger.json").write_text(json.dumps(led, indent=1) + "\n")

    methods = list(cfg.eval.methods)
    tent_lr = cfg.eval.tent_lr[0]
    if "tent" in methods:
        tent_lr = _staged("eval", tune_tent_lr, cfg, pop, w_G, jobs)
    results = _staged("eval", evaluate, pop.targets, w_G, rates, methods, cfg.eval.batch_size,
                      tent_lr, source_prior(pop), jobs)
    for m, rs in results.items():
        for r in rs:
            write_client_report(r, out / "eval" / f"client{r.client_id:03d}_{m}.json")
    table = aggregate_table(results)
    write_aggregate_csv(table, out / "aggregate.csv")

    rep = alpha_report(rates, w_G.layers)
    write_rows_csv(rep["modules"], out / "alpha_modules.csv")
    write_rows_csv(rep["groups"], out / "alpha_groups.csv")

    summary = {
        "name": cfg.name, "seed": cfg.seed, "config_hash": chash,
        "D": w_G.D, "d": w_G.d, "tent_lr": tent_lr,
        "accuracy": {m: mean_accuracy(rs) for m, rs in results.items()},
        "alpha_norm": rates.norm,
        "alpha_groups": {f"{g['group_by']}={g['group']}": g["mean"] for g in rep["groups"]},
        "ledger": led,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def run_scenario(cfg, variants=("full",), methods=("none", "atp-batch"), jobs=1):
    """Share one population and global model across several rate-mask variants.

    Returns ``{"none": acc, variant: {method: acc, ...}, ...}`` plus the trained
    rates under ``"rates"``. Used by the directional experiments.
    """
    pop = build_population(cfg)
    w_G, _ = _staged("pretrain", pretrain, cfg, pop)
    zero = AdaptationRates.zeros(w_G.manifest)
    base = evaluate(pop.targets, w_G, zero, ["none"], cfg.eval.batch_size, jobs=jobs)
    out = {"none": mean_accuracy(base["none"]), "rates": {}}
    atp_methods = [m for m in methods if m.startswith("atp-")]
    for v in variants:
        rates, _, _ = _staged("atp", train_rates, cfg, pop, w_G, mask=v, jobs=jobs)
        res = evaluate(pop.targets, w_G, rates, atp_methods, cfg.eval.batch_size, jobs=jobs)
        out[v] = {m: mean_accuracy(rs) for m, rs in res.items()}
        out["rates"][v] = rates
    return out
