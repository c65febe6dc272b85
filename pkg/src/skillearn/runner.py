"""Seeded search-then-evaluate runs, seed lists and parameter sweeps.

A run writes into its output directory:

    config.txt       the resolved configuration
    metrics.jsonl    one record per search iteration
    timing.jsonl     wall time per iteration (kept apart so metrics stay byte-stable)
    final_arch.txt   the derived architecture, one ``layer=<i> op=<kind>`` line per layer
    summary.json     test accuracy of the derived architecture and run averages
    error.json       only on failure: a machine-readable error record
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ad, engine, il, lpt
from .config import RunConfig, format_value, with_values
from .data import DatasetBundle, Split, generate_data
from .errors import ConfigError, InvalidSpec, NonFiniteResult, ProblemSpecError, SkillearnError
from .nas import (MixedModel, classify, derive_architecture, encode, one_hot, split_testee,
                  train_discrete)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 2, 3, 4
SWEEP_PARAMS = {"lambda": ("lam", "il_lam"), "gamma": ("gamma", "gamma")}
SWEEP_HEADER = ("value", "test_acc", "mean_interaction", "mean_cardinality")


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, InvalidSpec, ProblemSpecError)):
        return EXIT_CONFIG
    if getattr(exc, "code", None) == "tolerance-exceeded":
        return EXIT_TOLERANCE
    if isinstance(exc, (NonFiniteResult, SkillearnError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return EXIT_NUMERIC


def error_record(exc: BaseException) -> dict:
    rec = {"code": getattr(exc, "code", type(exc).__name__), "message": str(exc)}
    for attr in ("iteration", "step", "stage", "group", "tag"):
        v = getattr(exc, attr, None)
        if v is not None:
            rec[attr] = list(v) if isinstance(v, tuple) else v
    return rec


@dataclass
class RunResult:
    status: int
    out: Path | None
    summary: dict = field(default_factory=dict)
    error: dict | None = None
    records: list = field(default_factory=list)


class MetricsLog:
    """Collects per-iteration records; optionally streams them to disk."""

    def __init__(self, out: Path | None):
        self.records: list[engine.MetricsRecord] = []
        self._fh = self._timing = None
        if out is not None:
            self._fh = open(out / "metrics.jsonl", "w")
            self._timing = open(out / "timing.jsonl", "w")

    def add(self, rec: engine.MetricsRecord):
        bad = [k for k, v in rec.values.items() if not math.isfinite(v)]
        if bad:
            raise NonFiniteResult(f"non-finite metrics {bad}")
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")
            self._fh.flush()
            self._timing.write(json.dumps({"iteration": rec.iteration, "wall_time": rec.wall_time}) + "\n")

    def close(self):
        for fh in (self._fh, self._timing):
            if fh:
                fh.close()

    def mean(self, key):
        vals = [r.values[key] for r in self.records if key in r.values]
        return float(np.mean(vals)) if vals else float("nan")


def _xy(split: Split, n_classes: int):
    return split.x, one_hot(split.y, n_classes)


def _loop(cfg: RunConfig, log: MetricsLog, data: dict, batch_size, step):
    """Shared iteration loop: sample batches, call ``step``, record metrics."""
    rng = np.random.default_rng(cfg.seed)
    for it in range(1, cfg.budget + 1):
        t0 = time.perf_counter()
        batch = engine.sample_batches(data, batch_size, rng)
        try:
            metrics = step(batch)
        except SkillearnError as exc:
            exc.iteration = it
            raise
        log.add(engine.MetricsRecord(it, metrics, time.perf_counter() - t0))


def testee_model(cfg: RunConfig) -> MixedModel:
    return MixedModel.uniform(cfg.dim, cfg.width, cfg.classes, n_layers=cfg.n_layers)


def lpt_config(cfg: RunConfig) -> lpt.LptConfig:
    return lpt.LptConfig(lam=cfg.lam, gamma=cfg.gamma, ablation=cfg.ablation,
                         include_direct_creator_path=cfg.include_direct_creator_path,
                         lr_arch=cfg.lr_arch, lr_weights=cfg.lr_weights, lr_encoder=cfg.lr_encoder,
                         lr_executor=cfg.lr_executor, lr_creator=cfg.lr_creator,
                         hvp_radius=cfg.hvp_radius)


def il_config(cfg: RunConfig) -> il.IlConfig:
    return il.IlConfig(lr_weights=cfg.il_lr_weights, lr_heads=cfg.il_lr_heads, lr_arch=cfg.il_lr_arch,
                       hvp_radius=cfg.hvp_radius)


def search_lpt(cfg: RunConfig, bundle: DatasetBundle, log: MetricsLog):
    models = lpt.LptModels(testee_model(cfg), cfg.hidden)
    graphs = lpt.LptGraphs(models, lpt_config(cfg))
    task = bundle.tasks[0]
    c = cfg.classes
    data = {"ee_train": _xy(task.train, c), "er_train": _xy(task.train, c),
            "er_val": _xy(task.val, c), "bank": _xy(bundle.bank, c)}
    batch_size = cfg.batch_size
    if cfg.ablation == "difficulty-only":
        # one selection scalar per bank example, so the whole bank is used
        batch_size = {n: (None if n == "bank" else cfg.batch_size) for n in data}
    state = models.init_state(cfg.seed, cfg.ablation, len(bundle.bank))

    def step(batch):
        nonlocal state
        state, metrics = lpt.lpt_iterate(graphs, state, batch)
        return metrics

    _loop(cfg, log, data, batch_size, step)
    return models.testee, state.arch


def search_il(cfg: RunConfig, bundle: DatasetBundle, log: MetricsLog, joint: bool):
    model = testee_model(cfg)
    schedule = il.jl_schedule(cfg.K) if joint else il.IlSchedule(cfg.K, cfg.M, cfg.il_lam)
    icfg = il_config(cfg)
    graphs = il.IlGraphs(model)
    data = {}
    for k, task in enumerate(bundle.tasks, start=1):
        data[f"train{k}"] = _xy(task.train, cfg.classes)
        data[f"val{k}"] = _xy(task.val, cfg.classes)
    state = il.init_state(model, schedule, cfg.seed)

    def step(batch):
        nonlocal state
        state, metrics = il.il_iterate(graphs, state, schedule, icfg, batch)
        return metrics

    _loop(cfg, log, data, cfg.batch_size, step)
    return model, state.arch


def search_baseline(cfg: RunConfig, bundle: DatasetBundle, log: MetricsLog):
    """One-level search: A and W descend the training loss together."""
    model = testee_model(cfg)
    A, W, x, y = (ad.leaf(n) for n in ("A", "W", "train.x", "train.y"))
    enc, head = split_testee(model, W)
    loss = ad.mean(ad.cross_entropy(classify(model, head, encode(model, A, enc, x)), y))
    graph = ad.Graph({"loss": loss}).with_gradients(["A", "W"])
    arch = np.zeros(model.arch_size)
    weights = model.testee_layout.init(cfg.seed)

    def step(batch):
        nonlocal arch, weights
        bx, by = batch["train"]
        res = graph.run({"A": arch, "W": weights, "train.x": bx, "train.y": by})
        arch = arch - cfg.lr_arch * res["grad:A"]
        weights = weights - cfg.lr_weights * res["grad:W"]
        return {"train_loss": float(res["loss"]), "gradnorm_arch": float(np.linalg.norm(res["grad:A"]))}

    _loop(cfg, log, {"train": _xy(bundle.tasks[0].train, cfg.classes)}, cfg.batch_size, step)
    return model, arch


def evaluate(cfg: RunConfig, bundle: DatasetBundle, model: MixedModel, arch) -> dict:
    """Train the derived architecture from scratch on train+val; score on test."""
    disc = derive_architecture(model, arch)
    accs = []
    for task in bundle.tasks:
        x = np.concatenate([task.train.x, task.val.x])
        y = np.concatenate([task.train.y, task.val.y])
        res = train_discrete(disc, (x, y), (task.test.x, task.test.y), in_dim=cfg.dim,
                             width=cfg.width, n_classes=cfg.classes, epochs=cfg.eval_epochs,
                             seed=cfg.seed, lr=cfg.eval_lr)
        accs.append(res.test_acc)
    return {"arch": disc, "task_acc": accs, "test_acc": float(np.mean(accs))}


def run_experiment(cfg: RunConfig, write: bool = True) -> RunResult:
    """Search in the configured mode, then evaluate the derived architecture."""
    out = None
    if write:
        if not cfg.out:
            return RunResult(EXIT_CONFIG, None, error={"code": "config-error",
                                                       "message": "an output directory is required"})
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        (out / "error.json").unlink(missing_ok=True)
    log = MetricsLog(out)
    try:
        if cfg.mode == "gradcheck":
            raise ConfigError("gradcheck mode runs through the gradcheck command")
        bundle = generate_data(cfg.data_spec(), cfg.seed)
        if cfg.mode == "lpt":
            model, arch = search_lpt(cfg, bundle, log)
        elif cfg.mode in ("il", "jl"):
            model, arch = search_il(cfg, bundle, log, joint=cfg.mode == "jl")
        else:
            model, arch = search_baseline(cfg, bundle, log)
        ev = evaluate(cfg, bundle, model, arch)
    except (SkillearnError, ValueError, FloatingPointError) as exc:
        log.close()
        rec = error_record(exc)
        if out is not None:
            (out / "error.json").write_text(json.dumps(rec, sort_keys=True) + "\n")
        return RunResult(exit_code(exc), out, error=rec, records=log.records)
    log.close()
    summary = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "iterations": cfg.budget,
        "arch": ev["arch"].to_text().splitlines(),
        "test_acc": ev["test_acc"],
        "task_acc": ev["task_acc"],
        "mean_interaction": log.mean("interaction") if cfg.mode == "lpt" else log.mean("mean_distance"),
        "mean_cardinality": log.mean("cardinality"),
        "final_metrics": log.records[-1].values if log.records else {},
    }
    if out is not None:
        (out / "final_arch.txt").write_text(ev["arch"].to_text())
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return RunResult(EXIT_OK, out, summary, records=log.records)


def run_seeds(cfg: RunConfig, seeds, write: bool = True) -> tuple[list[RunResult], dict]:
    """Run once per seed (each in ``<out>/seed<k>``); report mean and std of test accuracy."""
    results = []
    for s in seeds:
        sub = replace(cfg, seed=int(s), out=str(Path(cfg.out) / f"seed{s}") if cfg.out else "")
        results.append(run_experiment(sub, write=write and bool(cfg.out)))
    accs = [r.summary["test_acc"] for r in results if r.status == EXIT_OK]
    stats = {"n": len(accs), "mean": float(np.mean(accs)) if accs else float("nan"),
             "std": float(np.std(accs)) if accs else float("nan")}
    return results, stats


def sweep(cfg: RunConfig, param: str, values, write: bool = True) -> tuple[list[dict], int]:
    """One run per value with a shared seed; rows keep the order of ``values``.

    Returns the CSV rows and the worst exit status seen; a failing value
    yields a row of NaNs and the sweep carries on.
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"can only sweep {', '.join(SWEEP_PARAMS)}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    key = SWEEP_PARAMS[param][1 if cfg.mode in ("il", "jl") else 0]
    rows, worst = [], EXIT_OK
    for i, v in enumerate(values):
        sub_out = str(Path(cfg.out) / f"{i:02d}_{param}={format_value(float(v))}") if cfg.out else ""
        res = run_experiment(with_values(cfg, **{key: v, "out": sub_out}), write=write and bool(cfg.out))
        s = res.summary
        rows.append({"value": float(v), "test_acc": s.get("test_acc", float("nan")),
                     "mean_interaction": s.get("mean_interaction", float("nan")),
                     "mean_cardinality": s.get("mean_cardinality", float("nan")), "status": res.status})
        worst = max(worst, res.status)
    if write and cfg.out:
        write_sweep_csv(Path(cfg.out) / "sweep.csv", rows)
    return rows, worst


def write_sweep_csv(path: Path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([repr(float(r[k])) for k in SWEEP_HEADER])
