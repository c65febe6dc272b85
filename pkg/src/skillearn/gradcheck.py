"""Analytic gradients and hypergradients against central finite differences.

Each comparison reports ``max|analytic - reference| / max(max|reference|, 1e-8)``
under a tag naming the quantity checked. The instances are deliberately tiny
(at most 100 parameters each): one mixed layer as wide as the input, so the
finite-difference sweeps stay cheap.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ad, engine, il, lpt
from .config import RunConfig
from .data import generate_data
from .errors import ConfigError, ToleranceExceeded
from .nas import MixedModel, classify, encode, one_hot, split_testee

MAX_PARAMS = 100
BATCH = 8
IL_OPS = ("identity", "zero", "linear", "linear-tanh")

TOLERANCES = {
    "autodiff": 1e-6,
    "hvp-finite-diff": 1e-2,
    "stage2-step": 1e-6,
    "arch-hypergrad": 1e-3,
    "creator-hypergrad": 1e-3,
    "engine-hypergrad": 1e-4,
    "il-arch-hypergrad": 1e-3,
    "il-engine-hypergrad": 1e-4,
}


@dataclass(frozen=True)
class Check:
    tag: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.error <= self.tol)

    def line(self) -> str:
        return f"{self.tag:<22s} max_rel_err={self.error:.3e} tol={self.tol:.0e} {'PASS' if self.ok else 'FAIL'}"


def rel_error(analytic, reference) -> float:
    a, r = np.asarray(analytic, float), np.asarray(reference, float)
    return float(np.max(np.abs(a - r)) / max(float(np.max(np.abs(r))), 1e-8))


def _count(*arrays) -> int:
    return int(sum(np.asarray(a).size for a in arrays if a is not None))


def _batches(cfg: RunConfig, names_per_task, n_tasks):
    spec = replace(cfg, K=n_tasks, mode="il" if n_tasks > 1 else "lpt").data_spec()
    bundle = generate_data(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for k, task in enumerate(bundle.tasks, start=1):
        for name, split in names_per_task(k, task, bundle):
            idx = rng.choice(len(split), size=min(BATCH, len(split)), replace=False)
            out[name] = (split.x[idx], one_hot(split.y[idx], cfg.classes))
    return out


def lpt_instance(cfg: RunConfig):
    models = lpt.LptModels(MixedModel.uniform(cfg.dim, cfg.dim, cfg.classes, n_layers=1), 3)
    lcfg = lpt.LptConfig(lam=cfg.lam, gamma=cfg.gamma, include_direct_creator_path=True,
                         lr_arch=cfg.lr_arch, lr_weights=cfg.lr_weights, lr_encoder=cfg.lr_encoder,
                         lr_executor=cfg.lr_executor, lr_creator=cfg.lr_creator,
                         hvp_radius=cfg.hvp_radius)
    rng = np.random.default_rng(cfg.seed + 1)
    state = models.init_state(cfg.seed)
    state = replace(state, arch=rng.normal(size=state.arch.shape),
                    creator=rng.normal(size=state.creator.shape))
    n = _count(*state.as_dict().values())
    if n > MAX_PARAMS:
        raise ConfigError(f"gradcheck LPT instance has {n} parameters (limit {MAX_PARAMS}); lower dim or classes")
    batch = _batches(cfg, lambda k, t, b: [("ee_train", t.train), ("er_train", t.train),
                                           ("er_val", t.val), ("bank", b.bank)], 1)
    return models, lcfg, state, batch


def il_instance(cfg: RunConfig):
    model = MixedModel.uniform(cfg.dim, cfg.dim, cfg.classes, n_layers=1, ops=IL_OPS)
    schedule = il.IlSchedule(2, 2, cfg.il_lam)
    icfg = il.IlConfig(lr_weights=cfg.il_lr_weights, lr_heads=cfg.il_lr_heads, lr_arch=cfg.il_lr_arch,
                       hvp_radius=cfg.hvp_radius)
    state = il.init_state(model, schedule, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 2)
    state = replace(state, arch=rng.normal(size=state.arch.shape))
    n = _count(state.arch, *state.enc.values(), *state.head.values())
    if n > MAX_PARAMS:
        raise ConfigError(f"gradcheck IL instance has {n} parameters (limit {MAX_PARAMS}); lower dim or classes")
    batch = _batches(cfg, lambda k, t, b: [(f"train{k}", t.train), (f"val{k}", t.val)], 2)
    return model, schedule, icfg, state, batch


def _sign(tag, corrupt):
    return -1.0 if tag in corrupt else 1.0


def check_lpt(cfg: RunConfig, corrupt=()) -> list[Check]:
    models, lcfg, state, batch = lpt_instance(cfg)
    graphs = lpt.LptGraphs(models, lcfg)
    out = []

    # plain reverse mode on the testee's training loss
    res = graphs.testee_train.run({"A": state.arch, "W": state.weights, **lpt._bind(batch, "ee_train")})
    ref = ad.finite_diff_grad(
        lambda b: float(graphs.testee_train.run({**b, **lpt._bind(batch, "ee_train")}, ["loss"])["loss"]),
        {"A": state.arch, "W": state.weights}, "W")
    out.append(Check("autodiff", rel_error(_sign("autodiff", corrupt) * res["grad:W"], ref),
                     TOLERANCES["autodiff"]))

    # finite-difference mixed product against the exact one
    m = models.testee
    A, W, v = ad.leaf("A"), ad.leaf("W"), ad.leaf("v")
    x, y = ad.leaf("ee_train.x"), ad.leaf("ee_train.y")
    loss = ad.mean(lpt.testee_rows(models, A, W, x, y))
    (gw,) = ad.grad(loss, [W])
    (exact,) = ad.grad(ad.sum(gw * v), [A])
    direction = np.random.default_rng(cfg.seed).normal(size=state.weights.shape)
    bind = {"A": state.arch, "W": state.weights, "v": direction, **lpt._bind(batch, "ee_train")}
    hv = ad.Graph({"hv": exact}).run(bind)["hv"]
    fd = ad.finite_diff_hvp(
        lambda w: graphs.testee_train.run({**bind, "W": w}, ["grad:A"])["grad:A"],
        state.weights, direction, lcfg.hvp_radius)
    out.append(Check("hvp-finite-diff", rel_error(_sign("hvp-finite-diff", corrupt) * fd, hv),
                     TOLERANCES["hvp-finite-diff"]))

    # stage-II step direction on the tester's objective
    s2 = graphs.stage2.run({"E": state.encoder, "X": state.executor, "C": state.creator,
                            **lpt._bind(batch, "er_train", "bank")})
    ref = ad.finite_diff_grad(
        lambda b: float(graphs.stage2.run({**b, "X": state.executor, "C": state.creator,
                                           **lpt._bind(batch, "er_train", "bank")}, ["loss"])["loss"]),
        {"E": state.encoder}, "E")
    out.append(Check("stage2-step", rel_error(_sign("stage2-step", corrupt) * s2["grad:E"], ref),
                     TOLERANCES["stage2-step"]))

    u = lpt.unroll(graphs, state, batch)
    ga = lpt.arch_hypergrad(graphs, state, batch, u)
    fa = ad.finite_diff_grad(lambda b: lpt.objective(graphs, replace(state, arch=b["A"]), batch),
                             {"A": state.arch}, "A")
    out.append(Check("arch-hypergrad", rel_error(_sign("arch-hypergrad", corrupt) * ga, fa),
                     TOLERANCES["arch-hypergrad"]))
    gc = lpt.creator_hypergrad(graphs, state, batch, u)
    fc = ad.finite_diff_grad(lambda b: lpt.objective(graphs, replace(state, creator=b["C"]), batch),
                             {"C": state.creator}, "C")
    out.append(Check("creator-hypergrad", rel_error(_sign("creator-hypergrad", corrupt) * gc, fc),
                     TOLERANCES["creator-hypergrad"]))

    # the generic solver's hypergradient, per remaining group
    problem = lpt.lpt_problem(models, state, lcfg)
    cp = engine.CompiledProblem(problem)
    values = problem.values
    hg = cp.hypergradients(values, batch)
    err = 0.0
    for g in problem.validation.remaining:
        ref = ad.finite_diff_grad(lambda b, g=g: cp.validation_objective({**values, g: b[g]}, batch, group=g),
                                  {g: values[g]}, g)
        err = max(err, rel_error(_sign("engine-hypergrad", corrupt) * hg[g], ref))
    out.append(Check("engine-hypergrad", err, TOLERANCES["engine-hypergrad"]))
    return out


def check_il(cfg: RunConfig, corrupt=()) -> list[Check]:
    model, schedule, icfg, state, batch = il_instance(cfg)
    graphs = il.IlGraphs(model)
    out = []
    g = il.il_arch_grad(graphs, state, schedule, icfg, batch)

    def chained(b):
        s = replace(state, arch=b["A"])
        return il.validation_loss(graphs, b["A"], il.run_chain(graphs, s, schedule, icfg, batch), schedule, batch)

    ref = ad.finite_diff_grad(chained, {"A": state.arch}, "A")
    out.append(Check("il-arch-hypergrad", rel_error(_sign("il-arch-hypergrad", corrupt) * g, ref),
                     TOLERANCES["il-arch-hypergrad"]))

    problem = il.il_problem(model, state, schedule, icfg)
    cp = engine.CompiledProblem(problem)
    values = problem.values
    hg = cp.hypergradients(values, batch)["A"]
    ref = ad.finite_diff_grad(lambda b: cp.validation_objective({**values, "A": b["A"]}, batch),
                              {"A": values["A"]}, "A")
    out.append(Check("il-engine-hypergrad", rel_error(_sign("il-engine-hypergrad", corrupt) * hg, ref),
                     TOLERANCES["il-engine-hypergrad"]))
    return out


def gradcheck(cfg: RunConfig, corrupt=()) -> list[Check]:
    """Run every comparison; ``corrupt`` flips the sign of the named tags (self-test)."""
    unknown = set(corrupt) - set(TOLERANCES)
    if unknown:
        raise ConfigError(f"unknown gradcheck tags {sorted(unknown)}")
    return check_lpt(cfg, corrupt) + check_il(cfg, corrupt)


def require_pass(checks: list[Check]):
    bad = [c for c in checks if not c.ok]
    if bad:
        raise ToleranceExceeded("; ".join(f"{c.tag}: {c.error:.3e} > {c.tol:.0e}" for c in bad), tag=bad[0].tag)
