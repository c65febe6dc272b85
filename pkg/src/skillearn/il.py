"""Interleaving learning and the joint-learning baseline.

K learners share an encoder architecture A. Over M rounds, learner k in
round m trains its own encoder weights W_k^(m) while being pulled towards the
weights produced by the previous stage in round-major order:

    Wbar_k^(m) = W_k^(m) - eta * grad_W L_k(A, W_k^(m), H_k^(m)) - 2 eta lam (W_k^(m) - Wbar_prev)

The last round's heads take one step of their own, and A descends the sum of
the learners' validation losses evaluated at (Wbar_k^(M), Hbar_k^(M)). The
A-gradient is assembled by walking the chain backwards; mixed second
derivatives come from central differences of first-order gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ad, engine
from .ad import HVP_RADIUS, finite_diff_hvp
from .errors import MissingPredecessor, NonFiniteGradient, NonFiniteResult, SkillearnError, ZeroDirection
from .nas import MixedModel, classify, encode


@dataclass(frozen=True)
class IlSchedule:
    K: int
    M: int
    lam: float = 100.0

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be >= 1")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("lam must be finite and >= 0")

    @property
    def order(self) -> list[tuple[int, int]]:
        return [(m, k) for m in range(1, self.M + 1) for k in range(1, self.K + 1)]

    def predecessor(self, m: int, k: int):
        if k > 1:
            return (m, k - 1)
        if m > 1:
            return (m - 1, self.K)
        return None


@dataclass(frozen=True)
class IlConfig:
    lr_weights: float = 0.004
    lr_heads: float = 0.004
    lr_arch: float = 3e-3
    # distance of the finite-difference probes in second-order products
    hvp_radius: float = HVP_RADIUS

    def __post_init__(self):
        for k in ("lr_weights", "lr_heads", "lr_arch"):
            v = getattr(self, k)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and >= 0")
        if not self.hvp_radius > 0:
            raise ValueError("hvp_radius must be positive")


@dataclass(frozen=True)
class IlState:
    arch: np.ndarray
    enc: dict          # (m, k) -> encoder weights
    head: dict         # (m, k) -> head weights


def init_state(model: MixedModel, schedule: IlSchedule, seed: int, shared_init: bool = False) -> IlState:
    """Random weights per (round, learner); ``shared_init`` reuses one draw."""
    rng = np.random.default_rng(seed)
    enc, head = {}, {}
    base = int(rng.integers(0, 2**31))
    for i, key in enumerate(schedule.order):
        s = base if shared_init else int(rng.integers(0, 2**31))
        enc[key] = model.encoder_layout.init(s)
        head[key] = model.head_layout.init(s + 1)
    return IlState(np.zeros(model.arch_size), enc, head)


def learner_loss(model: MixedModel, A, W, H, x, y):
    return ad.mean(ad.cross_entropy(classify(model, H, encode(model, A, W, x)), y))


class IlGraphs:
    def __init__(self, model: MixedModel):
        self.model = model
        A, W, H = ad.leaf("A"), ad.leaf("W"), ad.leaf("H")
        loss = learner_loss(model, A, W, H, ad.leaf("x"), ad.leaf("y"))
        ga, gw, gh = ad.grad(loss, [A, W, H])
        self.loss = ad.Graph({"loss": loss, "grad:A": ga, "grad:W": gw, "grad:H": gh})

    def eval(self, A, W, H, batch, names=("loss", "grad:A", "grad:W", "grad:H")):
        try:
            return self.loss.run({"A": A, "W": W, "H": H, "x": batch[0], "y": batch[1]}, list(names))
        except NonFiniteResult as exc:
            raise NonFiniteGradient(str(exc)) from None


def _hvp(fn, at, direction, radius=HVP_RADIUS):
    try:
        return finite_diff_hvp(fn, at, direction, radius)
    except ZeroDirection:
        return np.zeros_like(np.asarray(fn(at)))


def il_first_stage_step(graphs: IlGraphs, A, W, H, train_batch, lr: float) -> np.ndarray:
    return W - lr * graphs.eval(A, W, H, train_batch, ["grad:W"])["grad:W"]


def il_chain_step(graphs: IlGraphs, A, W, H, prev, train_batch, lr: float, lam: float) -> np.ndarray:
    """One proximal step pulling W towards the previous stage's weights."""
    if prev is None:
        raise MissingPredecessor("chain step needs the previous stage's weights")
    g = graphs.eval(A, W, H, train_batch, ["grad:W"])["grad:W"]
    return W - lr * g - 2.0 * lr * lam * (W - prev)


def il_head_step(graphs: IlGraphs, A, W, H, train_batch, lr: float) -> np.ndarray:
    return H - lr * graphs.eval(A, W, H, train_batch, ["grad:H"])["grad:H"]


@dataclass
class Chain:
    wbar: dict
    hbar: dict
    trace: list = field(default_factory=list)


def run_chain(graphs: IlGraphs, state: IlState, schedule: IlSchedule, cfg: IlConfig, batches) -> Chain:
    """Evaluate every Wbar_k^(m) in round-major order, then the final heads."""
    wbar, hbar, trace = {}, {}, []
    A = state.arch
    for m, k in schedule.order:
        tr = batches[f"train{k}"]
        prev_key = schedule.predecessor(m, k)
        try:
            if prev_key is None:
                wbar[(m, k)] = il_first_stage_step(graphs, A, state.enc[(m, k)], state.head[(m, k)],
                                                   tr, cfg.lr_weights)
            else:
                wbar[(m, k)] = il_chain_step(graphs, A, state.enc[(m, k)], state.head[(m, k)],
                                             wbar[prev_key], tr, cfg.lr_weights, schedule.lam)
        except SkillearnError as exc:
            exc.stage = (m, k)
            raise
        trace.append((m, k))
    M = schedule.M
    for k in range(1, schedule.K + 1):
        hbar[(M, k)] = il_head_step(graphs, A, state.enc[(M, k)], state.head[(M, k)],
                                    batches[f"train{k}"], cfg.lr_heads)
    return Chain(wbar, hbar, trace)


def validation_loss(graphs: IlGraphs, A, chain: Chain, schedule: IlSchedule, batches) -> float:
    M = schedule.M
    return float(np.sum([graphs.eval(A, chain.wbar[(M, k)], chain.hbar[(M, k)], batches[f"val{k}"],
                                     ["loss"])["loss"] for k in range(1, schedule.K + 1)]))


def il_arch_grad(graphs: IlGraphs, state: IlState, schedule: IlSchedule, cfg: IlConfig, batches,
                 chain: Chain | None = None) -> np.ndarray:
    """d/dA of the summed validation losses through the whole chain."""
    chain = chain or run_chain(graphs, state, schedule, cfg, batches)
    A, M, eta, eta_h = state.arch, schedule.M, cfg.lr_weights, cfg.lr_heads
    total = np.zeros_like(A)
    adj = {key: np.zeros_like(w) for key, w in chain.wbar.items()}

    def grad_a(W, H, batch):
        return graphs.eval(A, W, H, batch, ["grad:A"])["grad:A"]

    for k in range(1, schedule.K + 1):
        res = graphs.eval(A, chain.wbar[(M, k)], chain.hbar[(M, k)], batches[f"val{k}"])
        total += res["grad:A"]
        adj[(M, k)] += res["grad:W"]
        if eta_h:
            W, H, tr = state.enc[(M, k)], state.head[(M, k)], batches[f"train{k}"]
            total -= eta_h * _hvp(lambda h: grad_a(W, h, tr), H, res["grad:H"], cfg.hvp_radius)

    for m, k in reversed(schedule.order):
        u = adj[(m, k)]
        W, H, tr = state.enc[(m, k)], state.head[(m, k)], batches[f"train{k}"]
        if eta:
            total -= eta * _hvp(lambda w: grad_a(w, H, tr), W, u, cfg.hvp_radius)
        prev = schedule.predecessor(m, k)
        if prev is not None and schedule.lam:
            adj[prev] = adj[prev] + 2.0 * eta * schedule.lam * u
    return total


def il_arch_step(graphs, state, schedule, cfg, batches, chain=None) -> np.ndarray:
    return state.arch - cfg.lr_arch * il_arch_grad(graphs, state, schedule, cfg, batches, chain)


def _commit(graphs: IlGraphs, state: IlState, arch, schedule: IlSchedule, cfg: IlConfig, batches) -> IlState:
    moved = replace(state, arch=arch)
    chain = run_chain(graphs, moved, schedule, cfg, batches)
    heads = {key: il_head_step(graphs, arch, state.enc[key], state.head[key],
                               batches[f"train{key[1]}"], cfg.lr_heads) for key in schedule.order}
    return IlState(arch, chain.wbar, heads)


def il_iterate(graphs: IlGraphs, state: IlState, schedule: IlSchedule, cfg: IlConfig, batches,
               trace: list | None = None) -> tuple[IlState, dict]:
    """Chain all stages, step the heads, step A, then commit the weight steps at the new A."""
    chain = run_chain(graphs, state, schedule, cfg, batches)
    if trace is not None:
        trace.extend(chain.trace)
    g = il_arch_grad(graphs, state, schedule, cfg, batches, chain)
    arch = state.arch - cfg.lr_arch * g

    metrics = {}
    dists = []
    for m, k in schedule.order:
        metrics[f"train_loss:m{m}k{k}"] = float(graphs.eval(
            state.arch, state.enc[(m, k)], state.head[(m, k)], batches[f"train{k}"], ["loss"])["loss"])
        prev = schedule.predecessor(m, k)
        if prev is not None:
            d = float(np.linalg.norm(chain.wbar[(m, k)] - chain.wbar[prev]))
            metrics[f"dist:m{m}k{k}"] = d
            dists.append(d)
    M = schedule.M
    for k in range(1, schedule.K + 1):
        metrics[f"val_loss:k{k}"] = float(graphs.eval(
            state.arch, chain.wbar[(M, k)], chain.hbar[(M, k)], batches[f"val{k}"], ["loss"])["loss"])
    metrics["mean_distance"] = float(np.mean(dists)) if dists else 0.0
    metrics["gradnorm_arch"] = float(np.linalg.norm(g))
    return _commit(graphs, state, arch, schedule, cfg, batches), metrics


def jl_schedule(K: int) -> IlSchedule:
    """Joint learning: one round, no proximal coupling."""
    return IlSchedule(K, 1, 0.0)


def jl_iterate(graphs: IlGraphs, state: IlState, K: int, cfg: IlConfig, batches) -> tuple[IlState, dict]:
    """One simultaneous weight step for every learner, then one step of A.

    Runs through the interleaving machinery with a single round and the
    proximal term switched off, so each learner's step ignores the others.
    """
    return il_iterate(graphs, state, jl_schedule(K), cfg, batches)


# ---------------------------------------------------------------- engine form


def il_problem(model: MixedModel, state: IlState, schedule: IlSchedule, cfg: IlConfig) -> engine.MLOProblem:
    groups = [engine.ParamGroup("A", "architecture", state.arch, cfg.lr_arch)]
    for m, k in schedule.order:
        groups.append(engine.ParamGroup(f"W{m}_{k}", "encoder", state.enc[(m, k)], cfg.lr_weights))
        groups.append(engine.ParamGroup(f"H{m}_{k}", "head", state.head[(m, k)], cfg.lr_heads))

    stages = []
    for i, (m, k) in enumerate(schedule.order, start=1):
        w, h = f"W{m}_{k}", f"H{m}_{k}"

        def loss(env, w=w, h=h, k=k):
            return learner_loss(model, env["A"], env[w], env[h], *env.data(f"train{k}"))

        prev = schedule.predecessor(m, k)
        inter = None
        if prev is not None:
            pw = f"W{prev[0]}_{prev[1]}"

            def inter(env, w=w, pw=pw):
                return ad.sqnorm(env[w] - env[pw])

        stages.append(engine.StageSpec(i, (w, h), ("A",), loss, inter,
                                       schedule.lam if inter else 0.0, label=f"m{m}k{k}"))

    M = schedule.M

    def val(env):
        total = None
        for k in range(1, schedule.K + 1):
            term = learner_loss(model, env["A"], env[f"W{M}_{k}"], env[f"H{M}_{k}"], *env.data(f"val{k}"))
            total = term if total is None else total + term
        return total

    validation = engine.ValidationSpec(("A",), (engine.ValidationTerm("val", val),))
    return engine.build_problem(groups, stages, validation)


def state_from_values(values: dict, schedule: IlSchedule) -> IlState:
    return IlState(values["A"], {key: values[f"W{key[0]}_{key[1]}"] for key in schedule.order},
                   {key: values[f"H{key[0]}_{key[1]}"] for key in schedule.order})
