"""Learning by passing tests.

A testee (architecture A, weights W) is challenged by a tester made of a data
encoder E, a target-task executor X and a test creator C. The creator scores
each test-bank example with a selection probability f(d) = sigmoid(C . E(d)).

Per iteration, with one-step approximations

    W' = W - xi_ee * grad_W L(A, W, D_ee_tr)
    E', X' = (E, X) - xi * grad [L(E, X, D_er_tr) + gamma * L(E, X, sigma(C, E, D_b))]

the architecture descends and the creator ascends

    J(A, C) = L(A, W', sigma(C, E', D_b)) / |sigma(C, E', D_b)| - lambda * L(E', X', D_er_val)

Second-order products are approximated by central differences of first-order
gradients, with perturbation size 0.01 / ||direction||.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ad, engine
from .ad import HVP_RADIUS, finite_diff_hvp
from .errors import (DivisionDegenerate, LengthMismatch, NonFiniteGradient, NonFiniteResult,
                     SkillearnError, ZeroDirection)
from .nas import Layout, MixedModel, classify, dense_layout, encode, split_testee

ABLATIONS = ("full", "difficulty-only", "test-only")
CARDINALITY_FLOOR = 1e-8


@dataclass(frozen=True)
class LptConfig:
    lam: float = 1.0
    gamma: float = 1.0
    ablation: str = "full"
    include_direct_creator_path: bool = True
    lr_arch: float = 3e-4
    lr_weights: float = 0.025
    lr_encoder: float = 0.025
    lr_executor: float = 0.025
    lr_creator: float = 3e-4
    # distance of the finite-difference probes in second-order products
    hvp_radius: float = HVP_RADIUS

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation mode {self.ablation!r}")
        for k in ("lam", "gamma", "lr_arch", "lr_weights", "lr_encoder", "lr_executor", "lr_creator"):
            v = getattr(self, k)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and >= 0, got {v}")
        if not self.hvp_radius > 0:
            raise ValueError("hvp_radius must be positive")

    @property
    def stage2_weights(self) -> tuple[float, float]:
        """Coefficients of the tester's training loss and of its test loss."""
        if self.ablation == "test-only":
            return 0.0, 1.0
        return 1.0, self.gamma


@dataclass(frozen=True)
class LptModels:
    testee: MixedModel
    hidden: int

    @property
    def in_dim(self):
        return self.testee.in_dim

    @property
    def n_classes(self):
        return self.testee.n_classes

    @property
    def encoder_layout(self) -> Layout:
        return dense_layout("enc", self.in_dim, self.hidden)

    @property
    def executor_layout(self) -> Layout:
        return dense_layout("exe", self.hidden, self.n_classes)

    @property
    def creator_layout(self) -> Layout:
        return dense_layout("cre", self.hidden, 1)

    def init_state(self, seed: int, ablation: str = "full", bank_size: int = 0) -> "LptState":
        rng = np.random.default_rng(seed)
        s = [int(x) for x in rng.integers(0, 2**31, size=5)]
        t = self.testee
        state = LptState(
            arch=np.zeros(t.arch_size),
            weights=t.testee_layout.init(s[0]),
        )
        if ablation == "difficulty-only":
            return replace(state, scalars=np.full(bank_size, 0.5))
        return replace(state, encoder=self.encoder_layout.init(s[1]),
                       executor=self.executor_layout.init(s[2]),
                       creator=self.creator_layout.init(s[3]))


@dataclass(frozen=True)
class LptState:
    arch: np.ndarray
    weights: np.ndarray
    encoder: np.ndarray | None = None
    executor: np.ndarray | None = None
    creator: np.ndarray | None = None
    # difficulty-only ablation: one selection scalar per bank example
    scalars: np.ndarray | None = None

    def as_dict(self):
        return {k: v for k, v in (("A", self.arch), ("W", self.weights), ("E", self.encoder),
                                  ("X", self.executor), ("C", self.creator), ("S", self.scalars))
                if v is not None}


@dataclass(frozen=True)
class RelaxedTest:
    bank_ids: tuple
    probs: np.ndarray

    def __post_init__(self):
        if len(self.bank_ids) != len(self.probs):
            raise LengthMismatch("bank ids and probabilities differ in length")


# ---------------------------------------------------------------- model pieces


def testee_rows(m: LptModels, A, W, x, y):
    enc, head = split_testee(m.testee, W)
    return ad.cross_entropy(classify(m.testee, head, encode(m.testee, A, enc, x)), y)


def tester_features(m: LptModels, E, x):
    w = m.encoder_layout.unpack(E)
    return ad.tanh(x @ w["enc.w"] + w["enc.b"])


def tester_rows(m: LptModels, E, X, x, y):
    w = m.executor_layout.unpack(X)
    return ad.cross_entropy(tester_features(m, E, x) @ w["exe.w"] + w["exe.b"], y)


def selection(m: LptModels, C, E, x):
    w = m.creator_layout.unpack(C)
    return ad.sum(ad.sigmoid(tester_features(m, E, x) @ w["cre.w"] + w["cre.b"]), axis=-1)


def stage2_objective(m: LptModels, cfg: LptConfig, E, X, C, tr, bank):
    w_tr, w_sel = cfg.stage2_weights
    sel = ad.mean(selection(m, C, E, bank[0]) * tester_rows(m, E, X, *bank))
    if w_tr == 0.0:
        return w_sel * sel
    return w_tr * ad.mean(tester_rows(m, E, X, *tr)) + w_sel * sel


# ---------------------------------------------------------------- relaxed tests


def select_probabilities(models: LptModels, tester, bank_x, bank_ids=None) -> RelaxedTest:
    """Selection probability of each bank example under the tester's creator."""
    bank_x = np.asarray(bank_x, dtype=np.float64)
    if len(bank_x) == 0:
        raise LengthMismatch("bank batch is empty")
    E, C = ad.leaf("E"), ad.leaf("C")
    g = ad.Graph({"f": selection(models, C, E, ad.leaf("x"))})
    f = g.run({"E": tester["E"], "C": tester["C"], "x": bank_x})["f"]
    ids = tuple(range(len(f))) if bank_ids is None else tuple(bank_ids)
    return RelaxedTest(ids, f)


def relaxed_weighted_loss(losses, test: RelaxedTest) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != np.shape(test.probs):
        raise LengthMismatch(f"{losses.shape} losses vs {np.shape(test.probs)} probabilities")
    return float(np.dot(test.probs, losses))


def test_cardinality(test: RelaxedTest) -> float:
    return float(np.sum(test.probs))


def normalized_interaction(losses, test: RelaxedTest) -> float:
    card = test_cardinality(test)
    if card < CARDINALITY_FLOOR:
        raise DivisionDegenerate(f"test cardinality {card} is below {CARDINALITY_FLOOR}")
    return relaxed_weighted_loss(losses, test) / card


# ---------------------------------------------------------------- compiled pieces


class LptGraphs:
    """First-order graphs used by the hand-derived update rules."""

    def __init__(self, models: LptModels, cfg: LptConfig):
        self.models, self.cfg = models, cfg
        m = models
        A, W, E, X, C, S = (ad.leaf(n) for n in "AWEXCS")
        tr = (ad.leaf("ee_train.x"), ad.leaf("ee_train.y"))
        er_tr = (ad.leaf("er_train.x"), ad.leaf("er_train.y"))
        er_val = (ad.leaf("er_val.x"), ad.leaf("er_val.y"))
        bank = (ad.leaf("bank.x"), ad.leaf("bank.y"))

        l_tr = ad.mean(testee_rows(m, A, W, *tr))
        g_w, g_a = ad.grad(l_tr, [W, A])
        self.testee_train = ad.Graph({"loss": l_tr, "grad:W": g_w, "grad:A": g_a})

        rows = testee_rows(m, A, W, *bank)
        f = S if cfg.ablation == "difficulty-only" else selection(m, C, E, bank[0])
        num, den = ad.sum(f * rows), ad.sum(f)
        inter = num / den
        outs = {"num": num, "den": den, "inter": inter, "rows": rows, "f": f}
        outs["grad_I:A"], outs["grad_I:W"] = ad.grad(inter, [A, W])
        if cfg.ablation == "difficulty-only":
            (outs["grad_I:S"],) = ad.grad(inter, [S])
        else:
            outs["grad_N:C"], outs["grad_N:E"] = ad.grad(num, [C, E])
            outs["grad_D:C"], outs["grad_D:E"] = ad.grad(den, [C, E])
        self.interaction = ad.Graph(outs)

        if cfg.ablation != "difficulty-only":
            s2 = stage2_objective(m, cfg, E, X, C, er_tr, bank)
            ge, gx, gc = ad.grad(s2, [E, X, C])
            self.stage2 = ad.Graph({"loss": s2, "grad:E": ge, "grad:X": gx, "grad:C": gc})
            l_val = ad.mean(tester_rows(m, E, X, *er_val))
            ve, vx = ad.grad(l_val, [E, X])
            self.tester_val = ad.Graph({"loss": l_val, "grad:E": ve, "grad:X": vx})


def _bind(batch, *names):
    b = {}
    for n in names:
        b[f"{n}.x"], b[f"{n}.y"] = batch[n]
    return b


@dataclass
class Unrolled:
    """One-step approximations and the quantities derived from them."""

    w_next: np.ndarray
    e_next: np.ndarray | None
    x_next: np.ndarray | None
    train_loss: float
    inter: dict = field(default_factory=dict)


def stage1_weight_step(graphs: LptGraphs, state: LptState, batch) -> np.ndarray:
    """W' = W - xi_ee * grad_W L(A, W, D_ee_tr); A is not touched."""
    res = _run_grad(graphs.testee_train, {"A": state.arch, "W": state.weights,
                                          **_bind(batch, "ee_train")}, ["grad:W"])
    return state.weights - graphs.cfg.lr_weights * res["grad:W"]


def stage2_tester_step(graphs: LptGraphs, state: LptState, batch, creator=None):
    """One step of E and X on the tester's training plus test loss; C stays frozen."""
    c = state.creator if creator is None else creator
    res = _run_grad(graphs.stage2, {"E": state.encoder, "X": state.executor, "C": c,
                                    **_bind(batch, "er_train", "bank")}, ["grad:E", "grad:X"])
    return (state.encoder - graphs.cfg.lr_encoder * res["grad:E"],
            state.executor - graphs.cfg.lr_executor * res["grad:X"])


def _run_grad(graph, bindings, names):
    try:
        return graph.run(bindings, names)
    except NonFiniteResult as exc:
        raise NonFiniteGradient(str(exc)) from None


def unroll(graphs: LptGraphs, state: LptState, batch) -> Unrolled:
    res = graphs.testee_train.run({"A": state.arch, "W": state.weights, **_bind(batch, "ee_train")})
    w_next = state.weights - graphs.cfg.lr_weights * res["grad:W"]
    e_next = x_next = None
    if graphs.cfg.ablation != "difficulty-only":
        e_next, x_next = stage2_tester_step(graphs, state, batch)
    u = Unrolled(w_next, e_next, x_next, float(res["loss"]))
    b = {"A": state.arch, "W": w_next, **_bind(batch, "bank")}
    if graphs.cfg.ablation == "difficulty-only":
        b["S"] = state.scalars
    else:
        b["C"], b["E"] = state.creator, e_next
    try:
        u.inter = graphs.interaction.run(b)
    except NonFiniteResult as exc:
        den = graphs.interaction.run(b, ["den"])["den"] if "den" in graphs.interaction.outputs else None
        if den is not None and float(den) < CARDINALITY_FLOOR:
            raise DivisionDegenerate(f"test cardinality {float(den)} is below {CARDINALITY_FLOOR}")
        raise NonFiniteGradient(str(exc)) from None
    if float(u.inter["den"]) < CARDINALITY_FLOOR:
        raise DivisionDegenerate(f"test cardinality {float(u.inter['den'])} is below {CARDINALITY_FLOOR}")
    return u


def _hvp(fn, at, direction, radius=HVP_RADIUS):
    """Finite-difference product, defined as zero along a zero direction."""
    try:
        return finite_diff_hvp(fn, at, direction, radius)
    except ZeroDirection:
        return np.zeros_like(np.asarray(fn(at)))


def arch_hypergrad(graphs: LptGraphs, state: LptState, batch, u: Unrolled | None = None) -> np.ndarray:
    """Gradient of the normalized test loss w.r.t. A through W' = W - xi grad_W L_tr."""
    u = u or unroll(graphs, state, batch)
    direct = u.inter["grad_I:A"]
    xi = graphs.cfg.lr_weights
    if xi == 0.0:
        return direct
    v = u.inter["grad_I:W"]
    tr = _bind(batch, "ee_train")

    def grad_a(w):
        return _run_grad(graphs.testee_train, {"A": state.arch, "W": w, **tr}, ["grad:A"])["grad:A"]

    return direct - xi * _hvp(grad_a, state.weights, v, graphs.cfg.hvp_radius)


def _creator_jvp(graphs: LptGraphs, state: LptState, batch):
    """Return callables v -> (dE'/dC) v and v -> (dX'/dC) v."""
    cfg = graphs.cfg
    base = {"E": state.encoder, "X": state.executor, "C": state.creator,
            **_bind(batch, "er_train", "bank")}

    def grad_c(**over):
        return _run_grad(graphs.stage2, {**base, **over}, ["grad:C"])["grad:C"]

    def through_e(v):
        if cfg.lr_encoder == 0.0:
            return np.zeros_like(state.creator)
        return -cfg.lr_encoder * _hvp(lambda e: grad_c(E=e), state.encoder, v, cfg.hvp_radius)

    def through_x(v):
        if cfg.lr_executor == 0.0:
            return np.zeros_like(state.creator)
        return -cfg.lr_executor * _hvp(lambda x: grad_c(X=x), state.executor, v, cfg.hvp_radius)

    return through_e, through_x


def creator_hypergrad(graphs: LptGraphs, state: LptState, batch, u: Unrolled | None = None) -> np.ndarray:
    """Ascent direction for C on J = N/D - lambda * L(E', X', D_er_val).

    N and D are the weighted test loss and the test cardinality. Their
    C-derivatives are assembled with the quotient rule; paths through E' and
    X' use finite-difference mixed products. Without the direct creator path
    the numerator is differentiated through E' only.
    """
    cfg = graphs.cfg
    u = u or unroll(graphs, state, batch)
    it = u.inter
    if cfg.ablation == "difficulty-only":
        raise ValueError("difficulty-only mode has no creator; use scalar_hypergrad")
    num, den = float(it["num"]), float(it["den"])
    if den < CARDINALITY_FLOOR:
        raise DivisionDegenerate(f"test cardinality {den} is below {CARDINALITY_FLOOR}")
    through_e, through_x = _creator_jvp(graphs, state, batch)

    d_num = through_e(it["grad_N:E"])
    if cfg.include_direct_creator_path:
        d_num = d_num + it["grad_N:C"]
    d_den = it["grad_D:C"] + through_e(it["grad_D:E"])
    d_inter = (d_num * den - num * d_den) / (den * den)

    if cfg.lam == 0.0:
        return d_inter
    val = _run_grad(graphs.tester_val, {"E": u.e_next, "X": u.x_next, **_bind(batch, "er_val")},
                    ["grad:E", "grad:X"])
    d_val = through_e(val["grad:E"]) + through_x(val["grad:X"])
    return d_inter - cfg.lam * d_val


def scalar_hypergrad(graphs: LptGraphs, state: LptState, batch, u: Unrolled | None = None):
    """Ascent direction for the per-example selection scalars (difficulty-only)."""
    u = u or unroll(graphs, state, batch)
    return u.inter["grad_I:S"]


def tester_val_loss(graphs: LptGraphs, e, x, batch) -> float:
    return float(graphs.tester_val.run({"E": e, "X": x, **_bind(batch, "er_val")}, ["loss"])["loss"])


def objective(graphs: LptGraphs, state: LptState, batch) -> float:
    """The unrolled validation objective J(A, C) (S instead of C when ablated)."""
    u = unroll(graphs, state, batch)
    j = float(u.inter["inter"])
    if graphs.cfg.ablation != "difficulty-only" and graphs.cfg.lam != 0.0:
        j -= graphs.cfg.lam * tester_val_loss(graphs, u.e_next, u.x_next, batch)
    return j


def lpt_iterate(graphs: LptGraphs, state: LptState, batch) -> tuple[LptState, dict]:
    """One iteration: descend A, ascend C, step E and X, step W."""
    cfg = graphs.cfg
    try:
        step = "unroll"
        u = unroll(graphs, state, batch)
        step = "arch"
        g_a = arch_hypergrad(graphs, state, batch, u)
        step = "creator"
        if cfg.ablation == "difficulty-only":
            g_c = scalar_hypergrad(graphs, state, batch, u)
        else:
            g_c = creator_hypergrad(graphs, state, batch, u)
    except SkillearnError as exc:
        exc.step = step
        raise
    arch = state.arch - cfg.lr_arch * g_a
    metrics = {
        "interaction": float(u.inter["inter"]),
        "cardinality": float(u.inter["den"]),
        "testee_train_loss": u.train_loss,
        "gradnorm_arch": float(np.linalg.norm(g_a)),
        "gradnorm_creator": float(np.linalg.norm(g_c)),
    }
    if cfg.ablation == "difficulty-only":
        scalars = np.clip(state.scalars + cfg.lr_creator * g_c, 0.0, 1.0)
        new = replace(state, arch=arch, scalars=scalars)
    else:
        metrics["tester_val_loss"] = tester_val_loss(graphs, u.e_next, u.x_next, batch)
        creator = state.creator + cfg.lr_creator * g_c
        enc, exe = stage2_tester_step(graphs, state, batch, creator=creator)
        new = replace(state, arch=arch, creator=creator, encoder=enc, executor=exe)
    weights = stage1_weight_step(graphs, replace(new, weights=state.weights), batch)
    return replace(new, weights=weights), metrics


# ---------------------------------------------------------------- engine form


def lpt_problem(models: LptModels, state: LptState, cfg: LptConfig) -> engine.MLOProblem:
    """The same three-level problem expressed for the generic unrolled solver."""
    if cfg.ablation == "difficulty-only":
        raise ValueError("the engine form covers the full and test-only modes")
    m = models
    w_tr, w_sel = cfg.stage2_weights
    groups = [
        engine.ParamGroup("A", "architecture", state.arch, cfg.lr_arch),
        engine.ParamGroup("W", "weights", state.weights, cfg.lr_weights),
        engine.ParamGroup("E", "encoder", state.encoder, cfg.lr_encoder),
        engine.ParamGroup("X", "executor", state.executor, cfg.lr_executor),
        engine.ParamGroup("C", "creator", state.creator, cfg.lr_creator),
    ]

    def testee_loss(env):
        return ad.mean(testee_rows(m, env["A"], env["W"], *env.data("ee_train")))

    def tester_loss(env):
        return ad.mean(tester_rows(m, env["E"], env["X"], *env.data("er_train")))

    def test_loss(env):
        bank = env.data("bank")
        return ad.mean(selection(m, env["C"], env["E"], bank[0]) * tester_rows(m, env["E"], env["X"], *bank))

    def stage2_loss(env):
        return tester_loss(env) if w_tr else 0.0 * test_loss(env)

    def interaction(env):
        bank = env.data("bank")
        f = selection(m, env["C"], env["E"], bank[0])
        return ad.sum(f * testee_rows(m, env["A"], env["W"], *bank)) / ad.sum(f)

    def tester_val(env):
        return ad.mean(tester_rows(m, env["E"], env["X"], *env.data("er_val")))

    stages = [
        engine.StageSpec(1, ("W",), ("A",), testee_loss, label="testee-weights"),
        engine.StageSpec(2, ("E", "X"), ("C",), stage2_loss, test_loss, w_sel, label="tester"),
    ]
    terms = [engine.ValidationTerm("interaction", interaction, 1.0, {"A": "minimize", "C": "maximize"})]
    if cfg.lam:
        terms.append(engine.ValidationTerm("tester_val", tester_val, cfg.lam, "minimize"))
    validation = engine.ValidationSpec(("A", "C"), tuple(terms))
    return engine.build_problem(groups, stages, validation)
