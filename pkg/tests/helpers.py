"""Shared builders for the test suite."""
import numpy as np

from skillearn import ad
from skillearn.nas import one_hot

KINK = 1e-4


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-8))


def labelled(rng, n, dim=2, classes=2):
    x = rng.normal(size=(n, dim))
    y = (x[:, 0] + 0.3 * x[:, 1] > 0).astype(int) % classes
    return x, one_hot(y, classes)


class FlatGraphs:
    """Stand-in for the IL graphs with zero task gradients."""

    def eval(self, A, W, H, batch, names=()):
        return {"loss": 0.0, "grad:A": np.zeros_like(A), "grad:W": np.zeros_like(W), "grad:H": np.zeros_like(H)}


REPORT: list[str] = []


def report(number: int, ok: bool, detail: str) -> str:
    """Record one acceptance line; printed in the terminal summary."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {detail}"
    REPORT.append(line)
    print(line)
    return line


def random_graph(seed: int):
    """A random expression using every primitive, with bindings in [-2, 2].

    Returns ``(graph, bindings, param_names)``; bindings are redrawn until
    no relu input lies within 1e-4 of the kink.
    """
    rng = np.random.default_rng(seed)
    n, d, h, c = (int(rng.integers(lo, hi)) for lo, hi in ((2, 6), (1, 5), (1, 6), (2, 5)))
    x, w1, b1, w2, flat = (ad.leaf(k) for k in ("x", "w1", "b1", "w2", "flat"))
    y = ad.leaf("y")
    z1 = x @ w1 + b1
    coef = rng.uniform(0.5, 1.5, size=3)
    parts = [float(coef[0]) * ad.tanh(z1), float(coef[1]) * ad.relu(z1), -(float(coef[2]) * ad.sigmoid(z1))]
    order = rng.permutation(3)
    h1 = parts[order[0]] + parts[order[1]]
    h1 = h1 - ad.neg(parts[order[2]]) if rng.random() < 0.5 else ad.sub(h1, ad.neg(parts[order[2]]))
    logits = h1 @ w2 + ad.take(flat, 0, (c,))
    ce = ad.mean(ad.cross_entropy(logits, y))
    p, lp = ad.softmax(logits), ad.log_softmax(logits)
    axis = int(rng.integers(0, 2))
    extra = ad.mean(ad.sum(p * ad.transpose(ad.transpose(lp)), axis=axis, keepdims=bool(rng.random() < 0.5)))
    e = ad.exp(ad.neg(ad.div(ad.sqnorm(w1), 1.0 + ad.sqnorm(b1))))
    lg = ad.sum(ad.log(1.0 + ad.sigmoid(z1)))
    mm = ad.sum(ad.matmul(ad.transpose(w2), ad.transpose(w1)))
    loss = ce + extra + e + 0.1 * lg + 0.1 * mm
    graph = ad.Graph({"loss": loss, "z1": z1})
    labels = rng.integers(0, c, size=n)
    while True:
        b = {"x": rng.uniform(-2, 2, (n, d)), "w1": rng.uniform(-2, 2, (d, h)), "b1": rng.uniform(-2, 2, h),
             "w2": rng.uniform(-2, 2, (h, c)), "flat": rng.uniform(-2, 2, c), "y": one_hot(labels, c)}
        if np.min(np.abs(graph.run(b, ["z1"])["z1"])) > KINK:
            return graph, b, ["x", "w1", "b1", "w2", "flat"]


def engine_gap_lpt(seed: int, radius: float = 0.01) -> float:
    """Max abs difference after one iteration: generic solver vs hand-written LPT."""
    from dataclasses import replace
    from skillearn import engine, lpt
    from skillearn.config import RunConfig
    from skillearn.gradcheck import lpt_instance

    models, lcfg, state, batch = lpt_instance(RunConfig(seed=seed))
    lcfg = replace(lpt.LptConfig(), hvp_radius=radius)
    hand, _ = lpt.lpt_iterate(lpt.LptGraphs(models, lcfg), state, batch)
    problem = lpt.lpt_problem(models, state, lcfg)
    new, _ = engine.CompiledProblem(problem).iterate(problem.values, batch)
    h = hand.as_dict()
    return max(float(np.max(np.abs(new[k] - h[k]))) for k in h)


def engine_gap_il(seed: int, radius: float = 0.01) -> float:
    """Max abs difference after one iteration: generic solver vs hand-written IL."""
    from dataclasses import replace
    from skillearn import engine, il
    from skillearn.config import RunConfig
    from skillearn.gradcheck import il_instance

    model, schedule, _, state, batch = il_instance(RunConfig(seed=seed))
    icfg = replace(il.IlConfig(), hvp_radius=radius)
    hand, _ = il.il_iterate(il.IlGraphs(model), state, schedule, icfg, batch)
    problem = il.il_problem(model, state, schedule, icfg)
    new, _ = engine.CompiledProblem(problem).iterate(problem.values, batch)
    ref = il.state_from_values(new, schedule)
    gaps = [np.max(np.abs(ref.arch - hand.arch))]
    gaps += [np.max(np.abs(ref.enc[k] - hand.enc[k])) for k in schedule.order]
    gaps += [np.max(np.abs(ref.head[k] - hand.head[k])) for k in schedule.order]
    return float(max(gaps))
