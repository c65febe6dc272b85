"""Multi-level optimization problems solved by one-step unrolling.

A problem is an ordered list of learning stages plus a validation stage. Each
stage's argmin is replaced by one gradient step on its objective; later
stages and the validation objective see those approximations in place of the
optimal weights. The remaining (never-active) groups are then updated with
the gradient of the validation objective, taken through the whole unrolled
chain by symbolic differentiation.

Loss functions are *builders*: callables taking an :class:`Env` and returning
an :mod:`skillearn.ad` node. The env hands out leaves for the current stage's
own parameters, approximations for earlier stages' outputs, and data leaves.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ad
from .errors import (ActiveSupportingOverlap, NonFiniteGradient, NonFiniteResult, OrphanGroup,
                     ProblemSpecError, ReuseAfterLearned, SkillearnError)

ROLES = ("architecture", "weights", "head", "encoder", "creator", "executor")
SENSES = ("minimize", "maximize")


@dataclass(frozen=True)
class ParamGroup:
    name: str
    role: str
    value: np.ndarray
    lr: float

    def __post_init__(self):
        if self.role not in ROLES:
            raise ProblemSpecError(f"unknown role {self.role!r}", group=self.name)
        # zero is allowed so that a group can be frozen
        if not (self.lr >= 0 and np.isfinite(self.lr)):
            raise ProblemSpecError(f"learning rate of {self.name!r} must be >= 0", group=self.name)


Builder = Callable[["Env"], ad.Node]


@dataclass(frozen=True)
class StageSpec:
    index: int
    active: tuple[str, ...]
    supporting: tuple[str, ...]
    loss: Builder
    interaction: Builder | None = None
    tradeoff: float = 0.0
    datasets: tuple[str, ...] = ()
    label: str = ""

    @property
    def tag(self):
        return self.label or f"stage{self.index}"


@dataclass(frozen=True)
class ValidationTerm:
    name: str
    build: Builder
    weight: float = 1.0
    # one sense for every group, or a per-group mapping (min-max problems)
    sense: str | Mapping[str, str] = "minimize"

    def sign(self, group: str) -> float:
        s = self.sense if isinstance(self.sense, str) else self.sense.get(group, "minimize")
        if s not in SENSES:
            raise ProblemSpecError(f"term {self.name!r}: bad sense {s!r}", group=group)
        return 1.0 if s == "minimize" else -1.0


@dataclass(frozen=True)
class ValidationSpec:
    remaining: tuple[str, ...]
    terms: tuple[ValidationTerm, ...]
    datasets: tuple[str, ...] = ()

    @classmethod
    def simple(cls, remaining, loss: Builder, interaction: Builder | None = None,
               tradeoff: float = 0.0, loss_sense="minimize", interaction_sense="minimize",
               datasets=()):
        terms = [ValidationTerm("loss", loss, 1.0, loss_sense)]
        if interaction is not None:
            terms.append(ValidationTerm("interaction", interaction, tradeoff, interaction_sense))
        return cls(tuple(remaining), tuple(terms), tuple(datasets))


@dataclass(frozen=True)
class MLOProblem:
    stages: tuple[StageSpec, ...]
    validation: ValidationSpec
    groups: Mapping[str, ParamGroup]

    @property
    def values(self) -> dict[str, np.ndarray]:
        return {n: np.asarray(g.value, dtype=np.float64) for n, g in self.groups.items()}

    @property
    def lrs(self) -> dict[str, float]:
        return {n: g.lr for n, g in self.groups.items()}


def build_problem(groups: Sequence[ParamGroup], stages: Sequence[StageSpec],
                  validation: ValidationSpec) -> MLOProblem:
    """Validate the stage structure and return the problem."""
    by_name: dict[str, ParamGroup] = {}
    for g in groups:
        if g.name in by_name:
            raise ProblemSpecError(f"duplicate group {g.name!r}", group=g.name)
        by_name[g.name] = g
    stages = tuple(stages)
    for i, st in enumerate(stages):
        if st.index != i + 1:
            raise ProblemSpecError(f"stage indices must run 1..K, got {st.index} at position {i + 1}",
                                   stage=st.index)
        if st.tradeoff < 0:
            raise ProblemSpecError("stage tradeoff must be >= 0", stage=st.index)
    learned: dict[str, int] = {}
    for st in stages:
        for name in (*st.active, *st.supporting):
            if name not in by_name:
                raise ProblemSpecError(f"stage {st.index} references unknown group {name!r}",
                                       group=name, stage=st.index)
        both = set(st.active) & set(st.supporting)
        if both:
            g = sorted(both)[0]
            raise ActiveSupportingOverlap(
                f"group {g!r} is both active and supporting in stage {st.index}",
                group=g, stage=st.index)
        for name in (*st.active, *st.supporting):
            if name in learned:
                raise ReuseAfterLearned(
                    f"group {name!r} was learned in stage {learned[name]} and reappears in stage {st.index}",
                    group=name, stage=st.index)
        for name in st.active:
            learned[name] = st.index
    val = validation
    for name in val.remaining:
        if name not in by_name:
            raise ProblemSpecError(f"validation references unknown group {name!r}", group=name)
        if name in learned:
            raise ReuseAfterLearned(
                f"group {name!r} was learned in stage {learned[name]} and is listed as remaining",
                group=name, stage="validation")
    never_active = set(by_name) - set(learned)
    if set(val.remaining) != never_active:
        missing = sorted(never_active - set(val.remaining))
        if missing:
            referenced = {n for st in stages for n in st.supporting}
            g = missing[0]
            if g not in referenced:
                raise OrphanGroup(f"group {g!r} is not referenced by any stage", group=g)
            raise ProblemSpecError(f"group {g!r} is never active but not a remaining group",
                                   group=g, stage="validation")
    for term in val.terms:
        for name in val.remaining:
            term.sign(name)
    return MLOProblem(stages, val, dict(by_name))


class Env:
    """What a loss builder may see while one stage is being built."""

    def __init__(self, stage, leaves: Mapping[str, ad.Node], approx: Mapping[str, ad.Node],
                 data_leaves: dict, hook=None):
        self.stage = stage
        self._leaves = leaves
        self._approx = approx
        self._data = data_leaves
        self._hook = hook

    def __getitem__(self, name: str) -> ad.Node:
        if name in self._leaves:
            kind, node = "param", self._leaves[name]
        elif name in self._approx:
            kind, node = "approx", self._approx[name]
        else:
            raise ProblemSpecError(f"{self.stage}: group {name!r} is not visible here",
                                   group=name, stage=self.stage)
        if self._hook is not None:
            self._hook(self.stage, name, kind)
        return node

    def data(self, name: str) -> tuple[ad.Node, ad.Node]:
        if name not in self._data:
            self._data[name] = (ad.leaf(f"{name}.x"), ad.leaf(f"{name}.y"))
        return self._data[name]


class CompiledProblem:
    """The unrolled graph of a problem, built once and re-evaluated per batch.

    ``hook(stage, name, kind)`` is called whenever a builder reads a group;
    ``kind`` is ``"param"`` for a current value or ``"approx"`` for an
    earlier stage's one-step approximation.
    """

    def __init__(self, problem: MLOProblem, hook=None):
        self.problem = problem
        self.hook = hook
        data: dict = {}
        leaves = {n: ad.leaf(n) for n in problem.groups}
        lrs = problem.lrs
        approx: dict[str, ad.Node] = {}
        self.stage_of: dict[str, int] = {}
        outputs: dict[str, ad.Node] = {}
        for st in problem.stages:
            visible = {n: leaves[n] for n in (*st.active, *st.supporting)}
            env = Env(st.tag, visible, dict(approx), data, hook)
            obj = st.loss(env)
            if st.interaction is not None and st.tradeoff != 0.0:
                obj = obj + st.tradeoff * st.interaction(env)
            outputs[f"obj:{st.tag}"] = obj
            grads = ad.grad(obj, [leaves[n] for n in st.active])
            for n, d in zip(st.active, grads):
                approx[n] = leaves[n] - lrs[n] * d
                self.stage_of[n] = st.index
                outputs[f"approx:{n}"] = approx[n]
        val = problem.validation
        env = Env("validation", {n: leaves[n] for n in val.remaining}, dict(approx), data, hook)
        terms = {t.name: t.build(env) for t in val.terms}
        for t in val.terms:
            outputs[f"term:{t.name}"] = terms[t.name]
        for n in val.remaining:
            total = None
            for t in val.terms:
                (d,) = ad.grad(terms[t.name], [leaves[n]])
                d = (t.weight * t.sign(n)) * d
                total = d if total is None else total + d
            outputs[f"hg:{n}"] = total if total is not None else ad.zeros_like(leaves[n])
        self.data_names = tuple(sorted(data))
        self.graph = ad.Graph(outputs)
        self._stage_graphs: dict = {}

    # -- evaluation helpers

    def bindings(self, values: Mapping[str, np.ndarray], batch: Mapping[str, tuple]) -> dict:
        b = {n: values[n] for n in self.problem.groups}
        for name in self.data_names:
            x, y = batch[name]
            b[f"{name}.x"], b[f"{name}.y"] = x, y
        return b

    def _run(self, names, values, batch):
        return self.graph.run(self.bindings(values, batch), names)

    def approximations(self, values, batch) -> dict[str, np.ndarray]:
        names = [f"approx:{n}" for n in self.stage_of]
        res = self._run(names, values, batch)
        return {n: res[f"approx:{n}"] for n in self.stage_of}

    def terms(self, values, batch) -> dict[str, float]:
        names = [f"term:{t.name}" for t in self.problem.validation.terms]
        res = self._run(names, values, batch)
        return {t.name: float(res[f"term:{t.name}"]) for t in self.problem.validation.terms}

    def validation_objective(self, values, batch, group: str | None = None) -> float:
        """Weighted sum of validation terms.

        With ``group`` given, each term is signed by that group's sense, giving
        the quantity the group descends. Without it, terms are summed unsigned
        except that terms with a single ``"maximize"`` sense are negated.
        """
        t = self.terms(values, batch)
        total = 0.0
        for term in self.problem.validation.terms:
            if group is not None:
                s = term.sign(group)
            else:
                s = -1.0 if term.sense == "maximize" else 1.0
            total += s * term.weight * t[term.name]
        return total

    def hypergradients(self, values, batch) -> dict[str, np.ndarray]:
        rem = self.problem.validation.remaining
        try:
            res = self._run([f"hg:{n}" for n in rem], values, batch)
        except NonFiniteResult as exc:
            raise NonFiniteGradient(str(exc)) from None
        return {n: res[f"hg:{n}"] for n in rem}

    def hyper_step(self, values, batch) -> dict[str, np.ndarray]:
        hg = self.hypergradients(values, batch)
        lrs = self.problem.lrs
        return {n: np.asarray(values[n]) - lrs[n] * g for n, g in hg.items()}

    def iterate(self, values, batch):
        """One solver iteration: hyper step on remaining groups, then commit.

        Returns the new values and a dict of scalar metrics measured before
        the update.
        """
        hg = self.hypergradients(values, batch)
        terms = self.terms(values, batch)
        lrs = self.problem.lrs
        new = dict(values)
        for n, g in hg.items():
            new[n] = np.asarray(values[n]) - lrs[n] * g
        new.update(self.approximations(new, batch))
        metrics = {f"term:{k}": v for k, v in terms.items()}
        metrics["val_objective"] = self.validation_objective(values, batch)
        for n, g in hg.items():
            metrics[f"gradnorm:{n}"] = float(np.linalg.norm(g))
        return new, metrics

    def stage_graph(self, index: int) -> ad.Graph:
        """Standalone graph of one stage with earlier approximations as leaves."""
        if index in self._stage_graphs:
            return self._stage_graphs[index]
        st = self.problem.stages[index - 1]
        lrs = self.problem.lrs
        earlier = [n for n, k in self.stage_of.items() if k < index]
        leaves = {n: ad.leaf(n) for n in (*st.active, *st.supporting)}
        approx = {n: ad.leaf(f"approx:{n}") for n in earlier}
        data: dict = {}
        env = Env(st.tag, leaves, approx, data, self.hook)
        obj = st.loss(env)
        if st.interaction is not None and st.tradeoff != 0.0:
            obj = obj + st.tradeoff * st.interaction(env)
        grads = ad.grad(obj, [leaves[n] for n in st.active])
        outs = {"loss": obj}
        for n, d in zip(st.active, grads):
            outs[f"new:{n}"] = leaves[n] - lrs[n] * d
        g = ad.Graph(outs)
        self._stage_graphs[index] = g
        return g


def one_step_update(compiled: CompiledProblem, index: int, values, batch,
                    earlier: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """One gradient step on stage ``index``'s objective for its active groups.

    ``earlier`` supplies the approximations of earlier stages' outputs that the
    stage's objective reads.
    """
    g = compiled.stage_graph(index)
    st = compiled.problem.stages[index - 1]
    b = {n: values[n] for n in (*st.active, *st.supporting)}
    for n, v in (earlier or {}).items():
        b[f"approx:{n}"] = v
    for name in g.leaves:
        if name.endswith(".x") or name.endswith(".y"):
            ds, part = name.rsplit(".", 1)
            b[name] = batch[ds][0 if part == "x" else 1]
    try:
        res = g.run(b)
    except NonFiniteResult as exc:
        raise NonFiniteGradient(str(exc)) from None
    return {n: res[f"new:{n}"] for n in st.active}


def validation_objective(compiled: CompiledProblem, values, batch, group=None) -> float:
    return compiled.validation_objective(values, batch, group)


def hyper_step(compiled: CompiledProblem, values, batch) -> dict[str, np.ndarray]:
    return compiled.hyper_step(values, batch)


def sample_batches(data: Mapping[str, tuple], batch_size, rng: np.random.Generator) -> dict:
    """One minibatch per dataset, drawn without replacement, in sorted name order.

    ``batch_size`` may be an int, ``None`` (whole dataset) or a per-name mapping.
    """
    out = {}
    for name in sorted(data):
        x, y = data[name]
        bs = batch_size.get(name) if isinstance(batch_size, Mapping) else batch_size
        n = len(x)
        if bs is None or bs >= n:
            out[name] = (x, y)
        else:
            idx = rng.choice(n, size=bs, replace=False)
            out[name] = (x[idx], y[idx])
    return out


@dataclass
class MetricsRecord:
    iteration: int
    values: dict[str, float]
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        return {"iteration": self.iteration, **self.values}


def solve(problem: MLOProblem, data: Mapping[str, tuple], iterations: int, seed: int = 0,
          batch_size=None, compiled: CompiledProblem | None = None, values=None):
    """Run the unrolled solver for a fixed iteration budget.

    Returns the final group values and one :class:`MetricsRecord` per iteration.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    compiled = compiled or CompiledProblem(problem)
    values = dict(problem.values if values is None else values)
    rng = np.random.default_rng(seed)
    records = []
    for it in range(1, iterations + 1):
        t0 = time.perf_counter()
        batch = sample_batches(data, batch_size, rng)
        try:
            values, metrics = compiled.iterate(values, batch)
        except SkillearnError as exc:
            exc.iteration = it
            exc.args = (f"iteration {it}: {exc.args[0] if exc.args else ''}",) + exc.args[1:]
            raise
        records.append(MetricsRecord(it, metrics, time.perf_counter() - t0))
    return values, records
