import numpy as np
import pytest

from skillearn import ad, engine, lpt
from skillearn.config import RunConfig
from skillearn.engine import (CompiledProblem, ParamGroup, StageSpec, ValidationSpec, ValidationTerm,
                              build_problem, one_step_update, solve)
from skillearn.errors import (ActiveSupportingOverlap, NonFiniteGradient, OrphanGroup, ProblemSpecError,
                              ReuseAfterLearned)
from skillearn.gradcheck import lpt_instance

from helpers import rel_err


def half_sq(node, target=0.0):
    return 0.5 * ad.sum((node - target) * (node - target))


def bilevel(eta=0.1, lr_a=0.5, t=3.0):
    """Inner 0.5 (w - a)^2, outer 0.5 (w' - t)^2."""
    groups = [ParamGroup("a", "architecture", np.array([0.0]), lr_a),
              ParamGroup("w", "weights", np.array([1.0]), eta)]
    stages = [StageSpec(1, ("w",), ("a",), lambda env: half_sq(env["w"] - env["a"]))]
    val = ValidationSpec.simple(("a",), lambda env: half_sq(env["w"], t))
    return build_problem(groups, stages, val)


def test_minimal_bilevel_is_valid():
    p = bilevel()
    assert len(p.stages) == 1 and p.validation.remaining == ("a",)


def test_reuse_after_learned():
    groups = [ParamGroup("a", "architecture", np.zeros(1), 1.0), ParamGroup("w", "weights", np.zeros(1), 1.0),
              ParamGroup("v", "weights", np.zeros(1), 1.0)]
    stages = [StageSpec(1, ("w",), ("a",), lambda env: half_sq(env["w"])),
              StageSpec(2, ("v",), ("w",), lambda env: half_sq(env["v"]))]
    with pytest.raises(ReuseAfterLearned) as exc:
        build_problem(groups, stages, ValidationSpec.simple(("a",), lambda env: half_sq(env["a"])))
    assert exc.value.group == "w" and exc.value.stage == 2
    assert exc.value.code == "reuse-after-learned"


def test_active_supporting_overlap():
    groups = [ParamGroup("a", "architecture", np.zeros(1), 1.0), ParamGroup("w", "weights", np.zeros(1), 1.0)]
    stages = [StageSpec(1, ("w",), ("w", "a"), lambda env: half_sq(env["w"]))]
    with pytest.raises(ActiveSupportingOverlap) as exc:
        build_problem(groups, stages, ValidationSpec.simple(("a",), lambda env: half_sq(env["a"])))
    assert exc.value.group == "w" and exc.value.stage == 1


def test_orphan_group():
    groups = [ParamGroup("a", "architecture", np.zeros(1), 1.0), ParamGroup("w", "weights", np.zeros(1), 1.0),
              ParamGroup("z", "head", np.zeros(1), 1.0)]
    stages = [StageSpec(1, ("w",), ("a",), lambda env: half_sq(env["w"]))]
    with pytest.raises(OrphanGroup) as exc:
        build_problem(groups, stages, ValidationSpec.simple(("a",), lambda env: half_sq(env["a"])))
    assert exc.value.group == "z"


def test_stage_indices_and_remaining():
    groups = [ParamGroup("a", "architecture", np.zeros(1), 1.0), ParamGroup("w", "weights", np.zeros(1), 1.0)]
    with pytest.raises(ProblemSpecError):
        build_problem(groups, [StageSpec(2, ("w",), ("a",), lambda env: half_sq(env["w"]))],
                      ValidationSpec.simple(("a",), lambda env: half_sq(env["a"])))
    with pytest.raises(ReuseAfterLearned):
        build_problem(groups, [StageSpec(1, ("w",), ("a",), lambda env: half_sq(env["w"]))],
                      ValidationSpec.simple(("a", "w"), lambda env: half_sq(env["a"])))
    with pytest.raises(ProblemSpecError):
        ParamGroup("a", "wizard", np.zeros(1), 1.0)
    with pytest.raises(ProblemSpecError):
        ParamGroup("a", "weights", np.zeros(1), -1.0)


def test_lpt_problem_accepted():
    models, lcfg, state, _ = lpt_instance(RunConfig(seed=0))
    p = lpt.lpt_problem(models, state, lcfg)
    assert len(p.stages) == 2
    assert set(p.validation.remaining) == {"A", "C"}
    senses = {t.name: (t.sign("A"), t.sign("C")) for t in p.validation.terms}
    assert senses["interaction"] == (1.0, -1.0)


def scalar_stage(loss, inter=None, gamma=0.0, w=1.0, eta=0.1):
    groups = [ParamGroup("a", "architecture", np.zeros(1), 0.0), ParamGroup("w", "weights", np.array([w]), eta)]
    stages = [StageSpec(1, ("w",), ("a",), loss, inter, gamma)]
    p = build_problem(groups, stages, ValidationSpec.simple(("a",), lambda env: half_sq(env["w"])))
    return CompiledProblem(p), p.values


def test_one_step_examples():
    cp, vals = scalar_stage(lambda env: half_sq(env["w"]))
    assert one_step_update(cp, 1, vals, {})["w"] == pytest.approx([0.9])
    cp, vals = scalar_stage(lambda env: half_sq(env["w"]), lambda env: half_sq(env["w"], 2.0), 1.0)
    assert one_step_update(cp, 1, vals, {})["w"] == pytest.approx([1.0])


def test_one_step_logistic_matches_hand_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 2))
    y = np.eye(2)[[0, 1, 1, 0]]
    w0 = rng.normal(size=(2, 2)).ravel()
    groups = [ParamGroup("a", "architecture", np.zeros(1), 0.0), ParamGroup("w", "weights", w0, 0.3)]

    def loss(env):
        xx, yy = env.data("d")
        return ad.mean(ad.cross_entropy(xx @ ad.take(env["w"], 0, (2, 2)) + 0.0 * ad.sum(env["a"]), yy))

    p = build_problem(groups, [StageSpec(1, ("w",), ("a",), loss)],
                      ValidationSpec.simple(("a",), lambda env: half_sq(env["w"])))
    got = one_step_update(CompiledProblem(p), 1, p.values, {"d": (x, y)})["w"]
    W = w0.reshape(2, 2)
    g = np.zeros((2, 2))
    for i in range(4):
        z = x[i] @ W
        pr = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        g += np.outer(x[i], pr - y[i]) / 4
    assert np.max(np.abs(got - (W - 0.3 * g).ravel())) <= 1e-12


def test_one_step_non_finite():
    cp, vals = scalar_stage(lambda env: ad.sum(ad.log(env["w"])), w=0.0)
    with pytest.raises(NonFiniteGradient):
        one_step_update(cp, 1, vals, {})


def test_validation_objective_by_hand():
    eta, t = 0.1, 3.0
    cp = CompiledProblem(bilevel(eta=eta, t=t))
    vals = {"a": np.array([0.5]), "w": np.array([1.0])}
    w1 = 1.0 - eta * (1.0 - 0.5)
    assert cp.validation_objective(vals, {}) == pytest.approx(0.5 * (w1 - t) ** 2, abs=1e-15)


def test_zero_tradeoff_is_plain_validation_loss():
    groups = [ParamGroup("a", "architecture", np.array([0.2]), 0.1), ParamGroup("w", "weights", np.array([1.0]), 0.1)]
    stages = [StageSpec(1, ("w",), ("a",), lambda env: half_sq(env["w"] - env["a"]))]
    loss = lambda env: half_sq(env["w"], 3.0)
    with_inter = ValidationSpec.simple(("a",), loss, lambda env: half_sq(env["a"]), tradeoff=0.0)
    plain = ValidationSpec.simple(("a",), loss)
    a = CompiledProblem(build_problem(groups, stages, with_inter))
    b = CompiledProblem(build_problem(groups, stages, plain))
    vals = {"a": np.array([0.2]), "w": np.array([1.0])}
    assert a.validation_objective(vals, {}) == b.validation_objective(vals, {})


def test_closed_form_hypergradient():
    eta, t = 0.1, 3.0
    cp = CompiledProblem(bilevel(eta=eta, t=t))
    a, w = 0.7, 1.3
    vals = {"a": np.array([a]), "w": np.array([w])}
    w1 = w - eta * (w - a)
    assert rel_err(cp.hypergradients(vals, {})["a"], [(w1 - t) * eta]) <= 1e-6


def test_constant_validation_leaves_remaining_unchanged():
    groups = [ParamGroup("a", "architecture", np.array([0.2]), 1.0), ParamGroup("w", "weights", np.array([1.0]), 0.1)]
    stages = [StageSpec(1, ("w",), ("a",), lambda env: half_sq(env["w"] - env["a"]))]
    p = build_problem(groups, stages, ValidationSpec.simple(("a",), lambda env: 0.0 * ad.sum(env["w"]) + 2.0))
    new = CompiledProblem(p).hyper_step(p.values, {})
    assert np.array_equal(new["a"], p.values["a"])


def test_hypergradient_matches_oracle_on_lpt():
    models, lcfg, state, batch = lpt_instance(RunConfig(seed=3))
    p = lpt.lpt_problem(models, state, lcfg)
    cp = CompiledProblem(p)
    vals = p.values
    hg = cp.hypergradients(vals, batch)
    for g in ("A", "C"):
        fd = ad.finite_diff_grad(lambda b: cp.validation_objective({**vals, g: b[g]}, batch, group=g),
                                 {g: vals[g]}, g)
        assert rel_err(hg[g], fd) <= 1e-4


def test_maximize_sense_negates_contribution():
    def build(sense):
        groups = [ParamGroup("a", "architecture", np.array([0.4]), 0.1),
                  ParamGroup("w", "weights", np.array([1.0]), 0.1)]
        stages = [StageSpec(1, ("w",), ("a",), lambda env: half_sq(env["w"] - env["a"]))]
        terms = (ValidationTerm("l", lambda env: half_sq(env["w"], 2.0)),
                 ValidationTerm("i", lambda env: ad.sum(ad.tanh(env["w"] * env["a"])), 0.7, sense))
        return CompiledProblem(build_problem(groups, stages, ValidationSpec(("a",), terms)))

    vals = {"a": np.array([0.4]), "w": np.array([1.0])}
    base = CompiledProblem(build_problem(
        [ParamGroup("a", "architecture", np.array([0.4]), 0.1), ParamGroup("w", "weights", np.array([1.0]), 0.1)],
        [StageSpec(1, ("w",), ("a",), lambda env: half_sq(env["w"] - env["a"]))],
        ValidationSpec.simple(("a",), lambda env: half_sq(env["w"], 2.0)))).hypergradients(vals, {})["a"]
    up = build("minimize").hypergradients(vals, {})["a"] - base
    down = build("maximize").hypergradients(vals, {})["a"] - base
    assert np.array_equal(up, -down)


def test_stage_order_access_pattern():
    seen = []
    models, lcfg, state, batch = lpt_instance(RunConfig(seed=0))
    p = lpt.lpt_problem(models, state, lcfg)
    CompiledProblem(p, hook=lambda stage, name, kind: seen.append((stage, name, kind)))
    order = {st.tag: st.index for st in p.stages}
    learned_at = {n: st.index for st in p.stages for n in st.active}
    for stage, name, kind in seen:
        if kind == "approx":
            assert stage == "validation" or learned_at[name] < order[stage]
    assert ("validation", "W", "approx") in seen and ("validation", "E", "approx") in seen
    assert not any(k == "approx" for s, _, k in seen if s != "validation")


def test_solve_zero_rates_keep_values():
    groups = [ParamGroup("a", "architecture", np.array([0.4]), 0.0), ParamGroup("w", "weights", np.array([1.0]), 0.0)]
    stages = [StageSpec(1, ("w",), ("a",), lambda env: half_sq(env["w"] - env["a"]))]
    p = build_problem(groups, stages, ValidationSpec.simple(("a",), lambda env: half_sq(env["w"], 3.0)))
    vals, recs = solve(p, {}, 10)
    assert all(np.array_equal(vals[k], p.values[k]) for k in vals) and len(recs) == 10


def test_solve_decreases_validation_and_is_deterministic():
    p = bilevel(eta=0.1, lr_a=0.5)
    v1, r1 = solve(p, {}, 200, seed=1)
    _, r2 = solve(p, {}, 200, seed=1)
    assert r1[-1].values["val_objective"] < r1[0].values["val_objective"]
    assert [r.as_dict() for r in r1] == [r.as_dict() for r in r2]
    with pytest.raises(ValueError):
        solve(p, {}, 0)


def test_solve_reports_iteration_on_failure():
    groups = [ParamGroup("a", "architecture", np.array([1.0]), 10.0), ParamGroup("w", "weights", np.array([1.0]), 0.1)]
    stages = [StageSpec(1, ("w",), ("a",), lambda env: half_sq(env["w"] - env["a"]))]
    p = build_problem(groups, stages, ValidationSpec.simple(("a",), lambda env: ad.sum(env["a"] * env["a"] * env["a"] * env["a"])))
    with pytest.raises(NonFiniteGradient) as exc:
        solve(p, {}, 50)
    assert exc.value.iteration >= 1 and "iteration" in str(exc.value)


def test_sample_batches_shared_and_sorted():
    rng = np.random.default_rng(0)
    data = {"b": (np.arange(10.0)[:, None], np.arange(10.0)[:, None]), "a": (np.zeros((3, 1)), np.zeros((3, 1)))}
    out = engine.sample_batches(data, 4, rng)
    assert list(out) == ["a", "b"] and len(out["b"][0]) == 4 and len(out["a"][0]) == 3
    assert np.array_equal(out["b"][0], out["b"][1])
