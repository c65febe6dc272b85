import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillearn import ad, nas
from skillearn.nas import DiscreteArch, MixedModel, derive_architecture, mixed_forward, train_discrete

from helpers import rel_err


def test_uniform_identity_zero_halves_input():
    m = MixedModel(3, 3, 2, (("identity", "zero"),))
    x = np.arange(6.0).reshape(2, 3)
    out = mixed_forward(m, np.zeros(2), np.zeros(0), x)
    assert np.allclose(out, x / 2, atol=1e-15)


def test_saturated_logit_selects_one_op():
    m = MixedModel.uniform(3, 3, 2, n_layers=1)
    enc = m.encoder_layout.init(1)
    x = np.random.default_rng(0).normal(size=(5, 3))
    for i, op in enumerate(m.layer_ops[0]):
        a = np.zeros(m.arch_size)
        a[i] = 1e6
        disc = DiscreteArch((op,), (i,))
        sub = disc.model(3, 3, 2)
        ref = mixed_forward(sub, np.zeros(1), nas.restrict_weights(m, disc, enc), x)
        assert np.max(np.abs(mixed_forward(m, a, enc, x) - ref)) < 1e-9


def _straight_line(m, arch, enc, head, x):
    w = m.encoder_layout.unpack_array(enc)
    h = np.tanh(x @ w["stem.w"] + w["stem.b"]) if m.has_stem else x
    acts = {"linear": lambda z: z, "linear-tanh": np.tanh, "linear-relu": lambda z: np.maximum(z, 0),
            "linear-sigmoid": lambda z: 1 / (1 + np.exp(-z))}
    for li, ((start, n), ops) in enumerate(zip(m.arch_slices(), m.layer_ops)):
        a = arch[start:start + n]
        p = np.exp(a - a.max()) / np.exp(a - a.max()).sum()
        out = np.zeros_like(h)
        for oi, op in enumerate(ops):
            if op == "identity":
                out += p[oi] * h
            elif op != "zero":
                out += p[oi] * acts[op](h @ w[f"l{li}.o{oi}.w"] + w[f"l{li}.o{oi}.b"])
        h = out
    hw = m.head_layout.unpack_array(head)
    return h @ hw["head.w"] + hw["head.b"]


def test_forward_matches_straight_line_evaluation():
    rng = np.random.default_rng(3)
    m = MixedModel.uniform(3, 4, 3, n_layers=2)
    arch, enc = rng.normal(size=m.arch_size), rng.normal(size=m.encoder_layout.size)
    head, x = rng.normal(size=m.head_layout.size), rng.normal(size=(7, 3))
    got = mixed_forward(m, arch, enc, x, head)
    assert np.max(np.abs(got - _straight_line(m, arch, enc, head, x))) < 1e-12


def test_arch_gradient_matches_oracle():
    rng = np.random.default_rng(5)
    m = MixedModel.uniform(2, 3, 2, n_layers=2)
    A, W, H = ad.leaf("A"), ad.leaf("W"), ad.leaf("H")
    loss = ad.sum(ad.tanh(nas.classify(m, H, nas.encode(m, A, W, ad.leaf("x")))))
    g = ad.Graph(loss)
    b = {"A": rng.normal(size=m.arch_size), "W": rng.normal(size=m.encoder_layout.size),
         "H": rng.normal(size=m.head_layout.size), "x": rng.normal(size=(4, 2))}
    exact = ad.backward_grad(g, b, ["A"])["A"]
    fd = ad.finite_diff_grad(lambda bb: ad.forward_eval(g, bb), b, "A")
    assert rel_err(exact, fd) < 1e-6


def test_derive_examples():
    m = MixedModel(2, 2, 2, (("identity", "zero", "linear"),))
    assert derive_architecture(m, [0.1, 0.9, 0.3]).ops == ("zero",)
    m2 = MixedModel(2, 2, 2, (("identity", "zero"),))
    assert derive_architecture(m2, [0.5, 0.5]).ops == ("identity",)


@settings(max_examples=40, deadline=None)
@given(logits=st.lists(st.floats(-50, 50), min_size=12, max_size=12), shift=st.floats(-100, 100))
def test_derive_is_shift_invariant(logits, shift):
    m = MixedModel.uniform(2, 2, 2, n_layers=2)
    a = np.array(logits)
    shifted = a.copy()
    shifted[:6] += shift
    # only compare when the shift cannot create or break ties by rounding
    for layer in (a[:6], a[6:]):
        top = np.sort(layer)[-2:]
        if top[1] - top[0] < 1e-6:
            return
    assert derive_architecture(m, a) == derive_architecture(m, shifted)


@settings(max_examples=40, deadline=None)
@given(logits=st.lists(st.floats(-30, 30), min_size=6, max_size=6))
def test_mixture_weights_normalized(logits):
    m = MixedModel.uniform(2, 2, 2, n_layers=1)
    (p,) = nas.mixture_weights(m, logits)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)


def test_mixture_weights_open_interval():
    m = MixedModel.uniform(2, 2, 2, n_layers=1)
    (p,) = nas.mixture_weights(m, np.random.default_rng(0).normal(size=6))
    assert np.all((p > 0) & (p < 1))


def test_arch_text_roundtrip():
    d = DiscreteArch(("linear-tanh", "identity"), (3, 0))
    text = d.to_text()
    assert text == "layer=1 op=linear-tanh\nlayer=2 op=identity\n"
    assert DiscreteArch.from_text(text) == d
    with pytest.raises(ValueError):
        DiscreteArch.from_text("layer=2 op=linear\n")


def _blobs(rng, n):
    y = np.arange(n) % 2
    x = np.where(y[:, None] == 0, -2.0, 2.0) + rng.normal(0, 0.3, size=(n, 2))
    return x, y


def test_zero_epochs_is_chance():
    rng = np.random.default_rng(0)
    tr, te = _blobs(rng, 40), _blobs(rng, 40)
    res = train_discrete(DiscreteArch(("linear",), (2,)), tr, te, in_dim=2, width=2, n_classes=2, epochs=0)
    assert 0.35 <= res.test_acc <= 0.65


def test_separable_blobs_trained():
    rng = np.random.default_rng(1)
    tr, te = _blobs(rng, 100), _blobs(rng, 100)
    arch = DiscreteArch(("linear", "linear-tanh"), (2, 3))
    res = train_discrete(arch, tr, te, in_dim=2, width=2, n_classes=2, epochs=200, seed=3)
    assert res.test_acc >= 0.95
    again = train_discrete(arch, tr, te, in_dim=2, width=2, n_classes=2, epochs=200, seed=3)
    assert again.test_acc == res.test_acc and np.array_equal(again.encoder, res.encoder)


def test_bad_op_rejected():
    with pytest.raises(ValueError):
        MixedModel(2, 2, 2, (("conv3x3",),))
