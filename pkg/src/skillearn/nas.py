"""Toy differentiable architecture search space.

Each mixed layer maps width -> width and outputs a softmax(a)-weighted sum of
its candidate ops. An optional linear+tanh stem maps the input to ``width``
when the two differ. Classification heads are separate parameter groups so
that learners can own them.

Parameters live in flat float vectors; :class:`Layout` slices them into
named matrices, either as graph nodes or as numpy views.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .errors import NonFiniteResult, ShapeMismatch

OPS = ("identity", "zero", "linear", "linear-tanh", "linear-relu", "linear-sigmoid")
WEIGHTED = frozenset({"linear", "linear-tanh", "linear-relu", "linear-sigmoid"})
_ACT = {"linear": None, "linear-tanh": ad.tanh, "linear-relu": ad.relu, "linear-sigmoid": ad.sigmoid}


@dataclass(frozen=True)
class Layout:
    """Named shapes packed back to back in one flat vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return int(sum(int(np.prod(s)) for _, s in self.entries))

    def offsets(self):
        pos = 0
        for name, shape in self.entries:
            yield name, pos, shape
            pos += int(np.prod(shape))

    def unpack(self, flat: ad.Node) -> dict[str, ad.Node]:
        return {name: ad.take(flat, start, shape) for name, start, shape in self.offsets()}

    def unpack_array(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat)
        if flat.shape != (self.size,):
            raise ShapeMismatch(f"expected flat vector of {self.size}, got {flat.shape}")
        return {name: flat[s:s + int(np.prod(shape))].reshape(shape)
                for name, s, shape in self.offsets()}

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(parts[n], dtype=np.float64).ravel()
                               for n, _ in self.entries]) if self.entries else np.zeros(0)

    def init(self, seed: int, scale: float = 1.0, zero_bias: bool = True) -> np.ndarray:
        """Fan-in scaled normal weights; biases zero."""
        rng = np.random.default_rng(seed)
        parts = {}
        for name, shape in self.entries:
            if len(shape) == 1 and zero_bias:
                parts[name] = np.zeros(shape)
            else:
                parts[name] = rng.normal(0.0, scale / np.sqrt(shape[0]), size=shape)
        return self.pack(parts)


def dense_layout(prefix: str, fan_in: int, fan_out: int) -> Layout:
    return Layout(((f"{prefix}.w", (fan_in, fan_out)), (f"{prefix}.b", (fan_out,))))


@dataclass(frozen=True)
class MixedModel:
    in_dim: int
    width: int
    n_classes: int
    layer_ops: tuple[tuple[str, ...], ...] = field(default=(OPS, OPS))

    def __post_init__(self):
        for ops in self.layer_ops:
            if not ops:
                raise ShapeMismatch("a mixed layer needs at least one op")
            bad = [o for o in ops if o not in OPS]
            if bad:
                raise ValueError(f"unknown ops {bad}")

    @classmethod
    def uniform(cls, in_dim, width, n_classes, n_layers=2, ops=OPS):
        return cls(in_dim, width, n_classes, tuple(tuple(ops) for _ in range(n_layers)))

    @property
    def n_layers(self) -> int:
        return len(self.layer_ops)

    @property
    def has_stem(self) -> bool:
        return self.in_dim != self.width

    @property
    def arch_size(self) -> int:
        return int(sum(len(o) for o in self.layer_ops))

    def arch_slices(self):
        pos = 0
        for ops in self.layer_ops:
            yield pos, len(ops)
            pos += len(ops)

    @property
    def encoder_layout(self) -> Layout:
        entries = []
        if self.has_stem:
            entries += dense_layout("stem", self.in_dim, self.width).entries
        for li, ops in enumerate(self.layer_ops):
            for oi, op in enumerate(ops):
                if op in WEIGHTED:
                    entries += dense_layout(f"l{li}.o{oi}", self.width, self.width).entries
        return Layout(tuple(entries))

    @property
    def head_layout(self) -> Layout:
        return dense_layout("head", self.width, self.n_classes)

    @property
    def testee_layout(self) -> Layout:
        """Encoder and head weights in one group (the single-learner case)."""
        return Layout(self.encoder_layout.entries + self.head_layout.entries)


@dataclass(frozen=True)
class DiscreteArch:
    ops: tuple[str, ...]
    choices: tuple[int, ...]

    def to_text(self) -> str:
        return "".join(f"layer={i + 1} op={op}\n" for i, op in enumerate(self.ops))

    @classmethod
    def from_text(cls, text: str) -> "DiscreteArch":
        ops = []
        for line in text.splitlines():
            if not line.strip():
                continue
            fields = dict(tok.split("=", 1) for tok in line.split())
            if int(fields["layer"]) != len(ops) + 1 or fields["op"] not in OPS:
                raise ValueError(f"bad architecture line {line!r}")
            ops.append(fields["op"])
        return cls(tuple(ops), tuple(OPS.index(o) for o in ops))

    def model(self, in_dim, width, n_classes) -> MixedModel:
        return MixedModel(in_dim, width, n_classes, tuple((o,) for o in self.ops))


def mixture_weights(model: MixedModel, arch: np.ndarray) -> list[np.ndarray]:
    arch = np.asarray(arch, dtype=np.float64)
    out = []
    for start, n in model.arch_slices():
        a = arch[start:start + n]
        e = np.exp(a - a.max())
        out.append(e / e.sum())
    return out


# ---------------------------------------------------------------- graph builders


def encode(model: MixedModel, arch: ad.Node, enc: ad.Node, x: ad.Node) -> ad.Node:
    w = model.encoder_layout.unpack(enc)
    h = x
    if model.has_stem:
        h = ad.tanh(h @ w["stem.w"] + w["stem.b"])
    for li, ((start, n), ops) in enumerate(zip(model.arch_slices(), model.layer_ops)):
        mix = ad.softmax(ad.take(arch, start, (n,)))
        out = None
        for oi, op in enumerate(ops):
            if op == "zero":
                continue
            if op == "identity":
                y = h
            else:
                y = h @ w[f"l{li}.o{oi}.w"] + w[f"l{li}.o{oi}.b"]
                if _ACT[op] is not None:
                    y = _ACT[op](y)
            term = ad.take(mix, oi, ()) * y
            out = term if out is None else out + term
        h = out if out is not None else ad.zeros_like(h)
    return h


def classify(model: MixedModel, head: ad.Node, feats: ad.Node) -> ad.Node:
    w = model.head_layout.unpack(head)
    return feats @ w["head.w"] + w["head.b"]


def split_testee(model: MixedModel, weights: ad.Node):
    """Split a combined encoder+head vector into its two parts."""
    ne = model.encoder_layout.size
    return ad.take(weights, 0, (ne,)), ad.take(weights, ne, (model.head_layout.size,))


def mixed_forward(model: MixedModel, arch, enc, x, head=None) -> np.ndarray:
    """Numeric forward pass; returns features, or logits when ``head`` is given."""
    a, e, xx = ad.leaf("arch"), ad.leaf("enc"), ad.leaf("x")
    out = encode(model, a, e, xx)
    bind = {"arch": arch, "enc": enc, "x": x}
    if head is not None:
        hh = ad.leaf("head")
        out = classify(model, hh, out)
        bind["head"] = head
    return ad.Graph({"out": out}).run(bind)["out"]


def derive_architecture(model: MixedModel, arch) -> DiscreteArch:
    """Per-layer argmax of the logits; ties go to the lowest op index."""
    arch = np.asarray(arch, dtype=np.float64)
    choices = []
    for start, n in model.arch_slices():
        choices.append(int(np.argmax(arch[start:start + n])))
    ops = tuple(model.layer_ops[i][c] for i, c in enumerate(choices))
    return DiscreteArch(ops, tuple(OPS.index(o) for o in ops))


def restrict_weights(model: MixedModel, arch: DiscreteArch, enc: np.ndarray) -> np.ndarray:
    """Encoder weights of the discrete model cut out of the mixed model's weights."""
    disc = arch.model(model.in_dim, model.width, model.n_classes)
    src = model.encoder_layout.unpack_array(enc)
    parts = {}
    if model.has_stem:
        parts["stem.w"], parts["stem.b"] = src["stem.w"], src["stem.b"]
    for li, op in enumerate(arch.ops):
        if op in WEIGHTED:
            oi = model.layer_ops[li].index(op)
            parts[f"l{li}.o0.w"] = src[f"l{li}.o{oi}.w"]
            parts[f"l{li}.o0.b"] = src[f"l{li}.o{oi}.b"]
    return disc.encoder_layout.pack(parts)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass
class DiscreteResult:
    arch: DiscreteArch
    encoder: np.ndarray
    head: np.ndarray
    test_acc: float
    train_loss: float


def train_discrete(arch: DiscreteArch, train, test, *, in_dim: int, width: int, n_classes: int,
                   epochs: int = 500, seed: int = 0, lr: float = 0.1) -> DiscreteResult:
    """Train the discretized model from scratch (full-batch gradient descent).

    ``train`` and ``test`` are ``(x, labels)`` pairs. The head starts at zero,
    so an untrained model predicts class 0 everywhere.
    """
    model = arch.model(in_dim, width, n_classes)
    xtr, ytr = np.asarray(train[0], float), one_hot(train[1], n_classes)
    xte, lte = np.asarray(test[0], float), np.asarray(test[1], int)

    a, e, h, x, y = (ad.leaf(n) for n in ("arch", "enc", "head", "x", "y"))
    logits = classify(model, h, encode(model, a, e, x))
    loss = ad.mean(ad.cross_entropy(logits, y))
    g = ad.Graph({"loss": loss, "logits": logits}).with_gradients(["enc", "head"])
    pred = ad.Graph({"logits": logits})

    enc = model.encoder_layout.init(seed)
    head = np.zeros(model.head_layout.size)
    arch_v = np.zeros(model.arch_size)
    last = float("nan")
    for _ in range(epochs):
        res = g.run({"arch": arch_v, "enc": enc, "head": head, "x": xtr, "y": ytr})
        last = float(res["loss"])
        if not np.isfinite(last):
            raise NonFiniteResult("discrete training loss is not finite")
        enc = enc - lr * res["grad:enc"]
        head = head - lr * res["grad:head"]
    out = pred.run({"arch": arch_v, "enc": enc, "head": head, "x": xte,
                    "y": np.zeros((len(xte), n_classes))})["logits"]
    acc = float(np.mean(np.argmax(out, axis=1) == lte)) if len(lte) else float("nan")
    return DiscreteResult(arch, enc, head, acc, last)
