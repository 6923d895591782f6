"""A small reverse-mode differentiation kernel over float64 numpy arrays.

Only the operations the model needs are provided. Every op returns a ``Var``
that remembers its parents and a closure mapping the output gradient to parent
gradients. ``backward`` walks nodes in reverse creation order, which is a valid
topological order and makes gradient accumulation order deterministic.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

_ids = itertools.count()


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "order")

    def __init__(self, value, parents: tuple = (), backward_fn: Optional[Callable] = None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.order = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=float))


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node reachable from loss."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    nodes, seen, stack = [], set(), [loss]
    while stack:
        v = stack.pop()
        if id(v) in seen:
            continue
        seen.add(id(v))
        nodes.append(v)
        stack.extend(v.parents)
    nodes.sort(key=lambda v: v.order, reverse=True)
    loss.grad = np.ones_like(loss.value)
    for v in nodes:
        if v.backward_fn is None or v.grad is None:
            continue
        for p, g in zip(v.parents, v.backward_fn(v.grad)):
            if g is not None:
                p.grad = g if p.grad is None else p.grad + g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Var, b: Var) -> Var:
    return Var(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    return Var(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return Var(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    return Var(a.value * c, (a,), lambda g: (g * c,))


def total(a: Var) -> Var:
    shape = a.value.shape
    return Var(np.array(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return Var(a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a: Var) -> Var:
    x = a.value
    return Var(np.logaddexp(0.0, x), (a,), lambda g: (g * sigmoid_np(x),))


def sigmoid(a: Var) -> Var:
    s = sigmoid_np(a.value)
    return Var(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return Var(t, (a,), lambda g: (g * (1.0 - t * t),))


def linear(x: Var, w: Var, b: Var) -> Var:
    """x @ w + b for x of shape (n, i)."""
    xv, wv = x.value, w.value

    def bw(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return Var(xv @ wv + b.value, (x, w, b), bw)


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    vals = [x.value for x in xs]
    axis = axis % vals[0].ndim
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return Var(np.concatenate(vals, axis=axis), tuple(xs),
               lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs: Sequence[Var], axis: int = 0) -> Var:
    n = len(xs)
    return Var(np.stack([x.value for x in xs], axis=axis), tuple(xs),
               lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(x: Var, idx: np.ndarray) -> Var:
    """Rows ``x[idx]``; the backward pass scatter-adds in index order."""
    shape = x.value.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Var(x.value[idx], (x,), bw)


def segment_sum(x: Var, segments: np.ndarray, n: int) -> Var:
    """out[s] = sum of rows i with segments[i] == s, accumulated in row order."""
    out = np.zeros((n,) + x.value.shape[1:])
    np.add.at(out, segments, x.value)
    return Var(out, (x,), lambda g: (g[segments],))


# ---------------------------------------------------------------------------
# MLP


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


@dataclass(frozen=True)
class MLP:
    """Dense layers with ReLU between them; the last layer uses ``output``."""

    sizes: tuple[int, ...]
    output: str = "identity"  # or "softplus"

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        p = {}
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            p[f"W{i}"] = glorot(rng, a, b)
            p[f"b{i}"] = np.zeros(b)
        return p

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def __call__(self, weights: Mapping, x, pre_activation: bool = False) -> Var:
        x = as_var(x)
        if x.value.shape[-1] != self.sizes[0]:
            raise ValueError(f"MLP expects input dim {self.sizes[0]}, got {x.value.shape[-1]}")
        for i in range(self.n_layers):
            x = linear(x, as_var(weights[f"W{i}"]), as_var(weights[f"b{i}"]))
            if i < self.n_layers - 1:
                x = relu(x)
        if pre_activation or self.output == "identity":
            return x
        if self.output == "softplus":
            return softplus(x)
        raise ValueError(f"unknown output activation {self.output!r}")


def mlp_forward(m: MLP, weights: Mapping, x) -> Var:
    return m(weights, x)


# ---------------------------------------------------------------------------
# GRU


@dataclass(frozen=True)
class GRUCell:
    """GRU with gates packed along columns as [update z | reset r | candidate].

    z = sigma(x W_z + h U_z + b_z); r = sigma(x W_r + h U_r + b_r)
    c = tanh(x W_h + (r * h) U_h + b_h); h' = (1 - z) * h + z * c
    """

    input_dim: int
    hidden_dim: int

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        H = self.hidden_dim
        lim = 1.0 / np.sqrt(H)
        return {
            "W": np.concatenate([glorot(rng, self.input_dim, H) for _ in range(3)], axis=1),
            "U": rng.uniform(-lim, lim, size=(H, 3 * H)),
            "b": np.zeros(3 * H),
        }

    def check(self, x: np.ndarray, h: np.ndarray) -> None:
        if x.shape[-1] != self.input_dim or h.shape[-1] != self.hidden_dim or x.shape[0] != h.shape[0]:
            raise ValueError(f"GRU({self.input_dim}->{self.hidden_dim}) got x {x.shape}, h {h.shape}")


def _gru_fwd(W, U, b, x, h):
    H = h.shape[1]
    a = x @ W
    a += b
    zr = h @ U[:, : 2 * H]
    zr += a[:, : 2 * H]
    zr *= 0.5
    np.tanh(zr, out=zr)
    zr *= 0.5
    zr += 0.5
    z = zr[:, :H]
    r = zr[:, H:]
    rh = r * h
    c = rh @ U[:, 2 * H:]
    c += a[:, 2 * H:]
    np.tanh(c, out=c)
    out = c - h
    out *= z
    out += h
    return out, (x, h, z, r, rh, c)


def _gru_bwd(W, U, cache, g):
    x, h, z, r, rh, c = cache
    H = h.shape[1]
    ga = np.empty((g.shape[0], 3 * H))
    gac = ga[:, 2 * H:]
    np.multiply(g, z, out=gac)
    gac *= 1.0 - c * c
    gaz = ga[:, :H]
    np.multiply(g, c - h, out=gaz)
    gaz *= z * (1.0 - z)
    grh = gac @ U[:, 2 * H:].T
    gar = ga[:, H: 2 * H]
    np.multiply(grh, h, out=gar)
    gar *= r * (1.0 - r)
    gzr = ga[:, : 2 * H]
    gh = g * (1.0 - z)
    gh += grh * r
    gh += gzr @ U[:, : 2 * H].T
    gU = np.empty_like(U)
    np.matmul(h.T, gzr, out=gU[:, : 2 * H])
    np.matmul(rh.T, gac, out=gU[:, 2 * H:])
    return ga @ W.T, gh, x.T @ ga, gU, ga.sum(axis=0)


def gru_step(cell: GRUCell, weights: Mapping, x, h) -> Var:
    x, h = as_var(x), as_var(h)
    W, U, b = (as_var(weights[k]) for k in ("W", "U", "b"))
    cell.check(x.value, h.value)
    out, cache = _gru_fwd(W.value, U.value, b.value, x.value, h.value)

    def bw(g):
        gx, gh, gW, gU, gb = _gru_bwd(W.value, U.value, cache, g)
        return gx, gh, gW, gU, gb

    return Var(out, (x, h, W, U, b), bw)


def gru_scan(cell: GRUCell, weights: Mapping, xs, h0, steps: Sequence[tuple[int, int, np.ndarray]]) -> Var:
    """Run the cell along ragged sequences stored step-major.

    ``steps[k] = (start, stop, rows)``: at step k the sequences ``rows`` of h0 consume
    inputs ``xs[start:stop]`` (one per row, same order). Returns the emitted hidden
    state of every input row, shape (len(xs), hidden). Sequences not listed at a step
    keep their state.
    """
    xs, h0 = as_var(xs), as_var(h0)
    W, U, b = (as_var(weights[k]) for k in ("W", "U", "b"))
    Wv, Uv, bv = W.value, U.value, b.value
    if xs.value.shape[1] != cell.input_dim or h0.value.shape[1] != cell.hidden_dim:
        raise ValueError(f"GRU scan got x {xs.value.shape}, h {h0.value.shape}")
    h = h0.value.copy()
    out = np.empty((xs.value.shape[0], cell.hidden_dim))
    caches = []
    for start, stop, rows in steps:
        hn, cache = _gru_fwd(Wv, Uv, bv, xs.value[start:stop], h[rows])
        h[rows] = hn
        out[start:stop] = hn
        caches.append(cache)

    def bw(g):
        gx = np.zeros_like(xs.value)
        gh = np.zeros_like(h0.value)
        gW, gU, gb = np.zeros_like(Wv), np.zeros_like(Uv), np.zeros_like(bv)
        for (start, stop, rows), cache in zip(reversed(steps), reversed(caches)):
            go = g[start:stop] + gh[rows]
            dx, dh, dW, dU, db = _gru_bwd(Wv, Uv, cache, go)
            gx[start:stop] = dx
            gh[rows] = dh
            gW += dW
            gU += dU
            gb += db
        return gx, gh, gW, gU, gb

    return Var(out, (xs, h0, W, U, b), bw)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a nested {block: {name: array}} store."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[tuple[str, str], np.ndarray] = {}
        self.v: dict[tuple[str, str], np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for blk in sorted(params):
            for name in sorted(params[blk]):
                p = params[blk][name]
                g = grads[blk][name]
                if g.shape != p.shape:
                    raise ValueError(f"{blk}.{name}: gradient shape {g.shape} != {p.shape}")
                key = (blk, name)
                if key not in self.m:
                    self.m[key] = np.zeros_like(p)
                    self.v[key] = np.zeros_like(p)
                m = self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
                v = self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
                p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_update(state: Adam, params: dict, grads: dict) -> dict:
    state.step(params, grads)
    return params


# ---------------------------------------------------------------------------
# feature normalization


@dataclass(frozen=True)
class Normalizer:
    """Z-scores of flow average load and packet rate; other inputs pass through."""

    mean: tuple[float, float]
    std: tuple[float, float]

    def apply(self, avg_load: np.ndarray, packet_rate: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return ((avg_load - self.mean[0]) / self.std[0],
                (packet_rate - self.mean[1]) / self.std[1])

    def to_dict(self) -> dict:
        return {"features": ["avg_load", "packet_rate"], "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(tuple(d["mean"]), tuple(d["std"]))


def fit_normalizer(feature_sets) -> Normalizer:
    """Population mean/std over every (flow, window) sample of the given WindowFeatures."""
    loads = np.concatenate([f.avg_load.ravel() for f in feature_sets])
    rates = np.concatenate([f.packet_rate.ravel() for f in feature_sets])
    if loads.size == 0:
        raise ValueError("cannot fit a normalizer on zero samples")
    mean, std = [], []
    for v in (loads, rates):
        mu = float(v.mean())
        sd = float(v.std())
        mean.append(mu)
        # a constant feature can show a rounding-level spread; treat it as zero
        std.append(sd if sd > 1e-12 * abs(mu) and sd > 0 else 1.0)
    return Normalizer(tuple(mean), tuple(std))


def apply_normalizer(n: Normalizer, features):
    """Return a copy of WindowFeatures with avg_load and packet_rate z-scored."""
    from dataclasses import replace

    load, rate = n.apply(features.avg_load, features.packet_rate)
    return replace(features, avg_load=load, packet_rate=rate)
