"""Tape-based reverse-mode differentiation over float64 arrays.

The tape records every primitive applied during a forward computation.
Nodes created with :meth:`GradTape.param` are *marked*: they receive
gradient storage. Constants (for example frozen base-model weights) still
pass adjoints through to whatever depends on them, but never store one.

``EagerOps`` exposes the same primitive names on bare arrays, so model code
can be written once and run either with or without a tape.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ContractError, DimensionError
from . import linalg
from .linalg import gelu, gelu_grad, log_softmax, matmul, row_softmax_masked, seqsum


def _reduce_to(g, shape):
    """Sum a broadcast gradient back down to ``shape`` (left-to-right)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    for _ in range(extra):
        g = seqsum(g, axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = seqsum(g, axis=ax)[(slice(None),) * ax + (None,)]
    return g.reshape(shape)


def _swap(x):
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))


class Node:
    __slots__ = ("value", "grad", "requires_grad", "parents", "fn", "vjp", "name", "marked")

    def __init__(self, value, parents=(), fn=None, vjp=None, requires_grad=False, name=None, marked=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.fn = fn
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name
        self.marked = marked

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name or '?'}, shape={self.value.shape})"


class GradTape:
    """Records primitives; single-owner and mutable."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # leaves -----------------------------------------------------------
    def param(self, value, name: str) -> Node:
        node = Node(np.array(value, dtype=np.float64), requires_grad=True, name=name, marked=True)
        self.nodes.append(node)
        self.params[name] = node
        return node

    def constant(self, value, name=None) -> Node:
        if isinstance(value, Node):
            return value
        node = Node(np.asarray(value, dtype=np.float64), name=name)
        self.nodes.append(node)
        return node

    def _wrap(self, x) -> Node:
        return x if isinstance(x, Node) else self.constant(x)

    def _record(self, fn: Callable, vjp: Callable, *parents) -> Node:
        parents = tuple(self._wrap(p) for p in parents)
        value = fn(*(p.value for p in parents))
        node = Node(value, parents, fn, vjp, any(p.requires_grad for p in parents))
        self.nodes.append(node)
        return node

    def replay(self) -> bool:
        """Recompute every recorded node; True iff all outputs are bit-identical."""
        fresh: dict[int, np.ndarray] = {}
        same = True
        for node in self.nodes:
            if node.fn is None:
                fresh[id(node)] = node.value
                continue
            value = node.fn(*(fresh[id(p)] for p in node.parents))
            fresh[id(node)] = value
            same = same and value.shape == node.value.shape and value.tobytes() == node.value.tobytes()
        return same

    # primitives -------------------------------------------------------
    def add(self, a, b):
        return self._record(np.add, lambda g, x, y, out: (_reduce_to(g, x.shape), _reduce_to(g, y.shape)), a, b)

    def sub(self, a, b):
        return self._record(np.subtract, lambda g, x, y, out: (_reduce_to(g, x.shape), _reduce_to(-g, y.shape)), a, b)

    def mul(self, a, b):
        return self._record(
            np.multiply, lambda g, x, y, out: (_reduce_to(g * y, x.shape), _reduce_to(g * x, y.shape)), a, b
        )

    def scale(self, a, c: float):
        c = float(c)
        return self._record(lambda x: x * c, lambda g, x, out: (g * c,), a)

    def matmul(self, a, b):
        def vjp(g, x, y, out):
            gx = matmul(g, _swap(y))
            if y.ndim == 2 and x.ndim > 2:
                k = x.shape[-1]
                gy = matmul(_swap(x.reshape(-1, k)), g.reshape(-1, g.shape[-1]))
            else:
                gy = matmul(_swap(x), g)
            return gx, gy

        return self._record(matmul, vjp, a, b)

    def gelu(self, a):
        return self._record(gelu, lambda g, x, out: (g * gelu_grad(x),), a)

    def rms_norm(self, x, gamma, eps: float):
        def fwd(xv, gv):
            return linalg.rms_norm(xv, gv, eps)

        def vjp(g, xv, gv, out):
            d = xv.shape[-1]
            r = 1.0 / np.sqrt(seqsum(xv * xv) / d + eps)[..., None]
            gg = g * gv
            dot = seqsum(gg * xv)[..., None]
            gx = gg * r - xv * (r * r * r) * dot / d
            return gx, _reduce_to(g * xv * r, gv.shape)

        return self._record(fwd, vjp, x, gamma)

    def softmax_masked(self, scores, mask):
        mask = np.asarray(mask)

        def fwd(s):
            return row_softmax_masked(s, mask)

        def vjp(g, s, out):
            return (out * (g - seqsum(g * out)[..., None]),)

        return self._record(fwd, vjp, scores)

    def take_rows(self, table, ids):
        ids = np.asarray(ids, dtype=np.int64)

        def vjp(g, t, out):
            acc = np.zeros_like(t)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, t.shape[-1]))
            return (acc,)

        return self._record(lambda t: t[ids], vjp, table)

    def concat(self, a, b):
        def vjp(g, x, y, out):
            w = x.shape[-1]
            return np.ascontiguousarray(g[..., :w]), np.ascontiguousarray(g[..., w:])

        return self._record(lambda x, y: np.concatenate([x, y], axis=-1), vjp, a, b)

    def reshape(self, a, shape):
        shape = tuple(shape)
        return self._record(lambda x: x.reshape(shape), lambda g, x, out: (g.reshape(x.shape),), a)

    def transpose(self, a, axes):
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        return self._record(
            lambda x: np.ascontiguousarray(x.transpose(axes)),
            lambda g, x, out: (np.ascontiguousarray(g.transpose(inverse)),),
            a,
        )

    def sum(self, a):
        return self._record(lambda x: np.array(seqsum(x.reshape(-1))), lambda g, x, out: (np.full(x.shape, g),), a)

    def cross_entropy(self, logits, targets):
        """Mean negative log-likelihood of integer ``targets``."""
        targets = np.asarray(targets, dtype=np.int64)
        count = targets.size

        def fwd(z):
            lp = log_softmax(z)
            picked = np.take_along_axis(lp, targets[..., None], axis=-1)
            return np.array(-seqsum(picked.reshape(-1)) / count)

        def vjp(g, z, out):
            p = np.exp(log_softmax(z))
            np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
            return (p * (g / count),)

        return self._record(fwd, vjp, logits)


class EagerOps:
    """Same primitive names as :class:`GradTape`, computed directly on arrays."""

    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    matmul = staticmethod(matmul)
    gelu = staticmethod(gelu)

    @staticmethod
    def constant(x, name=None):
        return np.asarray(x, dtype=np.float64)

    @staticmethod
    def scale(a, c):
        return a * float(c)

    @staticmethod
    def rms_norm(x, gamma, eps):
        return linalg.rms_norm(x, gamma, eps)

    @staticmethod
    def softmax_masked(scores, mask):
        return row_softmax_masked(scores, mask)

    @staticmethod
    def take_rows(table, ids):
        return table[np.asarray(ids, dtype=np.int64)]

    @staticmethod
    def concat(a, b):
        return np.concatenate([a, b], axis=-1)

    @staticmethod
    def reshape(a, shape):
        return a.reshape(tuple(shape))

    @staticmethod
    def transpose(a, axes):
        return np.ascontiguousarray(a.transpose(tuple(axes)))

    @staticmethod
    def cross_entropy(logits, targets):
        targets = np.asarray(targets, dtype=np.int64)
        picked = np.take_along_axis(log_softmax(logits), targets[..., None], axis=-1)
        return np.array(-seqsum(picked.reshape(-1)) / targets.size)


def reverse_gradients(tape: GradTape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every marked parameter on ``tape``."""
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node.vjp is None or not node.requires_grad:
            continue
        parent_grads = node.vjp(node.grad, *(p.value for p in node.parents), node.value)
        for p, g in zip(node.parents, parent_grads):
            if g is None or not p.requires_grad:
                continue
            if g.shape != p.value.shape:
                raise DimensionError(f"adjoint shape {g.shape} != {p.value.shape}")
            p.grad = g if p.grad is None else p.grad + g
        if not node.marked:
            node.grad = None
    return {
        name: (node.grad if node.grad is not None else np.zeros_like(node.value))
        for name, node in tape.params.items()
    }


def finite_difference_check(f, params: dict, step: float = 1e-5, n_coords: int = 100, rng=None, floor: float = 1e-10):
    """Largest relative deviation between reverse-mode and central differences.

    ``f(tape, nodes)`` must build a scalar loss node from the marked
    parameter nodes in ``nodes``. Up to ``n_coords`` coordinates are drawn
    across all parameters (all of them if there are fewer).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value_at(values):
        tape = GradTape()
        nodes = {k: tape.param(v, k) for k, v in values.items()}
        return float(f(tape, nodes).value)

    tape = GradTape()
    nodes = {k: tape.param(v, k) for k, v in params.items()}
    grads = reverse_gradients(tape, f(tape, nodes))

    coords = [(k, i) for k in params for i in range(params[k].size)]
    if len(coords) > n_coords:
        if rng is None:
            from .prng import Prng

            rng = Prng(0)
        from .prng import sample_without_replacement

        picked = sample_without_replacement(len(coords), n_coords, rng)
        coords = [coords[j - 1] for j in picked]

    worst = 0.0
    for name, idx in coords:
        base = params[name].reshape(-1)[idx]
        plus = dict(params)
        minus = dict(params)
        plus[name] = params[name].copy()
        minus[name] = params[name].copy()
        plus[name].reshape(-1)[idx] = base + step
        minus[name].reshape(-1)[idx] = base - step
        fd = (value_at(plus) - value_at(minus)) / (2.0 * step)
        ad = float(grads[name].reshape(-1)[idx])
        denom = max(abs(fd), abs(ad), floor)
        worst = max(worst, abs(fd - ad) / denom)
    return worst
