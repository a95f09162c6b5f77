"""Reverse-mode differentiation over a static graph of batched float64 ops.

A :class:`Graph` is built once (symbolically) and then evaluated many times
with different bindings.  Values are plain ``numpy.float64`` arrays whose
leading axis is the batch.  The primitive set is deliberately closed:

=============  ==========================================================
``affine``     ``sum_k x_k @ W_k.T (+ b)``
``sigmoid``    logistic function
``tanh``       hyperbolic tangent
``mul``        Hadamard product of two equally shaped values
``add``        sum of two equally shaped values
``one_minus``  ``1 - x``
``mix``        convex combination of scale states (sigmoid or softmax weights)
``mse``        mean squared error, reduces to a scalar
=============  ==========================================================

Every primitive has a paired forward and backward rule below and is covered
by a finite-difference test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

Tensor = np.ndarray


class GraphError(RuntimeError):
    """Raised for malformed graphs, bad bindings or misuse of the tape."""


@dataclass(slots=True)
class Node:
    op: str
    args: tuple[int, ...]
    name: str | None = None
    needs_grad: bool = False
    has_bias: bool = False


# -- forward rules ---------------------------------------------------------

def _fwd_affine(node, vals):
    a = node.args
    nterms = (len(a) - node.has_bias) // 2
    out = vals[a[0]] @ vals[a[1]].T
    for k in range(1, nterms):
        out = out + vals[a[2 * k]] @ vals[a[2 * k + 1]].T
    if node.has_bias:
        out = out + vals[a[-1]]
    return out


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"operand shapes differ: {a.shape} vs {b.shape}")


def _fwd_mul(node, vals):
    a, b = vals[node.args[0]], vals[node.args[1]]
    _same_shape(a, b)
    return a * b


def _fwd_add(node, vals):
    a, b = vals[node.args[0]], vals[node.args[1]]
    _same_shape(a, b)
    return a + b


def _mix_weights(logits):
    if logits.ndim == 1:
        return expit(logits)
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _fwd_mix(node, vals):
    logits = vals[node.args[0]]
    states = [vals[i] for i in node.args[1:]]
    w = _mix_weights(logits)
    if logits.ndim == 1:
        if len(states) != 2:
            raise ValueError(f"vector mixing needs 2 states, got {len(states)}")
        return w * states[0] + (1.0 - w) * states[1]
    if logits.shape[0] != len(states):
        raise ValueError(f"mixing logits have {logits.shape[0]} rows for {len(states)} states")
    out = w[0] * states[0]
    for k in range(1, len(states)):
        out = out + w[k] * states[k]
    return out


def _fwd_mse(node, vals):
    p, t = vals[node.args[0]], vals[node.args[1]]
    _same_shape(p, t)
    if p.size == 0:
        raise ValueError("mse of an empty batch")
    d = p - t
    return np.asarray(np.mean(d * d))


_FORWARD: dict[str, Callable] = {
    "affine": _fwd_affine,
    "sigmoid": lambda node, vals: expit(vals[node.args[0]]),
    "tanh": lambda node, vals: np.tanh(vals[node.args[0]]),
    "mul": _fwd_mul,
    "add": _fwd_add,
    "one_minus": lambda node, vals: 1.0 - vals[node.args[0]],
    "mix": _fwd_mix,
    "mse": _fwd_mse,
}


# -- backward rules --------------------------------------------------------
# Each rule yields (arg_index, gradient) pairs for arguments needing a gradient.

def _bwd_affine(node, vals, out, g, need):
    a = node.args
    nterms = (len(a) - node.has_bias) // 2
    for k in range(nterms):
        xi, wi = a[2 * k], a[2 * k + 1]
        if need[xi]:
            yield xi, g @ vals[wi]
        if need[wi]:
            yield wi, g.T @ vals[xi]
    if node.has_bias and need[a[-1]]:
        yield a[-1], g.sum(axis=0)


def _bwd_sigmoid(node, vals, out, g, need):
    yield node.args[0], g * out * (1.0 - out)


def _bwd_tanh(node, vals, out, g, need):
    yield node.args[0], g * (1.0 - out * out)


def _bwd_mul(node, vals, out, g, need):
    a, b = node.args
    if need[a]:
        yield a, g * vals[b]
    if need[b]:
        yield b, g * vals[a]


def _bwd_add(node, vals, out, g, need):
    a, b = node.args
    if need[a]:
        yield a, g
    if need[b]:
        yield b, g


def _bwd_one_minus(node, vals, out, g, need):
    yield node.args[0], -g


def _bwd_mix(node, vals, out, g, need):
    li = node.args[0]
    logits = vals[li]
    sids = node.args[1:]
    w = _mix_weights(logits)
    if logits.ndim == 1:
        s1, s2 = vals[sids[0]], vals[sids[1]]
        if need[sids[0]]:
            yield sids[0], g * w
        if need[sids[1]]:
            yield sids[1], g * (1.0 - w)
        if need[li]:
            yield li, (g * (s1 - s2)).sum(axis=0) * w * (1.0 - w)
        return
    for k, si in enumerate(sids):
        if need[si]:
            yield si, g * w[k]
    if need[li]:
        gw = np.stack([(g * vals[si]).sum(axis=0) for si in sids])
        yield li, w * (gw - (w * gw).sum(axis=0, keepdims=True))


def _bwd_mse(node, vals, out, g, need):
    p, t = node.args
    d = vals[p] - vals[t]
    scale = 2.0 * g / d.size
    if need[p]:
        yield p, scale * d
    if need[t]:
        yield t, -scale * d


_BACKWARD: dict[str, Callable] = {
    "affine": _bwd_affine,
    "sigmoid": _bwd_sigmoid,
    "tanh": _bwd_tanh,
    "mul": _bwd_mul,
    "add": _bwd_add,
    "one_minus": _bwd_one_minus,
    "mix": _bwd_mix,
    "mse": _bwd_mse,
}


class Graph:
    """Static computation graph with a forward cache and a reverse sweep.

    Builder methods return integer node references.  Nodes are appended in
    creation order, which is therefore a valid topological order.

    >>> g = Graph()
    >>> x = g.input("x")
    >>> y = g.output(g.tanh(x), "y")
    >>> g.evaluate({"x": np.zeros((1, 1))})["y"]
    array([[0.]])
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.params: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self._vals: list | None = None
        self._need: list[bool] = []

    def __len__(self) -> int:
        return len(self.nodes)

    # -- leaves
    def _leaf(self, kind: str, name: str, table: dict[str, int], needs_grad: bool) -> int:
        if name in self.inputs or name in self.params:
            raise GraphError(f"duplicate leaf name {name!r}")
        idx = self._push(Node(kind, (), name, needs_grad))
        table[name] = idx
        return idx

    def input(self, name: str) -> int:
        return self._leaf("input", name, self.inputs, False)

    def param(self, name: str) -> int:
        return self._leaf("param", name, self.params, True)

    def _push(self, node: Node) -> int:
        for a in node.args:
            if not 0 <= a < len(self.nodes):
                raise GraphError(f"node {node.op} refers to unknown node {a}")
        self.nodes.append(node)
        self._need.append(node.needs_grad)
        return len(self.nodes) - 1

    def _op(self, op: str, args: Sequence[int], has_bias: bool = False) -> int:
        needs = any(self._need[a] for a in args if 0 <= a < len(self._need))
        return self._push(Node(op, tuple(args), None, needs, has_bias))

    # -- primitives
    def affine(self, terms: Sequence[tuple[int, int]], bias: int | None = None) -> int:
        """``sum(x @ W.T for x, W in terms) + bias``; weights are (out, in)."""
        if not terms:
            raise GraphError("affine needs at least one (x, W) term")
        args = [i for pair in terms for i in pair]
        if bias is not None:
            args.append(bias)
        return self._op("affine", args, has_bias=bias is not None)

    def sigmoid(self, x: int) -> int:
        return self._op("sigmoid", (x,))

    def tanh(self, x: int) -> int:
        return self._op("tanh", (x,))

    def mul(self, a: int, b: int) -> int:
        return self._op("mul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self._op("add", (a, b))

    def one_minus(self, x: int) -> int:
        return self._op("one_minus", (x,))

    def mix(self, logits: int, states: Sequence[int]) -> int:
        """Convex combination of ``states``.

        A 1-D ``logits`` vector ``a`` mixes two states as
        ``sigmoid(a)*s1 + (1-sigmoid(a))*s2``; an ``(n, d)`` matrix mixes ``n``
        states with per-dimension softmax weights over its first axis.
        """
        return self._op("mix", (logits, *states))

    def mse(self, pred: int, target: int) -> int:
        return self._op("mse", (pred, target))

    def output(self, ref: int, name: str) -> int:
        if name in self.outputs:
            raise GraphError(f"duplicate output name {name!r}")
        self.outputs[name] = ref
        self.nodes[ref].name = self.nodes[ref].name or name
        return ref

    # -- execution
    def evaluate(
        self, bindings: Mapping[str, Tensor], outputs: Sequence[str] | None = None
    ) -> dict[str, Tensor]:
        """Run the forward pass, caching every intermediate for :meth:`backward`."""
        vals: list = [None] * len(self.nodes)
        for table in (self.inputs, self.params):
            for name, idx in table.items():
                if name not in bindings:
                    raise GraphError(f"unbound leaf {name!r}")
                vals[idx] = np.asarray(bindings[name], dtype=np.float64)
        fwd = _FORWARD
        for i, node in enumerate(self.nodes):
            if node.args:
                try:
                    vals[i] = fwd[node.op](node, vals)
                except ValueError as exc:
                    label = f" {node.name!r}" if node.name else ""
                    raise GraphError(f"node {i} ({node.op}{label}): {exc}") from None
        self._vals = vals
        names = self.outputs if outputs is None else outputs
        return {n: vals[self.outputs[n]] for n in names}

    def backward(self, seed_output: str, seed: Tensor | float = 1.0) -> dict[str, Tensor]:
        """Gradients of ``seed_output`` with respect to every parameter leaf.

        Unused parameters receive zero gradients.
        """
        if self._vals is None:
            raise GraphError("backward called before evaluate")
        if seed_output not in self.outputs:
            raise GraphError(f"unknown output {seed_output!r}")
        vals, need = self._vals, self._need
        root = self.outputs[seed_output]
        grads: list = [None] * len(self.nodes)
        grads[root] = np.broadcast_to(np.asarray(seed, dtype=np.float64), vals[root].shape).copy()
        bwd = _BACKWARD
        for i in range(root, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if not node.args:
                continue
            for j, gj in bwd[node.op](node, vals, vals[i], g, need):
                if grads[j] is None:
                    grads[j] = gj
                else:
                    grads[j] = grads[j] + gj
        out = {}
        for name, idx in self.params.items():
            g = grads[idx]
            out[name] = np.zeros_like(vals[idx]) if g is None else g
        return out


# central stencils: offsets (in units of epsilon) and weights, divided by epsilon
_STENCILS = {
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
    6: ((3, 2, 1, -1, -2, -3), (1 / 60, -9 / 60, 45 / 60, -45 / 60, 9 / 60, -1 / 60)),
}


def grad_check(
    loss_fn: Callable[[dict[str, Tensor]], tuple[float, dict[str, Tensor]]],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
    order: int = 2,
    value_fn: Callable[[dict[str, Tensor]], float] | None = None,
) -> float:
    """Worst componentwise relative error between analytic and numeric gradients.

    ``loss_fn(params)`` must return ``(loss, grads)``.  Numeric gradients use
    central differences of the given ``order`` (2, 4 or 6); the relative error
    denominator is ``max(|analytic|, |numeric|, 1e-8)``.  ``value_fn``, if
    given, returns the loss alone and is used for the perturbed evaluations.

    The plain two-point scheme loses several digits to cancellation on
    gradients below ~1e-6 (long unrolls shrink many of them that far); the
    higher orders allow a larger ``epsilon`` and keep those components honest.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}")
    offsets, weights = _STENCILS[order]
    value = value_fn or (lambda p: loss_fn(p)[0])
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss0, analytic = loss_fn(base)
    if not np.isfinite(loss0):
        raise FloatingPointError(f"non-finite loss {loss0}")
    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        ga = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            num = 0.0
            for off, w in zip(offsets, weights):
                flat[k] = orig + off * epsilon
                lv = value(base)
                if not np.isfinite(lv):
                    flat[k] = orig
                    raise FloatingPointError(f"non-finite loss while perturbing {name}[{k}]")
                num += w * lv
            flat[k] = orig
            num /= epsilon
            err = abs(ga[k] - num) / max(abs(ga[k]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


class EagerOps:
    """Immediate-mode twin of the :class:`Graph` builder.

    Methods take and return arrays but route through the very same forward
    rules, so eager and graph evaluation agree bit for bit.
    """

    @staticmethod
    def _apply(op: str, args: Sequence[Tensor], has_bias: bool = False) -> Tensor:
        node = Node(op, tuple(range(len(args))), has_bias=has_bias)
        try:
            return _FORWARD[op](node, list(args))
        except ValueError as exc:
            raise GraphError(f"{op}: {exc}") from None

    def affine(self, terms, bias=None):
        args = [v for pair in terms for v in pair]
        if bias is not None:
            args.append(bias)
        return self._apply("affine", args, has_bias=bias is not None)

    def sigmoid(self, x):
        return self._apply("sigmoid", (x,))

    def tanh(self, x):
        return self._apply("tanh", (x,))

    def mul(self, a, b):
        return self._apply("mul", (a, b))

    def add(self, a, b):
        return self._apply("add", (a, b))

    def one_minus(self, x):
        return self._apply("one_minus", (x,))

    def mix(self, logits, states):
        return self._apply("mix", (logits, *states))

    def mse(self, pred, target):
        return self._apply("mse", (pred, target))


EAGER = EagerOps()
