"""Recurrent cells: LSTM, VLSTM (several timescales per cell dimension), msGRU.

Cell equations are written once against a small ops interface (``affine``,
``sigmoid``, ``tanh``, ``mul``, ``add``, ``one_minus``, ``mix``) so that the
same code path drives eager evaluation on arrays and symbolic graph
construction for backpropagation through time.

Parameter naming (all weights are ``(out, in)``):

* LSTM: ``{W,U,b}_{c,o,f,i}``
* VLSTM: shared ``{W,U,b}_c`` and ``{W,U,b}_o``; per scale ``{W,U,b}_f{k}`` and,
  unless gates are tied, ``{W,U,b}_i{k}``; ``mix`` logits when ``n > 1``
* msGRU: shared ``{W,U,b}_c`` and reset ``{W,U,b}_r``; per scale
  ``{W,U,b}_lam{k}``; ``mix`` logits when ``n > 1``

Every recurrent state, whatever the cell, is carried as ``(h, scales)`` where
``h`` feeds the next step and the head, and ``scales`` is the list of per-scale
memory states.  For msGRU, ``h`` is the mixed state itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .ndcore import EAGER, Tensor

KINDS = ("lstm", "vlstm", "msgru")
COUPLINGS = ("independent", "tied")


@dataclass
class CellParams:
    """Weights of one recurrent cell plus the structural choices that shape them."""

    kind: str
    n_in: int
    n_hidden: int
    n_scales: int = 1
    bias: bool = True
    coupling: str = "independent"
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown cell kind {self.kind!r}")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"unknown gate coupling {self.coupling!r}")
        if self.n_in < 1 or self.n_hidden < 1 or self.n_scales < 1:
            raise ValueError("n_in, n_hidden and n_scales must all be >= 1")
        if self.kind == "lstm" and self.n_scales != 1:
            raise ValueError("a plain LSTM has exactly one timescale per dimension")
        if self.kind != "vlstm" and self.coupling != "independent":
            raise ValueError("gate coupling only applies to VLSTM cells")

    @property
    def gates(self) -> list[str]:
        """Gate blocks in canonical (initialisation) order."""
        if self.kind == "lstm":
            return ["c", "o", "f", "i"]
        if self.kind == "vlstm":
            out = ["c", "o"]
            for k in range(1, self.n_scales + 1):
                out.append(f"f{k}")
                if self.coupling == "independent":
                    out.append(f"i{k}")
            return out
        return ["c", "r"] + [f"lam{k}" for k in range(1, self.n_scales + 1)]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        nx, nh = self.n_in, self.n_hidden
        out: dict[str, tuple[int, ...]] = {}
        for g in self.gates:
            out[f"W_{g}"] = (nh, nx)
            out[f"U_{g}"] = (nh, nh)
            if self.bias:
                out[f"b_{g}"] = (nh,)
        if self.n_scales > 1:
            two_way = self.kind == "vlstm" and self.n_scales == 2
            out["mix"] = (nh,) if two_way else (self.n_scales, nh)
        return out

    def validate(self) -> None:
        want = self.shapes()
        if set(want) != set(self.tensors):
            missing = sorted(set(want) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(want))
            raise ValueError(f"tensor names mismatch: missing={missing} extra={extra}")
        for name, shape in want.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValueError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name} holds non-finite values")

    def copy(self) -> "CellParams":
        return CellParams(
            self.kind, self.n_in, self.n_hidden, self.n_scales, self.bias, self.coupling,
            {k: v.copy() for k, v in self.tensors.items()},
        )


def glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> Tensor:
    s = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-s, s, size=(n_out, n_in))


def orthogonal(rng: np.random.Generator, n: int) -> Tensor:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_params(
    kind: str,
    n_in: int,
    n_hidden: int,
    n_scales: int = 1,
    bias: bool = True,
    coupling: str = "independent",
    seed: int | np.random.Generator = 0,
) -> CellParams:
    """Glorot-uniform input weights, orthogonal recurrent weights, zero biases.

    Forget-gate biases start at 1 when biases are enabled; mixing logits start
    at 0, i.e. equal weight on every scale.  Gate blocks are drawn in
    canonical order so that a one-scale VLSTM and an LSTM built from the same
    seed carry identical numbers.
    """
    p = CellParams(kind, n_in, n_hidden, n_scales, bias, coupling)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t: dict[str, Tensor] = {}
    for g in p.gates:
        t[f"W_{g}"] = glorot_uniform(rng, n_hidden, n_in)
        t[f"U_{g}"] = orthogonal(rng, n_hidden)
        if bias:
            forget = g == "f" or (kind == "vlstm" and g.startswith("f"))
            t[f"b_{g}"] = np.full(n_hidden, 1.0 if forget else 0.0)
    if "mix" in p.shapes():
        t["mix"] = np.zeros(p.shapes()["mix"])
    p.tensors = t
    return p


def param_count(params: CellParams) -> int:
    return int(sum(np.prod(s) for s in params.shapes().values()))


# -- cell equations ----------------------------------------------------------

def _gate(ops, t, g, x, h, act):
    z = ops.affine([(x, t[f"W_{g}"]), (h, t[f"U_{g}"])], t.get(f"b_{g}"))
    return act(z)


def _lstm(ops, t, x, h, c):
    cand = _gate(ops, t, "c", x, h, ops.tanh)
    o = _gate(ops, t, "o", x, h, ops.sigmoid)
    f = _gate(ops, t, "f", x, h, ops.sigmoid)
    i = _gate(ops, t, "i", x, h, ops.sigmoid)
    c_new = ops.add(ops.mul(f, c), ops.mul(i, cand))
    return ops.mul(o, ops.tanh(c_new)), c_new


def _vlstm(ops, t, n, tied, x, h, scales):
    cand = _gate(ops, t, "c", x, h, ops.tanh)
    o = _gate(ops, t, "o", x, h, ops.sigmoid)
    new = []
    for k in range(1, n + 1):
        f = _gate(ops, t, f"f{k}", x, h, ops.sigmoid)
        i = ops.one_minus(f) if tied else _gate(ops, t, f"i{k}", x, h, ops.sigmoid)
        new.append(ops.add(ops.mul(f, scales[k - 1]), ops.mul(i, cand)))
    mixed = new[0] if n == 1 else ops.mix(t["mix"], new)
    return ops.mul(o, ops.tanh(mixed)), new, mixed


def _msgru(ops, t, n, x, mixed_prev, scales):
    r = _gate(ops, t, "r", x, mixed_prev, ops.sigmoid)
    cand = _gate(ops, t, "c", x, ops.mul(mixed_prev, r), ops.tanh)
    new = []
    for k in range(1, n + 1):
        lam = _gate(ops, t, f"lam{k}", x, scales[k - 1], ops.sigmoid)
        new.append(ops.add(ops.mul(scales[k - 1], ops.one_minus(lam)), ops.mul(lam, cand)))
    mixed = new[0] if n == 1 else ops.mix(t["mix"], new)
    return new, mixed


def step(ops, cell: CellParams, t: Mapping, x, state):
    """Advance any cell by one step; ``state`` and the result are ``(h, scales)``."""
    h, scales = state
    if len(scales) != cell.n_scales:
        raise ValueError(f"expected {cell.n_scales} scale states, got {len(scales)}")
    if cell.kind == "lstm":
        h, c = _lstm(ops, t, x, h, scales[0])
        return h, [c]
    if cell.kind == "vlstm":
        h, new, _ = _vlstm(ops, t, cell.n_scales, cell.coupling == "tied", x, h, scales)
        return h, new
    new, mixed = _msgru(ops, t, cell.n_scales, x, h, scales)
    return mixed, new


def unroll(ops, cell: CellParams, t: Mapping, xs: Sequence, state):
    for x in xs:
        state = step(ops, cell, t, x, state)
    return state


def zero_state(cell: CellParams, batch: int):
    z = np.zeros((batch, cell.n_hidden))
    return z, [z.copy() for _ in range(cell.n_scales)]


# -- eager public steps ------------------------------------------------------

def _check_kind(p: CellParams, kind: str) -> None:
    if p.kind != kind:
        raise ValueError(f"expected {kind} parameters, got {p.kind}")


def lstm_step(p: CellParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One LSTM step on ``(batch, dim)`` arrays; returns ``(h_t, c_t)``."""
    _check_kind(p, "lstm")
    return _lstm(EAGER, p.tensors, x_t, h_prev, c_prev)


def vlstm_step(p: CellParams, x_t: Tensor, h_prev: Tensor, c_prev_scales: Sequence[Tensor]):
    """One VLSTM step; returns ``(h_t, scale_states, mixed_state)``."""
    _check_kind(p, "vlstm")
    if len(c_prev_scales) != p.n_scales:
        raise ValueError(f"expected {p.n_scales} scale states, got {len(c_prev_scales)}")
    return _vlstm(EAGER, p.tensors, p.n_scales, p.coupling == "tied", x_t, h_prev, c_prev_scales)


def mix_states(p: CellParams, scales: Sequence[Tensor]) -> Tensor:
    if p.n_scales == 1:
        return scales[0]
    return EAGER.mix(p.tensors["mix"], scales)


def msgru_step(
    p: CellParams,
    x_t: Tensor,
    c_prev_scales: Sequence[Tensor],
    c_mixed_prev: Tensor | None = None,
):
    """One msGRU step; returns ``(scale_states, mixed_state)``.

    Reset and candidate read the previous mixed state, which is recomputed
    from ``c_prev_scales`` when not supplied.
    """
    _check_kind(p, "msgru")
    if len(c_prev_scales) != p.n_scales:
        raise ValueError(f"expected {p.n_scales} scale states, got {len(c_prev_scales)}")
    if c_mixed_prev is None:
        c_mixed_prev = mix_states(p, c_prev_scales)
    return _msgru(EAGER, p.tensors, p.n_scales, x_t, c_mixed_prev, c_prev_scales)
