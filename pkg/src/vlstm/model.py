"""Forecaster: a recurrent cell unrolled over a window, then a two-layer head.

The head is a dense sigmoid layer of width ``n_hidden`` followed by a dense
linear layer to one output.  Both head layers always carry biases, which
lets the model learn a baseline level whatever the cell's bias setting.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cells
from .archive import load_archive, save_archive
from .cells import CellParams
from .ndcore import Graph, Tensor

EVAL_CHUNK = 8192


@dataclass
class ForecastModel:
    cell: CellParams
    head: dict[str, Tensor]
    seq_len: int

    @property
    def n_hidden(self) -> int:
        return self.cell.n_hidden

    @property
    def structure(self) -> tuple:
        c = self.cell
        return (c.kind, c.n_in, c.n_hidden, c.n_scales, c.bias, c.coupling, self.seq_len)

    def params(self) -> dict[str, Tensor]:
        """Live views of every trainable tensor under ``cell/`` and ``head/`` prefixes."""
        out = {f"cell/{k}": v for k, v in self.cell.tensors.items()}
        out.update({f"head/{k}": v for k, v in self.head.items()})
        return out

    def set_params(self, values: dict[str, Tensor]) -> None:
        for k, v in values.items():
            prefix, name = k.split("/", 1)
            table = self.cell.tensors if prefix == "cell" else self.head
            if table[name].shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {table[name].shape}")
            table[name] = np.array(v, dtype=np.float64)

    def copy(self) -> "ForecastModel":
        return ForecastModel(self.cell.copy(), {k: v.copy() for k, v in self.head.items()}, self.seq_len)

    def config(self) -> dict:
        c = self.cell
        return {
            "kind": c.kind, "n_in": c.n_in, "n_hidden": c.n_hidden, "n_scales": c.n_scales,
            "bias": c.bias, "coupling": c.coupling, "seq_len": self.seq_len,
        }


def build_model(
    kind: str,
    n_hidden: int,
    seq_len: int,
    n_scales: int = 1,
    bias: bool = True,
    coupling: str = "independent",
    n_in: int = 1,
    seed: int = 0,
) -> ForecastModel:
    """Freshly initialised forecaster; the cell is drawn first, then the head."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    rng = np.random.default_rng(seed)
    cell = cells.init_params(kind, n_in, n_hidden, n_scales, bias, coupling, seed=rng)
    head = {
        "W1": cells.glorot_uniform(rng, n_hidden, n_hidden),
        "b1": np.zeros(n_hidden),
        "W2": cells.glorot_uniform(rng, 1, n_hidden),
        "b2": np.zeros(1),
    }
    return ForecastModel(cell, head, seq_len)


# -- graph construction --------------------------------------------------------

_local = threading.local()


def _build_graph(model: ForecastModel) -> Graph:
    g = Graph()
    cell = model.cell
    t = {k: g.param(f"cell/{k}") for k in cell.shapes()}
    head = {k: g.param(f"head/{k}") for k in ("W1", "b1", "W2", "b2")}
    xs = [g.input(f"x{i}") for i in range(model.seq_len)]
    h0 = g.input("h0")
    scales0 = [g.input(f"s0_{k}") for k in range(cell.n_scales)]
    h, _ = cells.unroll(g, cell, t, xs, (h0, scales0))
    z = g.sigmoid(g.affine([(h, head["W1"])], head["b1"]))
    pred = g.output(g.affine([(z, head["W2"])], head["b2"]), "pred")
    g.output(g.mse(pred, g.input("target")), "loss")
    return g


def model_graph(model: ForecastModel) -> Graph:
    """Per-thread cached graph for the model's structure (weights are bindings)."""
    cache = getattr(_local, "graphs", None)
    if cache is None:
        cache = _local.graphs = {}
    key = model.structure
    if key not in cache:
        cache[key] = _build_graph(model)
    return cache[key]


def _bindings(model: ForecastModel, windows: Tensor, targets: Tensor | None) -> dict:
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[:, :, None]
    if windows.ndim != 3 or windows.shape[1] != model.seq_len or windows.shape[2] != model.cell.n_in:
        raise ValueError(
            f"windows of shape {windows.shape} do not match (batch, {model.seq_len}, {model.cell.n_in})"
        )
    b = windows.shape[0]
    bind = model.params()
    for i in range(model.seq_len):
        bind[f"x{i}"] = windows[:, i, :]
    zeros = np.zeros((b, model.n_hidden))
    bind["h0"] = zeros
    for k in range(model.cell.n_scales):
        bind[f"s0_{k}"] = zeros
    bind["target"] = np.zeros((b, 1)) if targets is None else np.asarray(targets, dtype=np.float64).reshape(b, 1)
    return bind


def predict_batch(model: ForecastModel, windows: Tensor) -> Tensor:
    """Forecasts for ``(batch, seq_len[, n_in])`` windows, unrolled from zero states."""
    windows = np.asarray(windows, dtype=np.float64)
    g = model_graph(model)
    outs = []
    for s in range(0, max(len(windows), 1), EVAL_CHUNK):
        chunk = windows[s:s + EVAL_CHUNK]
        outs.append(g.evaluate(_bindings(model, chunk, None), ["pred"])["pred"][:, 0])
    return np.concatenate(outs)


def predict(model: ForecastModel, window: Tensor) -> float:
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 1:
        window = window[:, None]
    if window.shape[0] != model.seq_len:
        raise ValueError(f"window length {window.shape[0]} != model seq_len {model.seq_len}")
    return float(predict_batch(model, window[None])[0])


def loss(model: ForecastModel, windows: Tensor, targets: Tensor) -> float:
    """Mean squared forecast error."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(targets) == 0:
        raise ValueError("loss of an empty batch")
    if len(windows) != len(targets):
        raise ValueError(f"{len(windows)} windows vs {len(targets)} targets")
    d = predict_batch(model, windows) - targets
    return float(np.mean(d * d))


def loss_and_grads(model: ForecastModel, windows: Tensor, targets: Tensor) -> tuple[float, dict[str, Tensor]]:
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(targets) == 0:
        raise ValueError("loss of an empty batch")
    g = model_graph(model)
    out = g.evaluate(_bindings(model, windows, targets), ["loss"])
    return float(out["loss"]), g.backward("loss")


# -- persistence ---------------------------------------------------------------

def save_model(path: str | Path, model: ForecastModel, extra: dict | None = None) -> None:
    meta = {"format": "vlstm-model/1", **model.config(), **(extra or {})}
    save_archive(path, model.params(), meta)


def load_model(path: str | Path) -> ForecastModel:
    tensors, meta = load_archive(path)
    cell = CellParams(meta["kind"], meta["n_in"], meta["n_hidden"], meta["n_scales"], meta["bias"], meta["coupling"])
    cell.tensors = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("cell/")}
    cell.validate()
    head = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("head/")}
    return ForecastModel(cell, head, meta["seq_len"])
