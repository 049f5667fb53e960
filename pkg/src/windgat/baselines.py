"""Turbine-centric and layout-blind comparison models.

``BLSTMModel`` reads each turbine's upstream neighbours as a sequence with
a forward and a backward LSTM and predicts power from the free-stream speed
plus the two final hidden states.  ``PaddedMLPModel`` sees the same
neighbour triples flattened into a fixed-capacity, zero-padded vector.
``BaselineModel`` only knows the turbine count and the wind speed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import MLP, Linear, Module, Tensor, ops
from .graphs import UpstreamSequence

TRIPLE = 3


class CapacityError(ValueError):
    """A turbine has more upstream neighbours than the padded input can hold."""


@dataclass
class TurbineSample:
    """One turbine: scaled speed and farm size, its upstream triples, its target."""

    scenario_id: int
    index: int
    ws: float
    n_turbines: float
    triples: np.ndarray
    target: float | None = None

    @classmethod
    def from_sequence(cls, scenario_id: int, seq: UpstreamSequence, n_turbines: float, target=None):
        return cls(scenario_id, seq.target, seq.ws, n_turbines, seq.triples, target)


@dataclass
class ScenarioSample:
    scenario_id: int
    ws: float
    n_turbines: float
    target: float | None = None


# -- LSTM ----------------------------------------------------------------------------

class LSTMCell(Module):
    """Gates ``i, f, o`` and candidate ``g`` from one affine map of ``[x, h]``."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.n_in, self.hidden = n_in, hidden
        self.gates = Linear(n_in + hidden, 4 * hidden, rng)

    def split(self, z: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        h = self.hidden
        return tuple(ops.slice_cols(z, k * h, (k + 1) * h) for k in range(4))


def lstm_step(cell: LSTMCell, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    zi, zf, zo, zg = cell.split(cell.gates(ops.concat([x, h_prev])))
    i, f, o = ops.sigmoid(zi), ops.sigmoid(zf), ops.sigmoid(zo)
    c = ops.add(ops.mul(f, c_prev), ops.mul(i, ops.tanh(zg)))
    return ops.mul(o, ops.tanh(c)), c


def pad_sequences(seqs: Sequence[np.ndarray], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad ``(k_i, 3)`` arrays to ``(B, L, 3)`` plus a ``(B, L)`` validity mask."""
    L = max((len(s) for s in seqs), default=0) if length is None else length
    x = np.zeros((len(seqs), L, TRIPLE))
    mask = np.zeros((len(seqs), L))
    for b, s in enumerate(seqs):
        x[b, : len(s)] = s
        mask[b, : len(s)] = 1.0
    return x, mask


def run_lstm(cell: LSTMCell, x: np.ndarray, mask: np.ndarray, reverse: bool = False) -> Tensor:
    """Final hidden state of each masked sequence in the batch.

    Padded steps carry the previous state through unchanged, so a
    right-padded sequence read in reverse starts from its last real element.
    """
    B, L = mask.shape
    h = Tensor(np.zeros((B, cell.hidden)))
    c = Tensor(np.zeros((B, cell.hidden)))
    steps = range(L - 1, -1, -1) if reverse else range(L)
    for t in steps:
        m = mask[:, t]
        if not m.any():
            continue
        h_new, c_new = lstm_step(cell, Tensor(x[:, t]), h, c)
        keep, take = Tensor(1.0 - m), Tensor(m)
        h = ops.add(ops.scale_rows(h_new, take), ops.scale_rows(h, keep))
        c = ops.add(ops.scale_rows(c_new, take), ops.scale_rows(c, keep))
    return h


class BLSTMModel(Module):
    kind = "blstm"

    def __init__(self, hidden: int = 32, head_widths: Sequence[int] = (64, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.forward_cell = LSTMCell(TRIPLE, hidden, rng)
        self.backward_cell = LSTMCell(TRIPLE, hidden, rng)
        self.head = MLP(1 + 2 * hidden, [*head_widths, 1], rng, activate_last=False)
        self.hidden, self.head_widths, self.seed = hidden, tuple(head_widths), seed

    def encode(self, seqs: Sequence[np.ndarray]) -> Tensor:
        """``[h_forward, h_backward]`` per sequence; empty sequences give zeros."""
        x, mask = pad_sequences(seqs)
        return ops.concat([run_lstm(self.forward_cell, x, mask), run_lstm(self.backward_cell, x, mask, reverse=True)])

    def __call__(self, samples: Sequence[TurbineSample]) -> Tensor:
        ws = Tensor(np.array([[s.ws] for s in samples]))
        return self.head(ops.concat([ws, self.encode([s.triples for s in samples])]))

    def config(self) -> dict:
        return {"hidden": self.hidden, "head_widths": list(self.head_widths), "seed": self.seed}


class PaddedMLPModel(Module):
    kind = "mlp"

    def __init__(self, max_neighbors: int, widths: Sequence[int] = (256, 128, 64, 64), seed: int = 0):
        if max_neighbors < 0:
            raise ValueError("max_neighbors must be >= 0")
        rng = np.random.default_rng(seed)
        self.max_neighbors = max_neighbors
        self.mlp = MLP(self.input_width, [*widths, 1], rng, activate_last=False)
        self.widths, self.seed = tuple(widths), seed

    @property
    def input_width(self) -> int:
        return 1 + TRIPLE * self.max_neighbors

    def features(self, samples: Sequence[TurbineSample]) -> np.ndarray:
        X = np.zeros((len(samples), self.input_width))
        for b, s in enumerate(samples):
            k = len(s.triples)
            if k > self.max_neighbors:
                raise CapacityError(
                    f"scenario {s.scenario_id} turbine {s.index} has {k} upstream neighbours, "
                    f"capacity is {self.max_neighbors}"
                )
            X[b, 0] = s.ws
            X[b, 1 : 1 + TRIPLE * k] = np.asarray(s.triples).reshape(-1)
        return X

    def __call__(self, samples: Sequence[TurbineSample]) -> Tensor:
        return self.mlp(Tensor(self.features(samples)))

    def config(self) -> dict:
        return {"max_neighbors": self.max_neighbors, "widths": list(self.widths), "seed": self.seed}


class BaselineModel(Module):
    """MLP over ``[n_turbines, ws]``; ``variant`` picks farm or turbine targets."""

    def __init__(self, variant: str, widths: Sequence[int] = (64, 64, 32), seed: int = 0):
        if variant not in ("farm", "turbine"):
            raise ValueError(f"variant must be 'farm' or 'turbine', got {variant!r}")
        rng = np.random.default_rng(seed)
        self.variant = variant
        self.mlp = MLP(2, [*widths, 1], rng, activate_last=False)
        self.widths, self.seed = tuple(widths), seed

    @property
    def kind(self) -> str:
        return f"bs-{self.variant}"

    def __call__(self, samples) -> Tensor:
        return self.mlp(Tensor(np.array([[s.n_turbines, s.ws] for s in samples])))

    def config(self) -> dict:
        return {"variant": self.variant, "widths": list(self.widths), "seed": self.seed}


def predict_column(model, samples) -> np.ndarray:
    return model(samples).data[:, 0].copy()
