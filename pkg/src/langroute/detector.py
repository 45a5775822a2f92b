"""Language-pair-relevant layer detection from adjacent-layer activation shifts."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Batch, TransformerModel, forward

ATTRIBUTION_NOTE = "D[boundary] = |mean A(boundary) - mean A(boundary+1)|; relevance attributed to layer boundary+1"


@dataclass
class ActivationTrace:
    """``means[i, n]``: mean FFN hidden activation of layer ``i`` during pass ``n``."""

    means: np.ndarray
    pair: str | None = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        if self.means.ndim != 2 or self.means.shape[1] < 1:
            raise ValueError("trace must be (n_layers, passes) with at least one pass")

    @property
    def n_passes(self) -> int:
        return self.means.shape[1]

    def layer_means(self) -> np.ndarray:
        return self.means.mean(axis=1)


@dataclass
class LayerRelevance:
    D: np.ndarray
    selected: list[int]
    k: int
    pair: str | None = None

    def to_json(self, trace: ActivationTrace | None = None) -> dict:
        out = {"pair": self.pair, "k": self.k, "D": list(map(float, self.D)),
               "selected": self.selected, "attribution": ATTRIBUTION_NOTE}
        if trace is not None:
            out["layer_means"] = list(map(float, trace.layer_means()))
        return out


def trace_activations(model: TransformerModel, data: Sequence[Batch], passes: int,
                      absolute: bool = False) -> ActivationTrace:
    """Pass ``n`` runs batch ``data[n % len(data)]`` and averages every layer's
    FFN hidden activations over neurons and non-padding positions.

    ``absolute`` averages magnitudes instead of signed values (identical for ReLU).
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    if not data:
        raise ValueError("no batches to trace")
    L = model.config.n_layers
    means = np.zeros((L, passes))
    for n in range(passes):
        batch = data[n % len(data)]
        _, rec = forward(model, batch, record_layers=range(L))
        valid = batch.valid
        for i in range(L):
            h = rec[i].data[valid]
            means[i, n] = (np.abs(h) if absolute else h).mean()
    return ActivationTrace(means, data[0].pair)


def activation_deltas(trace: ActivationTrace) -> np.ndarray:
    """|difference of pass-averaged means| across each adjacent layer boundary."""
    m = trace.layer_means()
    return np.abs(m[:-1] - m[1:])


def select_layers(D: Sequence[float], k: int) -> list[int]:
    """Layers (boundary + 1) behind the ``k`` largest deltas; ties favour lower boundaries."""
    D = np.asarray(D, dtype=float)
    if not 0 <= k <= D.size:
        raise ValueError(f"k must lie in [0, {D.size}]")
    order = sorted(range(D.size), key=lambda b: (-D[b], b))
    return sorted(b + 1 for b in order[:k])


def detect_layers(model: TransformerModel, data: Sequence[Batch], k: int, passes: int | None = None,
                  absolute: bool = False) -> tuple[LayerRelevance, ActivationTrace]:
    trace = trace_activations(model, data, passes or len(data), absolute)
    D = activation_deltas(trace)
    return LayerRelevance(D, select_layers(D, k), k, trace.pair), trace


def write_activation_csv(path: str | Path, traces: dict[str, ActivationTrace]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "layer", "mean_activation"])
        for pair, tr in traces.items():
            for i, v in enumerate(tr.layer_means()):
                w.writerow([pair, i, repr(float(v))])


def write_delta_csv(path: str | Path, deltas: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {ATTRIBUTION_NOTE}\n")
        w = csv.writer(fh)
        w.writerow(["pair", "boundary", "D"])
        for pair, D in deltas.items():
            for b, v in enumerate(D):
                w.writerow([pair, b, repr(float(v))])


def load_layers_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
