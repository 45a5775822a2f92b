"""Conditional awareness-based routing of a detected layer's FFN.

The layer's neurons split into a general branch and a pair-specific branch.
The general branch sees ``car * x`` and the specific branch ``(1 - car) * x``;
their down-projections are summed and ``b2`` is added once. Neurons in
neither set contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class RoutedLayer:
    layer: int
    general: tuple[int, ...]
    specific: tuple[int, ...]
    car: float
    pair: str | None = None
    # feeds car to the specific branch instead of the general one
    swap: bool = False

    def __post_init__(self):
        g, s = set(self.general), set(self.specific)
        if g & s:
            raise RoutingError(f"layer {self.layer}: general and specific sets overlap")
        if not g and not s:
            raise RoutingError(f"layer {self.layer}: both neuron sets are empty")
        if not 0.0 <= self.car <= 1.0:
            raise RoutingError(f"car={self.car} outside [0, 1]")

    @property
    def general_scale(self) -> float:
        return 1.0 - self.car if self.swap else self.car

    @property
    def specific_scale(self) -> float:
        return self.car if self.swap else 1.0 - self.car

    def to_dict(self) -> dict:
        return {"layer": self.layer, "general": list(self.general), "specific": list(self.specific),
                "car": self.car, "pair": self.pair, "swap": self.swap}

    @classmethod
    def from_dict(cls, d: dict) -> "RoutedLayer":
        return cls(int(d["layer"]), tuple(int(i) for i in d["general"]),
                   tuple(int(i) for i in d["specific"]), float(d["car"]), d.get("pair"),
                   bool(d.get("swap", False)))


def pair_phi(phi: dict[str, np.ndarray], pair: tuple[str, str]) -> np.ndarray:
    """Per-neuron awareness for a pair: mean of the two languages' scores."""
    a, b = pair
    try:
        return 0.5 * (np.asarray(phi[a]) + np.asarray(phi[b]))
    except KeyError as exc:
        raise KeyError(f"language {exc.args[0]!r} was not scored") from None


def car_from_phi(specific_phi: np.ndarray, general_phi: np.ndarray) -> float:
    """sum(specific) / (sum(specific) + sum(general)); 0 when both sums vanish."""
    s = np.asarray(specific_phi, dtype=np.float64)
    g = np.asarray(general_phi, dtype=np.float64)
    if (s < 0).any() or (g < 0).any():
        raise RoutingError("awareness scores must be non-negative")
    num = float(s.sum())
    den = num + float(g.sum())
    return 0.0 if den == 0.0 else num / den


def compute_car(manifest, table, pair: tuple[str, str], layer: int) -> float:
    """CAR of ``pair`` at ``layer`` from a partition and an awareness table."""
    if layer not in manifest.layers:
        raise RoutingError(f"layer {layer} is not partitioned")
    lp = manifest.layers[layer]
    phi = pair_phi({lg: table.column(layer, lg) for lg in pair}, pair)
    return car_from_phi(phi[sorted(lp.pair_specific(pair))], phi[sorted(lp.general)])


def routed_forward(x: Tensor, routed: RoutedLayer, model) -> Tensor:
    """Fused output of the routed FFN for (normalised) input ``x`` of width d_model."""
    w1, b1, w2, b2 = model.ffn(routed.layer)
    if x.shape[-1] != w1.shape[1]:
        raise nx.ShapeError(f"input width {x.shape[-1]} != d_model {w1.shape[1]}")
    out = None
    for ids, s in ((routed.general, routed.general_scale), (routed.specific, routed.specific_scale)):
        if not ids:
            continue
        idx = np.asarray(ids, dtype=np.intp)
        hid = nx.relu(nx.linear(nx.scale(x, s), nx.take(w1, idx, axis=0), nx.take(b1, idx, axis=0)))
        branch = nx.linear(hid, nx.take(w2, idx, axis=1))
        out = branch if out is None else nx.add(out, branch)
    return nx.add(out, b2)


def build_routing(manifest, pair: tuple[str, str], layers=None, swap: bool = False) -> dict[int, RoutedLayer]:
    """RoutedLayer per detected layer of ``pair`` from a partition manifest."""
    layers = manifest.layers_for(pair) if layers is None else layers
    tag = f"{pair[0]}-{pair[1]}"
    out: dict[int, RoutedLayer] = {}
    for j in sorted(layers):
        lp = manifest.layers[j]
        general = sorted(lp.general)
        specific = sorted(lp.pair_specific(pair))
        phi = pair_phi(lp.phi, pair)
        car = car_from_phi(phi[specific], phi[general])
        out[j] = RoutedLayer(j, tuple(general), tuple(specific), car, tag, swap)
    return out
