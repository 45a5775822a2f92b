"""Per-language neuron awareness scores and the general/specific partition.

A neuron's awareness for a language is the first-order estimate of how much
the LM loss on that language's text changes when the neuron is silenced:
``|dL/dh * h|`` accumulated per position. Neurons whose scores vary least
across languages are language-general; the rest are assigned to their
highest-scoring language.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .model import Batch
from .numerics import GradientTape, Tensor


class AwarenessError(ValueError):
    pass


def score_language(model, mono_data: Sequence[Batch], layers: Iterable[int],
                   aggregate: str = "token") -> dict[int, np.ndarray]:
    """Awareness of every neuron in ``layers`` on one language's batches.

    For each batch the gradient is taken of the summed (not averaged) token
    loss, so the per-position products do not depend on how the stream is
    batched. ``aggregate="token"`` sums ``|g * h|`` over valid positions;
    ``"batch"`` takes ``|sum g * h|`` per batch instead and may cancel signs.
    Either total is divided by the number of predicted tokens.
    """
    if not mono_data:
        raise AwarenessError("no batches to score")
    if aggregate not in ("token", "batch"):
        raise ValueError("aggregate must be 'token' or 'batch'")
    layers = sorted(set(layers))
    totals: dict[int, np.ndarray] = {}
    n_tok = 0
    for batch in mono_data:
        with GradientTape(retain_intermediates=True) as tape:
            out, rec = model.forward(batch, record_layers=layers)
            loss = model.loss(out, batch)
            n = batch.n_targets
            tape.backward(nx.scale(loss, float(n)))
        valid = batch.valid[..., None]
        for j in layers:
            prod = tape.grad(rec[j]) * rec[j].data * valid
            if aggregate == "token":
                s = np.abs(prod).sum(axis=(0, 1))
            else:
                s = np.abs(prod.sum(axis=(0, 1)))
            totals[j] = totals[j] + s if j in totals else s
        n_tok += n
    return {j: totals[j] / n_tok for j in layers}


def ablation_delta(model, batch: Batch, layer: int, neuron: int) -> float:
    """|L(h_neuron = 0) - L| for the batch's mean token loss, by two forward passes."""
    d_ff = model.config.d_ff
    if not 0 <= neuron < d_ff:
        raise IndexError(f"neuron {neuron} out of range [0, {d_ff})")
    out, _ = model.forward(batch)
    base = model.loss(out, batch).item()
    out, _ = model.forward(batch, ablate={layer: [neuron]})
    return abs(model.loss(out, batch).item() - base)


def ablation_profile(model, data: Sequence[Batch], layer: int) -> np.ndarray:
    """Token-weighted mean ablation delta of every neuron of ``layer`` over ``data``."""
    d_ff = model.config.d_ff
    acc = np.zeros(d_ff)
    n_tok = 0
    for batch in data:
        n = batch.n_targets
        acc += n * np.array([ablation_delta(model, batch, layer, i) for i in range(d_ff)])
        n_tok += n
    return acc / n_tok


@dataclass
class AwarenessTable:
    """``phi[layer]`` is (d_ff, n_languages) in ``languages`` order."""

    layers: list[int]
    languages: list[str]
    phi: dict[int, np.ndarray]
    counts: dict[str, int] = field(default_factory=dict)
    pair_layers: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        for j in self.layers:
            arr = self.phi.get(j)
            if arr is None or arr.ndim != 2 or arr.shape[1] != len(self.languages):
                raise AwarenessError(f"layer {j}: scores missing for some language")
            if (arr < 0).any():
                raise AwarenessError(f"layer {j}: negative awareness score")

    def column(self, layer: int, lang: str) -> np.ndarray:
        return self.phi[layer][:, self.languages.index(lang)]

    def to_json(self) -> dict:
        return {
            "layers": self.layers,
            "languages": self.languages,
            "phi": {str(j): {lg: self.phi[j][:, k].tolist() for k, lg in enumerate(self.languages)}
                    for j in self.layers},
            "counts": self.counts,
            "pair_layers": self.pair_layers,
        }

    @classmethod
    def from_json(cls, d: dict) -> "AwarenessTable":
        langs = list(d["languages"])
        layers = [int(j) for j in d["layers"]]
        phi = {j: np.column_stack([np.asarray(d["phi"][str(j)][lg], dtype=float) for lg in langs])
               for j in layers}
        return cls(layers, langs, phi, dict(d.get("counts", {})),
                   {k: [int(x) for x in v] for k, v in d.get("pair_layers", {}).items()})


def score_table(model, mono: dict[str, Sequence[Batch]], layers: Iterable[int],
                aggregate: str = "token", pair_layers: dict[str, list[int]] | None = None) -> AwarenessTable:
    """Score every language in ``mono`` (insertion order fixes the column order)."""
    layers = sorted(set(layers))
    langs = list(mono)
    cols = {lg: score_language(model, mono[lg], layers, aggregate) for lg in langs}
    phi = {j: np.column_stack([cols[lg][j] for lg in langs]) for j in layers}
    counts = {lg: sum(b.n_targets for b in mono[lg]) for lg in langs}
    return AwarenessTable(layers, langs, phi, counts, dict(pair_layers or {}))


@dataclass
class LayerPartition:
    layer: int
    general: list[int]
    specific: dict[str, list[int]]
    variance: np.ndarray
    lambda_: float
    phi: dict[str, np.ndarray]

    def pair_specific(self, pair: tuple[str, str]) -> list[int]:
        for lg in pair:
            if lg not in self.specific:
                raise KeyError(f"language {lg!r} has no specific set in layer {self.layer}")
        return sorted(set(self.specific[pair[0]]) | set(self.specific[pair[1]]))


@dataclass
class NeuronPartition:
    """The partition manifest shared by the scoring and training stages."""

    epsilon: float
    layers: dict[int, LayerPartition]
    languages: list[str]
    pair_layers: dict[str, list[int]] = field(default_factory=dict)

    def layers_for(self, pair: tuple[str, str]) -> list[int]:
        tag = f"{pair[0]}-{pair[1]}"
        return sorted(self.pair_layers.get(tag, self.layers))

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "languages": self.languages,
            "pair_layers": self.pair_layers,
            "layers": {
                str(j): {
                    "lambda": lp.lambda_,
                    "general": lp.general,
                    "specific": lp.specific,
                    "variance": lp.variance.tolist(),
                    "phi": {lg: np.asarray(v).tolist() for lg, v in lp.phi.items()},
                }
                for j, lp in sorted(self.layers.items())
            },
        }

    @classmethod
    def from_json(cls, d: dict) -> "NeuronPartition":
        layers = {}
        for key, v in d["layers"].items():
            j = int(key)
            layers[j] = LayerPartition(
                j, [int(i) for i in v["general"]],
                {lg: [int(i) for i in ids] for lg, ids in v["specific"].items()},
                np.asarray(v["variance"], dtype=float), float(v["lambda"]),
                {lg: np.asarray(x, dtype=float) for lg, x in v["phi"].items()})
        langs = list(d.get("languages") or next(iter(layers.values())).phi)
        return cls(float(d["epsilon"]), layers, langs,
                   {k: [int(x) for x in v] for k, v in d.get("pair_layers", {}).items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "NeuronPartition":
        return cls.from_json(json.loads(Path(path).read_text()))


def partition(table: AwarenessTable, epsilon: float) -> NeuronPartition:
    """Lowest-variance ``floor(epsilon * p)`` neurons per layer are general.

    Ties in variance go to the lower neuron id. Every other neuron is specific
    to its argmax language (ties: earlier language in ``table.languages``).
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie strictly between 0 and 1")
    if len(table.languages) < 2:
        raise AwarenessError("need scores for at least two languages")
    layers = {}
    for j in table.layers:
        phi = table.phi[j]
        p = phi.shape[0]
        var = phi.var(axis=1)
        order = np.argsort(var, kind="stable")
        n_gen = int(np.floor(epsilon * p))
        general = sorted(int(i) for i in order[:n_gen])
        lam = float(var[order[n_gen]])
        best = np.argmax(phi, axis=1)
        specific = {lg: [] for lg in table.languages}
        for i in sorted(int(i) for i in order[n_gen:]):
            specific[table.languages[best[i]]].append(i)
        layers[j] = LayerPartition(j, general, specific, var, lam,
                                   {lg: phi[:, k].copy() for k, lg in enumerate(table.languages)})
    return NeuronPartition(float(epsilon), layers, list(table.languages), dict(table.pair_layers))


def pair_neurons(part: NeuronPartition, pair: tuple[str, str]) -> dict[int, list[int]]:
    """Per layer, the neurons specific to either language of ``pair``."""
    if pair[0] == pair[1]:
        raise ValueError("a pair needs two distinct languages")
    return {j: lp.pair_specific(pair) for j, lp in sorted(part.layers.items())}


class LinearProbe:
    """One ReLU hidden layer with a loss that is linear in the hidden units.

    Shares the ``forward``/``loss`` interface of :class:`TransformerModel`, so
    the scoring and ablation functions run on it unchanged. For this model the
    first-order estimate is exact.
    """

    def __init__(self, vocab_size: int, d_model: int = 8, d_ff: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = _ProbeConfig(d_ff)
        self.emb = Tensor(rng.normal(size=(vocab_size, d_model)))
        self.w1 = Tensor(rng.normal(size=(d_ff, d_model)), requires_grad=True)
        self.b1 = Tensor(rng.normal(size=d_ff), requires_grad=True)
        self.v = Tensor(rng.normal(size=(1, d_ff)), requires_grad=True)

    def forward(self, batch: Batch, record_layers=(), ablate=None):
        h = nx.relu(nx.linear(nx.embedding(self.emb, batch.ids), self.w1, self.b1))
        if ablate and 0 in ablate:
            keep = np.ones(self.config.d_ff)
            keep[list(ablate[0])] = 0.0
            h = nx.mul(h, Tensor(keep))
        rec = {0: h} if 0 in set(record_layers) else {}
        return nx.linear(h, self.v), rec

    def loss(self, out: Tensor, batch: Batch) -> Tensor:
        m = np.zeros(batch.ids.shape)
        m[:, :-1] = batch.loss_mask[:, 1:]
        return nx.scale(nx.sum_all(nx.mul(out, Tensor(m[..., None]))), 1.0 / batch.n_targets)


@dataclass
class _ProbeConfig:
    d_ff: int

