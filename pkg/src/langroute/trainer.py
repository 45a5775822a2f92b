"""Selective finetuning with a coordinate-masked AdamW.

Only coordinates listed in an :class:`UpdateMask` are ever written, and
optimizer moments exist only for them. Everything else in the model stays
bit-identical.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .awareness import NeuronPartition
from .model import Batch, TransformerModel, forward, loss_from_logits, param_groups
from .numerics import GradientTape
from .router import RoutedLayer, build_routing

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, msg: str, step: int):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 8
    grad_accum_steps: int = 10
    epochs: int = 1
    # micro-batch iterations per pair per epoch
    steps_per_pair: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    seed: int = 0
    schedule: str = "round_robin"

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.grad_accum_steps, self.epochs) <= 0:
            raise ValueError("learning_rate, batch_size, grad_accum_steps and epochs must be positive")
        if self.steps_per_pair < 0:
            raise ValueError("steps_per_pair must be non-negative")
        if self.schedule not in ("round_robin", "sequential"):
            raise ValueError("schedule must be 'round_robin' or 'sequential'")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UpdateMask:
    """Sorted flat coordinates per parameter name; absent names are frozen."""

    coords: dict[str, np.ndarray] = field(default_factory=dict)

    def count(self) -> int:
        return int(sum(c.size for c in self.coords.values()))

    def dense(self, model: TransformerModel) -> dict[str, np.ndarray]:
        out = {}
        for name, t in model.params.items():
            m = np.zeros(t.size, dtype=bool)
            if name in self.coords:
                m[self.coords[name]] = True
            out[name] = m.reshape(t.shape)
        return out

    @classmethod
    def full(cls, model: TransformerModel) -> "UpdateMask":
        return cls({n: np.arange(t.size) for n, t in model.params.items()})


def build_update_mask(model: TransformerModel, part: NeuronPartition, pair: tuple[str, str],
                      layers: Sequence[int] | None = None) -> UpdateMask:
    """General plus pair-specific neuron coordinates inside the pair's detected layers."""
    layers = part.layers_for(pair) if layers is None else sorted(layers)
    missing = [j for j in layers if j not in part.layers]
    if missing:
        raise ValueError(f"partition does not cover layers {missing}")
    sets = {j: set(part.layers[j].general) | set(part.layers[j].pair_specific(pair)) for j in layers}
    if not any(sets.values()):
        raise ValueError("no neurons selected for update")
    return UpdateMask(param_groups(model, layers, sets))


def general_mask(model: TransformerModel, part: NeuronPartition, layers: Sequence[int]) -> UpdateMask:
    return UpdateMask(param_groups(model, layers, {j: part.layers[j].general for j in layers}))


def _same_mask(a: UpdateMask, b: UpdateMask) -> bool:
    return a is b or (a.coords.keys() == b.coords.keys()
                      and all(np.array_equal(a.coords[k], b.coords[k]) for k in a.coords))


class MaskedAdamW:
    """AdamW over the masked coordinates only, with per-coordinate step counts.

    Decoupled weight decay applies to weight matrices (2-D parameters) only.
    """

    def __init__(self, model: TransformerModel, config: TrainConfig):
        self.model = model
        self.cfg = config
        self.state: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}
        self.mask: UpdateMask | None = None

    def set_mask(self, mask: UpdateMask, persist: UpdateMask | None = None) -> None:
        """Switch to ``mask``; moments carry over only for coordinates in ``persist``.

        Re-selecting the current mask keeps all moments.
        """
        if self.mask is not None and _same_mask(mask, self.mask):
            return
        self.mask = mask
        new = {}
        for name, idx in mask.coords.items():
            m = np.zeros(idx.size)
            v = np.zeros(idx.size)
            t = np.zeros(idx.size)
            old = self.state.get(name)
            if old is not None and persist is not None and name in persist.coords:
                keep = np.intersect1d(old[0], persist.coords[name])
                _, i_new, i_keep = np.intersect1d(idx, keep, return_indices=True)
                _, i_old, _ = np.intersect1d(old[0], keep[i_keep], return_indices=True)
                m[i_new], v[i_new], t[i_new] = old[1][i_old], old[2][i_old], old[3][i_old]
            new[name] = (idx, m, v, t)
        self.state = new

    def n_state(self) -> int:
        return int(sum(s[0].size for s in self.state.values()))

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        c = self.cfg
        for name, (idx, m, v, t) in self.state.items():
            p = self.model.params[name]
            g = grads.get(name)
            flat = p.data.reshape(-1)
            g = np.zeros(idx.size) if g is None else g.reshape(-1)[idx]
            t += 1
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            mhat = m / (1 - c.beta1 ** t)
            vhat = v / (1 - c.beta2 ** t)
            w = flat[idx]
            if p.data.ndim == 2 and c.weight_decay:
                w = w - c.learning_rate * c.weight_decay * w
            flat[idx] = w - c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)


@dataclass
class TrainLog:
    rows: list[tuple[int, str, float, float]] = field(default_factory=list)

    def add(self, step: int, pair: str, loss: float, lr: float) -> None:
        self.rows.append((step, pair, loss, lr))

    def losses(self, pair: str | None = None) -> np.ndarray:
        return np.array([r[2] for r in self.rows if pair is None or r[1] == pair])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "pair", "loss", "lr"])
            for s, p, l, lr in self.rows:
                w.writerow([s, p, repr(l), repr(lr)])


@dataclass
class FinetuneResult:
    model: TransformerModel
    log: TrainLog
    routing: dict[str, dict[int, RoutedLayer]]
    mask_sizes: dict[str, int]


def _cycle(batches: Sequence[Batch]):
    while True:
        yield from batches


def _schedule(pairs: Sequence[str], config: TrainConfig) -> list[tuple[str, int]]:
    """(pair, n_micro_batches) blocks; each block is a run of whole accumulation windows."""
    total = config.steps_per_pair
    a = config.grad_accum_steps
    blocks: list[tuple[str, int]] = []
    for _ in range(config.epochs):
        if config.schedule == "sequential":
            blocks += [(p, total) for p in pairs]
            continue
        done = 0
        while done < total:
            n = min(a, total - done)
            blocks += [(p, n) for p in pairs]
            done += n
    return [b for b in blocks if b[1] > 0]


def train(model: TransformerModel, data: Mapping[str, Sequence[Batch]], config: TrainConfig,
          masks: Mapping[str, UpdateMask] | None = None,
          routing: Mapping[str, Mapping[int, RoutedLayer]] | None = None,
          persist: UpdateMask | None = None, optimizer: MaskedAdamW | None = None) -> TrainLog:
    """Train ``model`` in place on each pair's batch stream.

    ``masks[pair]`` (default: everything) picks the trainable coordinates while
    that pair is active and ``routing[pair]`` its routed layers. Pair switches
    reset optimizer moments except on ``persist`` coordinates. Passing the
    ``optimizer`` of an earlier call resumes its state.
    """
    pairs = list(data)
    streams = {p: _cycle(data[p]) for p in pairs}
    opt = optimizer or MaskedAdamW(model, config)
    full = UpdateMask.full(model) if masks is None else None
    log_ = TrainLog()
    step = 0
    for pair, n in _schedule(pairs, config):
        opt.set_mask(full if masks is None else masks[pair], persist)
        route = (routing or {}).get(pair)
        acc: dict[str, np.ndarray] = {}
        k = 0
        for _ in range(n):
            batch = next(streams[pair])
            try:
                with GradientTape(retain_intermediates=False) as tape:
                    logits, _ = forward(model, batch, routing=route)
                    loss = loss_from_logits(logits, batch)
                    tape.backward(loss)
            except nx.NumericError as exc:
                raise TrainingError(f"non-finite value ({exc})", step) from exc
            lval = loss.item()
            if not np.isfinite(lval):
                raise TrainingError("non-finite loss", step)
            for name in opt.state:
                t = model.params[name]
                if t.id in tape.grads:
                    g = tape.grads[t.id]
                    acc[name] = acc[name] + g if name in acc else g.copy()
            log_.add(step, pair, lval, config.learning_rate)
            step += 1
            k += 1
            if k == config.grad_accum_steps:
                opt.step({n_: g / k for n_, g in acc.items()})
                acc, k = {}, 0
        if k:
            opt.step({n_: g / k for n_, g in acc.items()})
    return log_


def finetune_pairs(model: TransformerModel, data: Mapping[str, Sequence[Batch]], part: NeuronPartition,
                   config: TrainConfig, use_routing: bool = True, swap_car: bool = False,
                   layers: Mapping[str, Sequence[int]] | None = None) -> FinetuneResult:
    """Selective finetuning of a copy of ``model`` on every pair in ``data``."""
    from .corpus import parse_pair

    model = model.copy()
    masks, routing = {}, {}
    all_layers: set[int] = set()
    for tag in data:
        pair = parse_pair(tag)
        lay = part.layers_for(pair) if layers is None else sorted(layers[tag])
        all_layers |= set(lay)
        masks[tag] = build_update_mask(model, part, pair, lay)
        routing[tag] = build_routing(part, pair, lay, swap_car) if use_routing else {}
    persist = general_mask(model, part, sorted(all_layers))
    log_ = train(model, data, config, masks, routing, persist)
    return FinetuneResult(model, log_, routing, {t: m.count() for t, m in masks.items()})


def finetune_pair(model: TransformerModel, pair: str, data: Sequence[Batch], part: NeuronPartition,
                  config: TrainConfig, **kw) -> FinetuneResult:
    return finetune_pairs(model, {pair: data}, part, config, **kw)


def full_finetune(model: TransformerModel, data: Mapping[str, Sequence[Batch]] | Sequence[Batch],
                  config: TrainConfig) -> FinetuneResult:
    """Every coordinate trainable, plain FFNs. Returns a trained copy."""
    if not isinstance(data, Mapping):
        data = {data[0].pair or "all": data}
    model = model.copy()
    log_ = train(model, data, config)
    return FinetuneResult(model, log_, {}, {t: model.n_params() for t in data})
