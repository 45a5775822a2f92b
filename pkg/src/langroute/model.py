"""Toy pre-norm decoder-only transformer.

The hidden units of each block's FFN (``relu(x @ w1.T + b1)``) are the
"neurons" the rest of the package scores, partitions and routes. ``w1`` is
stored as (d_ff, d_model) so neuron ``i`` owns row ``i`` of ``w1``, entry
``i`` of ``b1`` and column ``i`` of ``w2`` (d_model, d_ff).
"""

from __future__ import annotations

import copy
from collections.abc import Iterable, Mapping
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import numerics as nx
from .numerics import Tensor

if TYPE_CHECKING:
    from .router import RoutedLayer


class SequenceLengthError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 8
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    max_seq_len: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ff < 16:
            raise ValueError("d_ff must be at least 16")
        if min(self.vocab_size, self.n_layers, self.max_seq_len) < 1:
            raise ValueError("vocab_size, n_layers and max_seq_len must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Right-padded token ids with a target-side loss mask.

    ``loss_mask[b, t]`` marks token ``t`` as something the model must predict
    (from position ``t - 1``). ``valid`` marks non-padding positions.
    """

    ids: np.ndarray
    loss_mask: np.ndarray
    valid: np.ndarray | None = None
    pair: str | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 2:
            raise ValueError("ids must be (batch, time)")
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        self.valid = (np.ones_like(self.loss_mask) if self.valid is None
                      else np.asarray(self.valid, dtype=bool))
        if self.loss_mask.shape != self.ids.shape or self.valid.shape != self.ids.shape:
            raise ValueError("ids, loss_mask and valid must share a shape")

    @property
    def n_targets(self) -> int:
        return int(self.loss_mask[:, 1:].sum())


def _layer_names(j: int) -> list[str]:
    p = f"layers.{j}."
    return [p + n for n in ("ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
                            "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")]


class TransformerModel:
    """Parameters live in ``self.params`` (insertion-ordered name -> Tensor)."""

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray] | None = None):
        self.config = config
        if params is None:
            params = _init_params(config)
        self.params: dict[str, Tensor] = {
            name: Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=name)
            for name, arr in params.items()
        }
        expected = _init_shapes(config)
        if list(self.params) != list(expected):
            raise ValueError("parameter names do not match the config layout")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def ffn(self, layer: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        p = f"layers.{layer}.ffn."
        return self[p + "w1"], self[p + "b1"], self[p + "w2"], self[p + "b2"]

    def copy(self) -> "TransformerModel":
        return TransformerModel(copy.deepcopy(self.config),
                                {n: t.data.copy() for n, t in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def forward(self, batch: "Batch", **kw) -> tuple[Tensor, dict[int, Tensor]]:
        return forward(self, batch, **kw)

    def loss(self, logits: Tensor, batch: "Batch") -> Tensor:
        return loss_from_logits(logits, batch)


def _init_shapes(c: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = c.d_model, c.d_ff
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (c.vocab_size, d), "pos_emb": (c.max_seq_len, d)}
    for j in range(c.n_layers):
        names = _layer_names(j)
        for n, s in zip(names, [(d,), (d,), (d, d), (d, d), (d, d), (d, d), (d,), (d,),
                                (f, d), (f,), (d, f), (d,)]):
            shapes[n] = s
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "out.w": (c.vocab_size, d), "out.b": (c.vocab_size,)})
    return shapes


def _init_params(c: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(c.seed)
    resid = 1.0 / np.sqrt(2 * c.n_layers)
    out: dict[str, np.ndarray] = {}
    for name, shape in _init_shapes(c).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("tok_emb", "pos_emb"):
            arr = rng.normal(0.0, 0.3, shape)
        elif name == "out.w":
            # logit std 0.5 at init: loss starts near ln(V) yet stays trainable
            # when the output projection is frozen
            arr = rng.normal(0.0, 0.5 / np.sqrt(shape[1]), shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            std = 1.0 / np.sqrt(shape[1])
            if leaf in ("wo", "w2"):
                std *= resid
            arr = rng.normal(0.0, std, shape)
        out[name] = arr
    return out


def _causal_keep(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def _attention(model: TransformerModel, j: int, a: Tensor) -> Tensor:
    c = model.config
    B, T, d = a.shape
    H, dh = c.n_heads, d // c.n_heads
    p = f"layers.{j}.attn."

    def heads(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = heads(nx.linear(a, model[p + "wq"]))
    k = heads(nx.linear(a, model[p + "wk"]))
    v = heads(nx.linear(a, model[p + "wv"]))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = nx.softmax(scores, keep=_causal_keep(T))
    o = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (B, T, d))
    return nx.linear(o, model[p + "wo"])


def forward(
    model: TransformerModel,
    batch: Batch,
    record_layers: Iterable[int] = (),
    ablate: Mapping[int, Iterable[int]] | None = None,
    routing: Mapping[int, "RoutedLayer"] | None = None,
) -> tuple[Tensor, dict[int, Tensor]]:
    """Causal logits (B, T, V) plus post-ReLU FFN hidden activations for ``record_layers``.

    ``ablate`` maps a layer to neuron ids whose activation is forced to 0.
    ``routing`` maps a layer to a :class:`RoutedLayer` that replaces its plain FFN.
    """
    c = model.config
    ids = batch.ids
    B, T = ids.shape
    if T > c.max_seq_len:
        raise SequenceLengthError(f"sequence length {T} exceeds max_seq_len={c.max_seq_len}")
    record = set(record_layers)
    if any(not 0 <= j < c.n_layers for j in record):
        raise IndexError(f"record_layers must lie in [0, {c.n_layers})")
    routing = routing or {}
    if record & set(routing):
        raise ValueError("cannot record hidden activations of a routed layer")

    x = nx.add(nx.embedding(model["tok_emb"], ids), nx.take(model["pos_emb"], np.arange(T), axis=0))
    recorded: dict[int, Tensor] = {}
    for j in range(c.n_layers):
        p = f"layers.{j}."
        a = nx.layer_norm(x, model[p + "ln1.g"], model[p + "ln1.b"])
        x = nx.add(x, _attention(model, j, a))
        a = nx.layer_norm(x, model[p + "ln2.g"], model[p + "ln2.b"])
        if j in routing:
            from .router import routed_forward

            x = nx.add(x, routed_forward(a, routing[j], model))
            continue
        w1, b1, w2, b2 = model.ffn(j)
        hid = nx.relu(nx.linear(a, w1, b1))
        if ablate and j in ablate:
            keep = np.ones(c.d_ff)
            keep[list(ablate[j])] = 0.0
            hid = nx.mul(hid, Tensor(keep))
        if j in record:
            recorded[j] = hid
        x = nx.add(x, nx.linear(hid, w2, b2))
    x = nx.layer_norm(x, model["ln_f.g"], model["ln_f.b"])
    return nx.linear(x, model["out.w"], model["out.b"]), recorded


def shifted_targets(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Next-token targets aligned to logits positions, and their mask."""
    B, T = batch.ids.shape
    targets = np.zeros_like(batch.ids)
    targets[:, :-1] = batch.ids[:, 1:]
    mask = np.zeros((B, T), dtype=bool)
    mask[:, :-1] = batch.loss_mask[:, 1:]
    return targets, mask


def loss_from_logits(logits: Tensor, batch: Batch) -> Tensor:
    targets, mask = shifted_targets(batch)
    return nx.softmax_cross_entropy(logits, targets, mask)


def lm_loss(model: TransformerModel, batch: Batch, **forward_kw) -> Tensor:
    """Mean cross-entropy over the batch's target-side tokens."""
    logits, _ = forward(model, batch, **forward_kw)
    return loss_from_logits(logits, batch)


def param_groups(
    model: TransformerModel, layers: Iterable[int], neuron_sets: Mapping[int, Iterable[int]]
) -> dict[str, np.ndarray]:
    """Flat (row-major) coordinates owned by the given neurons of the given layers.

    Per layer: rows of ``w1``, entries of ``b1`` and columns of ``w2``. Nothing else.
    """
    c = model.config
    sel: dict[str, np.ndarray] = {}
    for j in sorted(set(layers)):
        if not 0 <= j < c.n_layers:
            raise IndexError(f"layer {j} out of range [0, {c.n_layers})")
        neurons = np.array(sorted(set(int(i) for i in neuron_sets.get(j, ()))), dtype=np.int64)
        if neurons.size and (neurons.min() < 0 or neurons.max() >= c.d_ff):
            raise IndexError(f"neuron id out of range [0, {c.d_ff})")
        if neurons.size == 0:
            continue
        p = f"layers.{j}.ffn."
        d = c.d_model
        sel[p + "w1"] = (neurons[:, None] * d + np.arange(d)[None, :]).reshape(-1)
        sel[p + "b1"] = neurons.copy()
        sel[p + "w2"] = np.sort((np.arange(d)[:, None] * c.d_ff + neurons[None, :]).reshape(-1))
    return sel

