"""Desk-scale experiments: forgetting under full vs selective finetuning, and
the k / epsilon sweeps. Each returns plain data plus CSV/JSON writers."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pipeline as P
from .corpus import CorpusDir, build_synthetic_corpus, parse_pair
from .model import ModelConfig, TransformerModel
from .router import build_routing
from .trainer import TrainConfig, finetune_pairs, full_finetune

log = logging.getLogger(__name__)

DEFAULT_PAIRS = ("aa-bb", "aa-cc", "aa-dd", "bb-cc")


@dataclass
class ExperimentConfig:
    """Toy-scale settings shared by all experiments."""

    pairs: tuple[str, ...] = DEFAULT_PAIRS
    n_train: int = 2000
    n_test: int = 200
    base_vocab: int = 32
    n_layers: int = 8
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    max_seq_len: int = 48
    pretrain_lr: float = 1e-3
    batch_size: int = 16
    target_accuracy: float = 0.8
    check_every: int = 50
    max_rounds: int = 120
    finetune_lr: float = 1e-3
    finetune_steps: int = 300
    k: int = 2
    epsilon: float = 0.9
    finetune_target: str = "aa-bb"
    n_fresh: int = 2000
    score_limit: int = 256
    eval_limit: int = 200
    swap_car: bool = False

    @property
    def languages(self) -> list[str]:
        return P.languages_of(self.pairs)

    def model_config(self, vocab_size: int, seed: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.n_layers, self.d_model, self.d_ff, self.n_heads,
                           self.max_seq_len, seed)

    def pretrain_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.pretrain_lr, batch_size=self.batch_size, grad_accum_steps=1,
                           weight_decay=0.0, seed=seed)

    def finetune_config(self, seed: int, steps: int | None = None) -> TrainConfig:
        return TrainConfig(learning_rate=self.finetune_lr, batch_size=self.batch_size, grad_accum_steps=1,
                           steps_per_pair=self.finetune_steps if steps is None else steps,
                           weight_decay=0.0, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BaseSetup:
    """A pretrained base model with its corpus and the detection/partition stages."""

    seed: int
    corpus: CorpusDir
    model: TransformerModel
    pretrain: P.PretrainResult
    accuracy: dict[str, float]
    deltas: dict[str, np.ndarray] = field(default_factory=dict)


def build_base(cfg: ExperimentConfig, seed: int = 0) -> BaseSetup:
    """Synthetic corpus plus a base model pretrained to ``cfg.target_accuracy`` on every pair."""
    corpus = build_synthetic_corpus(len(cfg.languages), list(cfg.pairs), cfg.n_train, cfg.n_test,
                                    seed=seed, base_vocab=cfg.base_vocab)
    mc = cfg.model_config(len(corpus.vocab), seed)
    t0 = time.time()
    res = P.pretrain(corpus, cfg.pairs, mc, cfg.pretrain_config(seed), cfg.target_accuracy,
                     cfg.check_every, cfg.max_rounds, cfg.eval_limit)
    log.info("seed %d: pretrained %d steps/pair in %.0fs, accuracy %s", seed, res.steps,
             time.time() - t0, res.accuracy)
    acc = P.mean_accuracy(res.model, corpus, cfg.pairs, limit=cfg.eval_limit)
    D = {tag: rel.D for tag, (rel, _) in P.detect_all(res.model, corpus, cfg.pairs, 1).items()}
    return BaseSetup(seed, corpus, res.model, res, acc, D)


def pair_layers(base: BaseSetup, k: int) -> dict[str, list[int]]:
    from .detector import select_layers

    return {tag: select_layers(D, k) for tag, D in base.deltas.items()}


def selective_setup(base: BaseSetup, cfg: ExperimentConfig, k: int | None = None,
                    epsilon: float | None = None):
    layers = pair_layers(base, cfg.k if k is None else k)
    _, part = P.score_and_partition(base.model, base.corpus, cfg.languages, layers,
                                    cfg.epsilon if epsilon is None else epsilon, limit=cfg.score_limit)
    return layers, part


# ---- forgetting -------------------------------------------------------------

@dataclass
class ForgettingRow:
    seed: int
    method: str
    pair: str
    base: float
    after: float

    @property
    def delta(self) -> float:
        return self.after - self.base


@dataclass
class ForgettingResult:
    target: str
    rows: list[ForgettingRow]

    def mean_untouched_drop(self, method: str) -> float:
        """Mean over seeds of the mean accuracy drop (base - after) on the untouched pairs."""
        per_seed = {}
        for r in self.rows:
            if r.method == method and r.pair != self.target:
                per_seed.setdefault(r.seed, []).append(-r.delta)
        return float(np.mean([np.mean(v) for v in per_seed.values()]))

    def target_gain(self, method: str) -> float:
        return float(np.mean([r.delta for r in self.rows if r.method == method and r.pair == self.target]))

    def summary(self) -> dict:
        return {m: {"untouched_drop": self.mean_untouched_drop(m), "target_gain": self.target_gain(m)}
                for m in sorted({r.method for r in self.rows})}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "method", "pair", "base_accuracy", "finetuned_accuracy", "delta"])
            for r in self.rows:
                w.writerow([r.seed, r.method, r.pair, repr(r.base), repr(r.after), repr(r.delta)])


def forgetting_run(base: BaseSetup, cfg: ExperimentConfig) -> list[ForgettingRow]:
    """Finetune ``cfg.finetune_target`` on new data both ways and score every pair.

    The finetuned pair is scored routed under the selective method; untouched
    pairs and the full-finetuning model use plain FFNs.
    """
    tgt = cfg.finetune_target
    seed = base.seed
    fresh = P.fresh_examples(base.corpus, tgt, cfg.n_fresh, seed=10_000 + seed)
    data = P.train_batches(fresh, base.corpus.vocab, cfg.batch_size, seed, cfg.max_seq_len)
    for b in data:
        b.pair = tgt
    ftc = cfg.finetune_config(seed)
    layers, part = selective_setup(base, cfg)

    full = full_finetune(base.model, {tgt: data}, ftc)
    sel = finetune_pairs(base.model, {tgt: data}, part, ftc, swap_car=cfg.swap_car,
                         layers={tgt: layers[tgt]})
    after = {
        "full": P.mean_accuracy(full.model, base.corpus, cfg.pairs, limit=cfg.eval_limit),
        "selective": P.mean_accuracy(sel.model, base.corpus, cfg.pairs, routing=sel.routing,
                                     limit=cfg.eval_limit),
    }
    return [ForgettingRow(seed, m, p, base.accuracy[p], after[m][p]) for m in after for p in cfg.pairs]


def forgetting_experiment(cfg: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2),
                          bases: dict[int, BaseSetup] | None = None) -> ForgettingResult:
    bases = dict(bases or {})
    rows = []
    for s in seeds:
        if s not in bases:
            bases[s] = build_base(cfg, s)
        rows += forgetting_run(bases[s], cfg)
    return ForgettingResult(cfg.finetune_target, rows)


# ---- sweeps -------------------------------------------------------------------

@dataclass
class SweepResult:
    name: str
    xs: list[float]
    ys: list[float]
    detail: list[dict] = field(default_factory=list)

    def argmax(self) -> float:
        return self.xs[int(np.argmax(self.ys))]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.name, "mean_finetuned_accuracy"])
            for x, y in zip(self.xs, self.ys):
                w.writerow([x, repr(y)])

    def to_json(self) -> dict:
        return {"name": self.name, "xs": self.xs, "ys": self.ys, "detail": self.detail}


def has_interior_max(ys: Sequence[float]) -> bool:
    """The best value is strictly above both endpoints (so not at either end)."""
    ys = list(ys)
    if len(ys) < 3:
        return False
    best = max(ys[1:-1])
    return best > ys[0] and best > ys[-1]


def is_monotone(ys: Sequence[float]) -> bool:
    d = np.diff(ys)
    return bool((d >= 0).all() or (d <= 0).all())


def selective_score(base: BaseSetup, cfg: ExperimentConfig, layers: dict[str, list[int]], part,
                    steps: int | None = None) -> dict[str, float]:
    """Finetune all pairs jointly (selective, routed) and score each one routed."""
    data = {}
    for tag in cfg.pairs:
        data[tag] = P.train_batches(base.corpus.train[tag], base.corpus.vocab, cfg.batch_size,
                                    base.seed + 7, cfg.max_seq_len)
    res = finetune_pairs(base.model, data, part, cfg.finetune_config(base.seed, steps),
                         swap_car=cfg.swap_car, layers=layers)
    return P.mean_accuracy(res.model, base.corpus, cfg.pairs, routing=res.routing, limit=cfg.eval_limit)


def k_sweep(base: BaseSetup, cfg: ExperimentConfig, ks: Sequence[int], steps: int | None = None) -> SweepResult:
    ys, detail = [], []
    for k in ks:
        layers, part = selective_setup(base, cfg, k=k)
        acc = selective_score(base, cfg, layers, part, steps)
        ys.append(P.summarize(acc))
        detail.append({"k": k, "layers": layers, "accuracy": acc})
        log.info("k=%d: %.4f", k, ys[-1])
    return SweepResult("k", list(ks), ys, detail)


def epsilon_sweep(base: BaseSetup, cfg: ExperimentConfig, epsilons: Sequence[float],
                  steps: int | None = None) -> SweepResult:
    layers = pair_layers(base, cfg.k)
    scored = sorted(set().union(*layers.values()))
    mono = {lg: P.scoring_batches(base.corpus, lg, limit=cfg.score_limit, max_seq_len=cfg.max_seq_len)
            for lg in cfg.languages}
    from .awareness import partition, score_table

    table = score_table(base.model, mono, scored, pair_layers=layers)
    ys, detail = [], []
    for eps in epsilons:
        acc = selective_score(base, cfg, layers, partition(table, eps), steps)
        ys.append(P.summarize(acc))
        detail.append({"epsilon": eps, "accuracy": acc})
        log.info("epsilon=%.3f: %.4f", eps, ys[-1])
    return SweepResult("epsilon", list(epsilons), ys, detail)


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, default=float))


def car_report(base: BaseSetup, cfg: ExperimentConfig) -> dict[str, dict[int, float]]:
    layers, part = selective_setup(base, cfg)
    return {tag: {j: r.car for j, r in build_routing(part, parse_pair(tag), layers[tag]).items()}
            for tag in cfg.pairs}


__all__ = ["ExperimentConfig", "BaseSetup", "build_base", "forgetting_experiment", "forgetting_run",
           "ForgettingResult", "k_sweep", "epsilon_sweep", "sweep_base", "SweepResult", "has_interior_max", "is_monotone"]


def sweep_base(cfg: ExperimentConfig, seed: int = 0, check_every: int = 10) -> BaseSetup:
    """A base stopped close to the accuracy threshold, leaving finetuning headroom.

    A base trained well past the threshold already translates its test sets, so
    every sweep cell lands at the ceiling and the sweep cannot discriminate.
    """
    from dataclasses import replace

    return build_base(replace(cfg, check_every=check_every), seed)
