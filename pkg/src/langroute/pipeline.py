"""End-to-end stages: pretraining, detection, scoring, partition, finetuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .awareness import AwarenessTable, NeuronPartition, partition, score_table
from .corpus import CorpusDir, ParallelExample, Vocab, batches, mono_row, parse_pair, template_rows
from .detector import ActivationTrace, LayerRelevance, detect_layers
from .evaluation import test_batches, token_accuracy
from .model import Batch, ModelConfig, TransformerModel
from .trainer import MaskedAdamW, TrainConfig, train

log = logging.getLogger(__name__)


def train_batches(examples: Sequence[ParallelExample], vocab: Vocab, batch_size: int, seed: int,
                  max_seq_len: int) -> list[Batch]:
    rows = template_rows(examples, vocab, seed, max_seq_len)
    return batches(rows, batch_size, shuffle_seed=seed + 1)


def mono_batches(texts: Sequence[Sequence[str]], lang: str, vocab: Vocab, batch_size: int = 32,
                 limit: int | None = None) -> list[Batch]:
    texts = list(texts[:limit] if limit else texts)
    rows = [mono_row(t, lang, vocab) for t in texts]
    return batches(rows, batch_size)


def scoring_batches(corpus: CorpusDir, lang: str, source: str = "mono", batch_size: int = 32,
                    limit: int | None = 256, seed: int = 0, max_seq_len: int = 128) -> list[Batch]:
    """Batches for awareness scoring: monolingual text of ``lang``, or templated
    translations into ``lang`` with the target-side mask (``source="translation"``)."""
    if source == "mono":
        return mono_batches(corpus.mono(lang), lang, corpus.vocab, batch_size, limit)
    if source == "translation":
        exs = [ex for tag in sorted(corpus.train) for ex in corpus.train[tag] if ex.pair[1] == lang]
        exs = exs[:limit] if limit else exs
        return batches(template_rows(exs, corpus.vocab, seed, max_seq_len), batch_size)
    raise ValueError("source must be 'mono' or 'translation'")


def languages_of(pairs: Sequence[str]) -> list[str]:
    out: list[str] = []
    for tag in pairs:
        for lg in parse_pair(tag):
            if lg not in out:
                out.append(lg)
    return out


@dataclass
class PretrainResult:
    model: TransformerModel
    steps: int
    accuracy: dict[str, float]
    history: list[tuple[int, dict[str, float]]] = field(default_factory=list)


def pretrain(corpus: CorpusDir, pairs: Sequence[str], model_config: ModelConfig, config: TrainConfig,
             target_accuracy: float = 0.8, check_every: int = 100, max_rounds: int = 60,
             eval_limit: int = 200) -> PretrainResult:
    """Full training from scratch, round-robin over ``pairs``, until every pair's
    test token accuracy reaches ``target_accuracy`` (checked every
    ``check_every`` micro-batches per pair)."""
    model = TransformerModel(model_config)
    data = {p: train_batches(corpus.train[p], corpus.vocab, config.batch_size, config.seed,
                             model_config.max_seq_len) for p in pairs}
    tests = {p: test_batches(corpus.test[p][:eval_limit], corpus.vocab, model_config.max_seq_len)
             for p in pairs}
    round_cfg = TrainConfig(**{**config.to_dict(), "steps_per_pair": check_every, "epochs": 1})
    opt = MaskedAdamW(model, round_cfg)
    history = []
    acc: dict[str, float] = {}
    for r in range(max_rounds):
        # rotate the batch streams so each round sees fresh batches
        shifted = {p: b[(r * check_every) % len(b):] + b[:(r * check_every) % len(b)] for p, b in data.items()}
        train(model, shifted, round_cfg, optimizer=opt)
        acc = {p: token_accuracy(model, tests[p]) for p in pairs}
        history.append(((r + 1) * check_every, acc))
        log.info("pretrain round %d: %s", r + 1, acc)
        if min(acc.values()) >= target_accuracy:
            break
    return PretrainResult(model, history[-1][0], acc, history)


def detect_all(model: TransformerModel, corpus: CorpusDir, pairs: Sequence[str], k: int,
               batch_size: int = 32, limit: int = 256, seed: int = 0,
               passes: int | None = None) -> dict[str, tuple[LayerRelevance, ActivationTrace]]:
    out = {}
    for tag in pairs:
        data = train_batches(corpus.train[tag][:limit], corpus.vocab, batch_size, seed, model.config.max_seq_len)
        for b in data:
            b.pair = tag
        out[tag] = detect_layers(model, data, k, passes)
    return out


def score_and_partition(model: TransformerModel, corpus: CorpusDir, languages: Sequence[str],
                        pair_layers: dict[str, list[int]], epsilon: float, source: str = "mono",
                        limit: int = 256, layers: Sequence[int] | None = None,
                        aggregate: str = "token") -> tuple[AwarenessTable, NeuronPartition]:
    layers = sorted(set().union(*pair_layers.values())) if layers is None else sorted(layers)
    mono = {lg: scoring_batches(corpus, lg, source, limit=limit, max_seq_len=model.config.max_seq_len)
            for lg in languages}
    table = score_table(model, mono, layers, aggregate, pair_layers)
    return table, partition(table, epsilon)


def mean_accuracy(model, corpus: CorpusDir, pairs: Sequence[str], routing=None, limit: int = 200) -> dict[str, float]:
    routing = routing or {}
    return {p: token_accuracy(model, test_batches(corpus.test[p][:limit], corpus.vocab, model.config.max_seq_len),
                              routing.get(p)) for p in pairs}


def fresh_examples(corpus: CorpusDir, pair: str, n: int, seed: int) -> list[ParallelExample]:
    """New synthetic examples for ``pair`` (requires the corpus family)."""
    from .corpus import gen_parallel

    if corpus.family is None:
        raise ValueError("corpus has no language family; cannot generate new data")
    return gen_parallel(corpus.family, parse_pair(pair), n, seed)


def summarize(values: dict[str, float]) -> float:
    return float(np.mean(list(values.values())))
