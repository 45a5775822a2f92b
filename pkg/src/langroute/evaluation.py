"""Decoding, BLEU, token accuracy and forgetting/transfer matrices."""

from __future__ import annotations

import csv
import dataclasses
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import EOS, ParallelExample, Vocab, apply_template, collate, template_rows
from .model import Batch, TransformerModel, forward, shifted_targets
from .router import RoutedLayer


class CompatibilityError(ValueError):
    pass


def decode(model: TransformerModel, prompt: Sequence[int], max_new: int, eos_id: int | None = None,
           routing: Mapping[int, RoutedLayer] | None = None) -> list[int]:
    """Greedy continuation of ``prompt``; stops after EOS (not returned) or ``max_new`` tokens."""
    if len(prompt) + max_new > model.config.max_seq_len:
        raise ValueError("prompt plus max_new exceeds max_seq_len")
    seq = list(prompt)
    out: list[int] = []
    for _ in range(max_new):
        logits, _ = forward(model, Batch(np.array([seq]), np.zeros((1, len(seq)), bool)), routing=routing)
        nxt = int(np.argmax(logits.data[0, -1]))
        if eos_id is not None and nxt == eos_id:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4,
         smooth: bool = False) -> float:
    """Corpus BLEU in [0, 100]: clipped n-gram precisions, geometric mean, brevity penalty.

    ``smooth`` adds one to numerator and denominator of every order above 1.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in count")
    if not references:
        raise ValueError("empty corpus")
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            match[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = match[n], total[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def token_accuracy(model: TransformerModel, batches: Sequence[Batch],
                   routing: Mapping[int, RoutedLayer] | None = None) -> float:
    """Teacher-forced exact next-token match over target-side positions."""
    hit = n = 0
    for b in batches:
        logits, _ = forward(model, b, routing=routing)
        targets, mask = shifted_targets(b)
        pred = logits.data.argmax(axis=-1)
        hit += int((pred == targets)[mask].sum())
        n += int(mask.sum())
    return hit / n if n else float("nan")


def translate(model: TransformerModel, examples: Sequence[ParallelExample], vocab: Vocab,
              template_id: int = 0, routing: Mapping[int, RoutedLayer] | None = None,
              extra: int = 2) -> list[list[str]]:
    eos = vocab.id(EOS)
    out = []
    for ex in examples:
        row = apply_template(ex, template_id, None, vocab, model.config.max_seq_len)
        prompt = row.ids[: row.prompt_len]
        max_new = min(len(ex.tgt) + extra, model.config.max_seq_len - len(prompt))
        out.append(vocab.decode(decode(model, prompt, max_new, eos, routing)))
    return out


@dataclass
class PairScore:
    bleu: float
    token_accuracy: float
    n: int


@dataclass
class EvalReport:
    scores: dict[str, PairScore]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"meta": self.meta,
                "pairs": {p: {"bleu": s.bleu, "token_accuracy": s.token_accuracy, "n": s.n}
                          for p, s in self.scores.items()}}


def test_batches(examples: Sequence[ParallelExample], vocab: Vocab, max_seq_len: int,
                 seed: int = 0, batch_size: int = 64) -> list[Batch]:
    rows = template_rows(examples, vocab, seed, max_seq_len)
    return [collate(rows[i:i + batch_size]) for i in range(0, len(rows), batch_size)]


def evaluate(model: TransformerModel, testsets: Mapping[str, Sequence[ParallelExample]], vocab: Vocab,
             routing: Mapping[str, Mapping[int, RoutedLayer]] | None = None, with_bleu: bool = True,
             bleu_limit: int | None = 200, seed: int = 0, meta: dict | None = None,
             smooth: bool = False) -> EvalReport:
    """Score each pair; a pair with an entry in ``routing`` is evaluated routed."""
    routing = routing or {}
    scores = {}
    for tag, exs in testsets.items():
        route = routing.get(tag)
        acc = token_accuracy(model, test_batches(exs, vocab, model.config.max_seq_len, seed), route)
        b = float("nan")
        if with_bleu:
            sub = list(exs[:bleu_limit] if bleu_limit else exs)
            hyps = translate(model, sub, vocab, routing=route)
            b = bleu(hyps, [list(e.tgt) for e in sub], smooth=smooth)
        scores[tag] = PairScore(b, acc, len(exs))
    return EvalReport(scores, dict(meta or {}))


@dataclass
class TransferMatrix:
    pairs: list[str]
    values: np.ndarray
    metric: str = "token_accuracy"

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["finetuned_pair", "evaluated_pair", f"delta_{self.metric}"])
            for r, pr in enumerate(self.pairs):
                for c, pc in enumerate(self.pairs):
                    w.writerow([pr, pc, repr(float(self.values[r, c]))])


def forgetting_matrix(base: EvalReport, finetuned: Mapping[str, EvalReport],
                      metric: str = "token_accuracy") -> TransferMatrix:
    """Cell (r, c): metric of the model finetuned on pair r, tested on c, minus the base model's."""
    pairs = list(finetuned)
    vals = np.zeros((len(pairs), len(pairs)))
    for r, pr in enumerate(pairs):
        rep = finetuned[pr]
        for c, pc in enumerate(pairs):
            if pc not in rep.scores or pc not in base.scores:
                raise CompatibilityError(f"pair {pc} missing from a report")
            vals[r, c] = getattr(rep.scores[pc], metric) - getattr(base.scores[pc], metric)
    return TransferMatrix(pairs, vals, metric)


def check_compatible(base: TransformerModel, others: Sequence[TransformerModel]) -> None:
    """Checkpoints are comparable when their architecture matches; the init seed does not count."""
    def arch(m):
        return dataclasses.replace(m.config, seed=0)

    for m in others:
        if arch(m) != arch(base):
            raise CompatibilityError("checkpoints do not share the base model config")
