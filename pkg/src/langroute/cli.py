"""Command-line driver: ``langroute <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .awareness import AwarenessError, AwarenessTable, NeuronPartition, partition, score_table
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import CorpusError, build_synthetic_corpus, parse_pair, read_corpus_dir, write_corpus_dir
from .detector import detect_layers, load_layers_json
from .evaluation import CompatibilityError, EvalReport, PairScore, evaluate, forgetting_matrix
from .model import ModelConfig, TransformerModel
from .router import RoutingError
from .trainer import TrainConfig, TrainingError, finetune_pairs, full_finetune

log = logging.getLogger("langroute")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _list(s: str) -> list[str]:
    return [x for x in (p.strip() for p in s.split(",")) if x]


def _file_id(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _write_json(path: str | Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1))


# toy-scale pretraining settings used when no --config is given
PRETRAIN_DEFAULTS = {"learning_rate": 1e-3, "batch_size": 16, "grad_accum_steps": 1, "weight_decay": 0.0}


def _load_train_config(path: str | None, seed: int, defaults: dict | None = None) -> TrainConfig:
    d = dict(defaults or {})
    if path:
        d.update(json.loads(Path(path).read_text()))
    d.setdefault("seed", seed)
    return TrainConfig.from_dict(d)


def _pairs_in(corpus, pairs: list[str]) -> None:
    missing = [p for p in pairs if p not in corpus.train and p not in corpus.test]
    if missing:
        raise CorpusError(f"pairs not in corpus: {', '.join(missing)}")


# --- subcommands ----------------------------------------------------------

def cmd_gen_corpus(a) -> None:
    pairs = _list(a.pairs)
    for p in pairs:
        parse_pair(p)
    corpus = build_synthetic_corpus(a.langs, pairs, a.n_train, a.n_test, a.seed, a.base_vocab)
    write_corpus_dir(a.out, corpus)
    log.info("wrote %d pairs to %s", len(pairs), a.out)


def _model_config(a, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size, a.n_layers, a.d_model, a.d_ff, a.n_heads, a.max_seq_len, a.seed)


def cmd_init_model(a) -> None:
    corpus = read_corpus_dir(a.data)
    model = TransformerModel(_model_config(a, len(corpus.vocab)))
    cid = save_checkpoint(a.out, model, meta={"seed": a.seed})
    print(cid)


def cmd_pretrain(a) -> None:
    corpus = read_corpus_dir(a.data)
    pairs = _list(a.pairs) if a.pairs else corpus.pairs
    _pairs_in(corpus, pairs)
    cfg = _load_train_config(a.config, a.seed, PRETRAIN_DEFAULTS)
    res = P.pretrain(corpus, pairs, _model_config(a, len(corpus.vocab)), cfg, a.target, a.check_every,
                     a.max_rounds)
    cid = save_checkpoint(a.out, res.model, meta={"seed": a.seed, "steps_per_pair": res.steps,
                                                  "accuracy": res.accuracy})
    print(json.dumps({"id": cid, "steps_per_pair": res.steps, "accuracy": res.accuracy}))


def cmd_detect_layers(a) -> None:
    model, _, header = load_checkpoint(a.ckpt)
    corpus = read_corpus_dir(a.data)
    pairs = _list(a.pair)
    _pairs_in(corpus, pairs)
    out = {"checkpoint": header["id"], "k": a.k, "pairs": {}}
    for tag in pairs:
        data = P.train_batches(corpus.train[tag][:a.limit], corpus.vocab, a.batch_size, a.seed,
                               model.config.max_seq_len)
        for b in data:
            b.pair = tag
        rel, trace = detect_layers(model, data, a.k, a.passes)
        out["pairs"][tag] = rel.to_json(trace)
    _write_json(a.out, out)


def _pair_layers(doc: dict) -> dict[str, list[int]]:
    try:
        return {tag: [int(j) for j in v["selected"]] for tag, v in doc["pairs"].items()}
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"malformed layers file ({exc})") from exc


def cmd_score_neurons(a) -> None:
    model, _, header = load_checkpoint(a.ckpt)
    corpus = read_corpus_dir(a.data)
    layers = _pair_layers(load_layers_json(a.layers))
    langs = _list(a.langs) if a.langs else P.languages_of(list(layers))
    scored = sorted(set().union(*layers.values())) if layers else []
    if not scored:
        raise AwarenessError("layers file selects no layers")
    mono = {lg: P.scoring_batches(corpus, lg, a.source, limit=a.limit, seed=a.seed,
                                  max_seq_len=model.config.max_seq_len) for lg in langs}
    table = score_table(model, mono, scored, pair_layers=layers)
    _write_json(a.out, {"checkpoint": header["id"], **table.to_json()})


def cmd_partition(a) -> None:
    table = AwarenessTable.from_json(json.loads(Path(a.phi).read_text()))
    part = partition(table, a.epsilon)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    part.save(a.out)


def cmd_finetune(a) -> None:
    model, _, header = load_checkpoint(a.ckpt)
    corpus = read_corpus_dir(a.data)
    pairs = _list(a.pair)
    _pairs_in(corpus, pairs)
    cfg = _load_train_config(a.config, a.seed)
    data = {}
    for tag in pairs:
        data[tag] = P.train_batches(corpus.train[tag], corpus.vocab, cfg.batch_size, a.seed,
                                    model.config.max_seq_len)
    meta = {"base": header["id"], "pairs": pairs, "seed": a.seed, "train_config": cfg.to_dict()}
    if a.full:
        res = full_finetune(model, data, cfg)
        meta["method"] = "full"
    else:
        if not a.manifest:
            raise UsageError("--manifest is required unless --full is given")
        part = NeuronPartition.load(a.manifest)
        res = finetune_pairs(model, data, part, cfg, swap_car=a.swap_car)
        meta.update(method="selective", manifest=_file_id(a.manifest), swap_car=a.swap_car)
    cid = save_checkpoint(a.out, res.model, res.routing, meta)
    if a.log:
        res.log.write_csv(a.log)
    print(cid)


def cmd_evaluate(a) -> None:
    model, routing, header = load_checkpoint(a.ckpt)
    corpus = read_corpus_dir(a.data)
    pairs = _list(a.pairs) if a.pairs else corpus.pairs
    missing = [p for p in pairs if p not in corpus.test]
    if missing:
        raise CorpusError(f"no test split for: {', '.join(missing)}")
    meta = {"checkpoint": header["id"], "manifest": header.get("meta", {}).get("manifest"), "seed": a.seed}
    rep = evaluate(model, {p: corpus.test[p] for p in pairs}, corpus.vocab,
                   routing=None if a.unrouted else routing, with_bleu=not a.no_bleu,
                   bleu_limit=a.bleu_limit, seed=a.seed, meta=meta, smooth=a.smooth)
    _write_json(a.out, rep.to_json())


def _report_from_json(path: str | Path) -> EvalReport:
    d = json.loads(Path(path).read_text())
    return EvalReport({p: PairScore(v["bleu"], v["token_accuracy"], v["n"]) for p, v in d["pairs"].items()},
                      d.get("meta", {}))


def cmd_report(a) -> None:
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    if a.kind in ("activations", "deltas"):
        if not a.layers:
            raise UsageError(f"--kind {a.kind} needs --layers")
        doc = load_layers_json(a.layers)
        with open(a.out, "w", newline="") as fh:
            w = csv.writer(fh)
            if a.kind == "activations":
                w.writerow(["pair", "layer", "mean_activation"])
                for tag, v in doc["pairs"].items():
                    for i, m in enumerate(v["layer_means"]):
                        w.writerow([tag, i, repr(float(m))])
            else:
                fh.write(f"# {next(iter(doc['pairs'].values()))['attribution']}\n" if doc["pairs"] else "")
                w.writerow(["pair", "boundary", "D"])
                for tag, v in doc["pairs"].items():
                    for b, d in enumerate(v["D"]):
                        w.writerow([tag, b, repr(float(d))])
    elif a.kind == "awareness":
        if not a.manifest:
            raise UsageError("--kind awareness needs --manifest")
        part = NeuronPartition.load(a.manifest)
        with open(a.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "neuron", "role", "language", *[f"phi_{lg}" for lg in part.languages]])
            for j, lp in sorted(part.layers.items()):
                owner = {i: lg for lg, ids in lp.specific.items() for i in ids}
                for i in range(len(lp.variance)):
                    role = "specific" if i in owner else "general"
                    w.writerow([j, i, role, owner.get(i, ""),
                                *[repr(float(lp.phi[lg][i])) for lg in part.languages]])
    else:
        if not a.base or not a.finetuned:
            raise UsageError("--kind transfer needs --base and --finetuned PAIR=REPORT ...")
        fin = {}
        for item in a.finetuned:
            tag, sep, path = item.partition("=")
            if not sep:
                raise UsageError(f"--finetuned expects PAIR=REPORT, got {item!r}")
            fin[tag] = _report_from_json(path)
        forgetting_matrix(_report_from_json(a.base), fin, a.metric).write_csv(a.out)


# --- parser ---------------------------------------------------------------

def _add_model_args(p) -> None:
    p.add_argument("--n-layers", type=int, default=8)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--max-seq-len", type=int, default=48)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="langroute", description="Language-aware neuron routing on a toy translation model.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("gen-corpus", cmd_gen_corpus, "generate a synthetic cipher-language corpus")
    p.add_argument("--langs", type=int, required=True)
    p.add_argument("--pairs", required=True, help="comma list, e.g. aa-bb,aa-cc")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--base-vocab", type=int, default=32)
    p.add_argument("--out", required=True)

    p = add("init-model", cmd_init_model, "write a freshly initialised checkpoint")
    p.add_argument("--data", required=True)
    _add_model_args(p)
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, "train from scratch until every pair reaches --target accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--pairs")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--target", type=float, default=0.8)
    p.add_argument("--check-every", type=int, default=50)
    p.add_argument("--max-rounds", type=int, default=120)
    _add_model_args(p)
    p.add_argument("--out", required=True)

    p = add("detect-layers", cmd_detect_layers, "select the k layers with the largest activation change")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pair", required=True, help="one pair or a comma list")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--passes", type=int)
    p.add_argument("--limit", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True)

    p = add("score-neurons", cmd_score_neurons, "first-order awareness scores per language")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layers", required=True)
    p.add_argument("--langs")
    p.add_argument("--source", choices=["mono", "translation"], default="mono")
    p.add_argument("--limit", type=int, default=256)
    p.add_argument("--out", required=True)

    p = add("partition", cmd_partition, "split neurons into general and language-specific sets")
    p.add_argument("--phi", required=True)
    p.add_argument("--epsilon", type=float, default=0.9)
    p.add_argument("--out", required=True)

    p = add("finetune", cmd_finetune, "selective (or --full) finetuning on one or more pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest")
    p.add_argument("--pair", required=True)
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--full", action="store_true")
    p.add_argument("--swap-car", action="store_true")
    p.add_argument("--log", help="per-step loss CSV")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "token accuracy and BLEU per pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pairs")
    p.add_argument("--unrouted", action="store_true", help="ignore routing stored in the checkpoint")
    p.add_argument("--no-bleu", action="store_true")
    p.add_argument("--bleu-limit", type=int, default=200)
    p.add_argument("--smooth", action="store_true")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "CSV tables from earlier outputs")
    p.add_argument("--kind", choices=["activations", "deltas", "awareness", "transfer"], required=True)
    p.add_argument("--layers")
    p.add_argument("--manifest")
    p.add_argument("--base")
    p.add_argument("--finetuned", nargs="*")
    p.add_argument("--metric", choices=["token_accuracy", "bleu"], default="token_accuracy")
    p.add_argument("--out", required=True)
    return ap


DATA_ERRORS = (CorpusError, CheckpointError, AwarenessError, CompatibilityError, RoutingError, OSError,
               json.JSONDecodeError, KeyError, ValueError)


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        a.fn(a)
    except UsageError as exc:
        print(f"langroute {a.cmd}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError, OverflowError) as exc:
        print(f"langroute {a.cmd}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"langroute {a.cmd}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
