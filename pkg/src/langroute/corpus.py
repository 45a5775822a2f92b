"""Synthetic cipher languages, parallel corpora, instruction templates, TSV I/O.

A family of languages shares one base vocabulary of nouns, verbs and
adjectives. Each language renders a base sentence by reordering its
subject / verb / object phrases and then mapping every base word through its
own permutation, so translation between any two members is an exact,
learnable function.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import Batch

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)
WORD_ORDERS = ("SVO", "VSO", "SOV")

TEMPLATES = (
    "translate {src_lang} to {tgt_lang} : {src_text} =>",
    "{src_lang} {src_text} in {tgt_lang} =>",
    "render {src_text} from {src_lang} into {tgt_lang} =>",
    "{src_lang} to {tgt_lang} : {src_text} =>",
    "please translate {src_text} {src_lang} to {tgt_lang} =>",
    "from {src_lang} : {src_text} ? {tgt_lang} =>",
    "convert {src_lang} text {src_text} to {tgt_lang} =>",
    "{tgt_lang} translation of {src_lang} {src_text} =>",
    "sentence {src_text} ( {src_lang} ) into {tgt_lang} =>",
    "{src_lang} : {src_text} {tgt_lang} :",
)
TEMPLATE_WORDS = tuple(sorted({w for t in TEMPLATES for w in t.split() if not w.startswith("{")}))


class CorpusError(ValueError):
    """Malformed corpus input."""


class Vocab:
    """Token <-> id map. Specials take ids 0..3; new tokens append."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = []
        self.index: dict[str, int] = {}
        for t in (*SPECIALS, *tokens):
            self.add(t)

    def add(self, token: str) -> int:
        i = self.index.get(token)
        if i is None:
            i = self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return i

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "Vocab":
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise CorpusError("vocabulary does not start with the special tokens")
        return cls(tokens[len(SPECIALS):])


def lang_token(code: str) -> str:
    return f"<{code}>"


def word_token(base_id: int) -> str:
    return f"w{base_id}"


# --- base grammar -------------------------------------------------------


@dataclass(frozen=True)
class Grammar:
    """Partition of base ids into word classes."""

    base_vocab: int

    @property
    def n_nouns(self) -> int:
        return self.base_vocab // 2

    @property
    def n_verbs(self) -> int:
        return self.base_vocab // 4

    def word_class(self, base_id: int) -> str:
        if base_id < self.n_nouns:
            return "N"
        if base_id < self.n_nouns + self.n_verbs:
            return "V"
        return "A"

    def sample(self, rng: random.Random) -> "BaseSentence":
        nouns = range(self.n_nouns)
        verbs = range(self.n_nouns, self.n_nouns + self.n_verbs)
        adjs = range(self.n_nouns + self.n_verbs, self.base_vocab)

        def adj():
            return rng.choice(adjs) if rng.random() < 0.5 else None

        return BaseSentence(adj(), rng.choice(nouns), rng.choice(verbs), adj(), rng.choice(nouns))


@dataclass(frozen=True)
class BaseSentence:
    subj_adj: int | None
    subj: int
    verb: int
    obj_adj: int | None
    obj: int

    def phrases(self) -> dict[str, list[int]]:
        s = [self.subj] if self.subj_adj is None else [self.subj_adj, self.subj]
        o = [self.obj] if self.obj_adj is None else [self.obj_adj, self.obj]
        return {"S": s, "V": [self.verb], "O": o}


@dataclass(frozen=True)
class Language:
    code: str
    permutation: tuple[int, ...]
    word_order: str

    def __post_init__(self):
        if sorted(self.permutation) != list(range(len(self.permutation))):
            raise ValueError(f"{self.code}: permutation is not a bijection")
        if self.word_order not in WORD_ORDERS:
            raise ValueError(f"unknown word order {self.word_order!r}")

    @property
    def inverse(self) -> tuple[int, ...]:
        inv = [0] * len(self.permutation)
        for i, p in enumerate(self.permutation):
            inv[p] = i
        return tuple(inv)

    def encode(self, sent: BaseSentence) -> list[str]:
        ph = sent.phrases()
        base = [w for slot in self.word_order for w in ph[slot]]
        return [word_token(self.permutation[w]) for w in base]

    def decode(self, words: Sequence[str], grammar: Grammar) -> BaseSentence:
        inv = self.inverse
        base = [inv[int(w[1:])] for w in words]
        classes = "".join(grammar.word_class(b) for b in base)
        # group into noun phrases (optional adjective + noun) and the verb
        groups: list[list[int]] = []
        i = 0
        while i < len(base):
            if classes[i] == "A":
                if i + 1 >= len(base) or classes[i + 1] != "N":
                    raise CorpusError(f"dangling adjective in {' '.join(words)}")
                groups.append(base[i:i + 2])
                i += 2
            else:
                groups.append([base[i]])
                i += 1
        if len(groups) != 3:
            raise CorpusError(f"cannot parse {' '.join(words)}")
        slots = dict(zip(self.word_order, groups))
        s, v, o = slots["S"], slots["V"], slots["O"]
        return BaseSentence(s[0] if len(s) == 2 else None, s[-1], v[0], o[0] if len(o) == 2 else None, o[-1])

    def to_dict(self) -> dict:
        return {"code": self.code, "permutation": list(self.permutation), "word_order": self.word_order}

    @classmethod
    def from_dict(cls, d: dict) -> "Language":
        return cls(d["code"], tuple(d["permutation"]), d["word_order"])


@dataclass
class LanguageFamily:
    languages: list[Language]
    grammar: Grammar

    def __getitem__(self, code: str) -> Language:
        for lang in self.languages:
            if lang.code == code:
                return lang
        raise KeyError(f"unknown language {code!r}")

    @property
    def codes(self) -> list[str]:
        return [lang.code for lang in self.languages]

    def translate(self, words: Sequence[str], src: str, tgt: str) -> list[str]:
        """Ground-truth translation."""
        return self[tgt].encode(self[src].decode(words, self.grammar))

    def to_dict(self) -> dict:
        return {"base_vocab": self.grammar.base_vocab, "languages": [lg.to_dict() for lg in self.languages]}

    @classmethod
    def from_dict(cls, d: dict) -> "LanguageFamily":
        return cls([Language.from_dict(x) for x in d["languages"]], Grammar(int(d["base_vocab"])))


def _lang_code(i: int) -> str:
    return chr(ord("a") + i % 26) * 2 + ("" if i < 26 else str(i // 26))


def make_language_family(n_langs: int, base_vocab: int = 32, seed: int = 0,
                         identity_cipher: bool = False) -> LanguageFamily:
    """``n_langs`` cipher languages "aa", "bb", ... over one base vocabulary.

    The first language uses the identity permutation (it plays the pivot);
    with ``identity_cipher`` every language does, so translation reduces to
    reordering. Word orders cycle SVO, VSO, SOV.
    """
    if n_langs < 2:
        raise ValueError("need at least two languages")
    if base_vocab < 32:
        raise ValueError("base_vocab must be at least 32")
    rng = np.random.default_rng(seed)
    langs = []
    for i in range(n_langs):
        if identity_cipher or i == 0:
            perm = tuple(range(base_vocab))
        else:
            perm = tuple(int(p) for p in rng.permutation(base_vocab))
        langs.append(Language(_lang_code(i), perm, WORD_ORDERS[i % len(WORD_ORDERS)]))
    return LanguageFamily(langs, Grammar(base_vocab))


def family_vocab(family: LanguageFamily) -> Vocab:
    return Vocab([*TEMPLATE_WORDS, *(lang_token(c) for c in family.codes),
                  *(word_token(i) for i in range(family.grammar.base_vocab))])


# --- parallel data ------------------------------------------------------


@dataclass(frozen=True)
class ParallelExample:
    src: tuple[str, ...]
    tgt: tuple[str, ...]
    pair: tuple[str, str]

    def __post_init__(self):
        if not self.src or not self.tgt:
            raise CorpusError("both sides of a parallel example must be non-empty")

    def swapped(self) -> "ParallelExample":
        return ParallelExample(self.tgt, self.src, (self.pair[1], self.pair[0]))


def parse_pair(tag: str) -> tuple[str, str]:
    parts = tag.split("-")
    if len(parts) != 2 or not all(parts):
        raise CorpusError(f"pair tag {tag!r} is not of the form SRC-TGT")
    return parts[0], parts[1]


def pair_tag(pair: tuple[str, str]) -> str:
    return f"{pair[0]}-{pair[1]}"


def gen_parallel(family: LanguageFamily, pair: tuple[str, str], n: int = 2000, seed: int = 0) -> list[ParallelExample]:
    """``n`` examples whose two sides render the same sampled base sentence."""
    src, tgt = family[pair[0]], family[pair[1]]
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        s = family.grammar.sample(rng)
        out.append(ParallelExample(tuple(src.encode(s)), tuple(tgt.encode(s)), (src.code, tgt.code)))
    return out


def clean(examples: Iterable[ParallelExample], max_len: int) -> list[ParallelExample]:
    """Drop over-long pairs and exact duplicates, keeping first occurrences."""
    seen = set()
    out = []
    for ex in examples:
        key = (ex.src, ex.tgt)
        if key in seen or len(ex.src) > max_len or len(ex.tgt) > max_len:
            continue
        seen.add(key)
        out.append(ex)
    return out


def read_parallel_tsv(path: str | Path, vocab: Vocab | None = None) -> tuple[list[ParallelExample], int]:
    """Parse ``src<TAB>tgt`` lines; returns (examples, number of skipped empty-side lines)."""
    path = Path(path)
    pair = parse_pair(path.stem)
    examples, skipped = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise CorpusError(f"{path}:{lineno}: expected exactly one tab, found {len(fields) - 1}")
            src, tgt = fields[0].split(), fields[1].split()
            if not src or not tgt:
                skipped += 1
                continue
            if vocab is not None:
                for t in (*src, *tgt):
                    vocab.add(t)
            examples.append(ParallelExample(tuple(src), tuple(tgt), pair))
    return examples, skipped


def load_parallel_tsv(path: str | Path, vocab: Vocab | None = None) -> list[ParallelExample]:
    examples, skipped = read_parallel_tsv(path, vocab)
    if skipped:
        log.warning("%s: skipped %d line(s) with an empty side", path, skipped)
    return examples


def save_parallel_tsv(path: str | Path, examples: Iterable[ParallelExample]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(" ".join(ex.src) + "\t" + " ".join(ex.tgt) + "\n")


# --- templates and batching --------------------------------------------


class SequenceTooLong(ValueError):
    pass


@dataclass
class Row:
    ids: list[int]
    loss_mask: list[bool]
    prompt_len: int
    pair: str | None = None


def render_prompt(example: ParallelExample, template_id: int) -> list[str]:
    pattern = TEMPLATES[template_id]
    out: list[str] = []
    for w in pattern.split():
        if w == "{src_lang}":
            out.append(lang_token(example.pair[0]))
        elif w == "{tgt_lang}":
            out.append(lang_token(example.pair[1]))
        elif w == "{src_text}":
            out.extend(example.src)
        else:
            out.append(w)
    return out


def apply_template(example: ParallelExample, template_id: int | str, seed: int | None,
                   vocab: Vocab, max_seq_len: int = 128) -> Row:
    """BOS + prompt + target + EOS; the loss mask covers the target and its EOS."""
    if template_id == "random":
        template_id = random.Random(seed).randrange(len(TEMPLATES))
    if not (isinstance(template_id, int) and 0 <= template_id < len(TEMPLATES)):
        raise ValueError(f"template_id must be 0..{len(TEMPLATES) - 1} or 'random'")
    prompt = [BOS, *render_prompt(example, template_id)]
    tokens = prompt + list(example.tgt) + [EOS]
    if len(tokens) > max_seq_len:
        raise SequenceTooLong(f"templated example has {len(tokens)} tokens > {max_seq_len}")
    mask = [False] * len(prompt) + [True] * (len(example.tgt) + 1)
    return Row(vocab.encode(tokens), mask, len(prompt), pair_tag(example.pair))


def template_rows(examples: Sequence[ParallelExample], vocab: Vocab, seed: int,
                  max_seq_len: int = 128, template_id: int | str = "random") -> list[Row]:
    """Template every example; "random" draws each example's template from ``seed``."""
    rng = random.Random(seed)
    return [apply_template(ex, template_id if template_id != "random" else rng.randrange(len(TEMPLATES)),
                           None, vocab, max_seq_len) for ex in examples]


def mono_row(tokens: Sequence[str], lang: str, vocab: Vocab) -> Row:
    """Monolingual LM row: BOS, language tag, text, EOS; loss on text and EOS."""
    seq = [BOS, lang_token(lang), *tokens, EOS]
    return Row(vocab.encode(seq), [False, False] + [True] * (len(tokens) + 1), 2, lang)


def collate(rows: Sequence[Row], pair: str | None = None) -> Batch:
    T = max(len(r.ids) for r in rows)
    ids = np.zeros((len(rows), T), dtype=np.int64)
    mask = np.zeros((len(rows), T), dtype=bool)
    valid = np.zeros((len(rows), T), dtype=bool)
    for b, r in enumerate(rows):
        n = len(r.ids)
        ids[b, :n] = r.ids
        mask[b, :n] = r.loss_mask
        valid[b, :n] = True
    if pair is None and len({r.pair for r in rows}) == 1:
        pair = rows[0].pair
    return Batch(ids, mask, valid, pair)


def batches(rows: Sequence[Row], batch_size: int, shuffle_seed: int | None = None) -> list[Batch]:
    order = list(range(len(rows)))
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(order)
    return [collate([rows[i] for i in order[k:k + batch_size]]) for k in range(0, len(order), batch_size)]


# --- corpus directories -------------------------------------------------


@dataclass
class CorpusDir:
    vocab: Vocab
    train: dict[str, list[ParallelExample]] = field(default_factory=dict)
    test: dict[str, list[ParallelExample]] = field(default_factory=dict)
    family: LanguageFamily | None = None

    @property
    def pairs(self) -> list[str]:
        return sorted(set(self.train) | set(self.test))

    def mono(self, lang: str, split: str = "train") -> list[tuple[str, ...]]:
        """Monolingual text of ``lang``: target sides of pairs translating into it,
        or source sides when ``lang`` is never a target."""
        data = self.train if split == "train" else self.test
        tgt = [ex.tgt for tag in sorted(data) for ex in data[tag] if ex.pair[1] == lang]
        return tgt or [ex.src for tag in sorted(data) for ex in data[tag] if ex.pair[0] == lang]


def write_corpus_dir(root: str | Path, corpus: CorpusDir) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "vocab.json").write_text(json.dumps(corpus.vocab.to_json()))
    if corpus.family is not None:
        (root / "family.json").write_text(json.dumps(corpus.family.to_dict(), indent=1))
    for split, data in (("train", corpus.train), ("test", corpus.test)):
        for tag, exs in data.items():
            save_parallel_tsv(root / split / f"{tag}.tsv", exs)


def read_corpus_dir(root: str | Path) -> CorpusDir:
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"{root} is not a directory")
    vpath = root / "vocab.json"
    vocab = Vocab.from_json(json.loads(vpath.read_text())) if vpath.exists() else Vocab(TEMPLATE_WORDS)
    fpath = root / "family.json"
    family = LanguageFamily.from_dict(json.loads(fpath.read_text())) if fpath.exists() else None
    corpus = CorpusDir(vocab, family=family)
    for split, data in (("train", corpus.train), ("test", corpus.test)):
        for path in sorted((root / split).glob("*.tsv")):
            data[path.stem] = load_parallel_tsv(path, vocab)
    for tag in corpus.pairs:
        for code in parse_pair(tag):
            vocab.add(lang_token(code))
    return corpus


def build_synthetic_corpus(n_langs: int, pairs: Sequence[str], n_train: int, n_test: int,
                           seed: int, base_vocab: int = 32) -> CorpusDir:
    family = make_language_family(n_langs, base_vocab, seed)
    corpus = CorpusDir(family_vocab(family), family=family)
    for k, tag in enumerate(pairs):
        pair = parse_pair(tag)
        exs = gen_parallel(family, pair, n_train + n_test, seed=seed * 1000 + k)
        corpus.train[tag] = exs[:n_train]
        corpus.test[tag] = exs[n_train:]
    return corpus
