"""Vocabulary, whitespace tokenization, parallel corpus IO and rule-based corruption."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "[PAD]", "[UNK]", "<s>", "</s>"
MASK, START_OF_PIECE, END_OF_PIECE = "[MASK]", "<|startofpiece|>", "<|endofpiece|>"
RESERVED = (PAD, UNK, BOS, EOS, MASK, START_OF_PIECE, END_OF_PIECE)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID, SOP_ID, EOP_ID = range(len(RESERVED))
N_RESERVED = len(RESERVED)

# ids that may never appear inside a raw source/target sequence
_FORBIDDEN_IN_TEXT = frozenset({PAD_ID, MASK_ID, SOP_ID, EOP_ID})

TokenSeq = tuple[int, ...]


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[:N_RESERVED]) != RESERVED:
            raise CorpusError("vocab must start with the reserved tokens in fixed order")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise CorpusError("vocab tokens must be distinct")
        object.__setattr__(self, "_index", index)

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocab":
        """Reserved tokens first, then ``words`` in first-seen order."""
        seen = dict.fromkeys(RESERVED)
        for w in words:
            seen.setdefault(w)
        return cls(tuple(seen))

    @classmethod
    def from_corpus(cls, lines: Iterable[str]) -> "Vocab":
        counts: Counter[str] = Counter()
        for line in lines:
            for field_ in line.rstrip("\n").split("\t"):
                counts.update(field_.split())
        words = sorted(counts, key=lambda w: (-counts[w], w))
        return cls.build(words)

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(line for line in text.split("\n") if line != ""))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise CorpusError(f"token id {idx} out of vocab range")
        return self.tokens[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def content_ids(self) -> range:
        return range(N_RESERVED, len(self.tokens))


@dataclass(frozen=True)
class ParallelExample:
    source: TokenSeq
    target: TokenSeq


@dataclass(frozen=True)
class CorruptionRules:
    p_insert: float = 0.0
    p_replace: float = 0.0
    p_delete: float = 0.0
    max_corruptions_per_sentence: int = 1
    rng_seed: int = 111

    def __post_init__(self) -> None:
        probs = (self.p_insert, self.p_replace, self.p_delete)
        if any(p < 0 or p > 1 for p in probs):
            raise CorpusError("corruption probabilities must lie in [0, 1]")
        if sum(probs) > 1 + 1e-12:
            raise CorpusError("corruption probabilities sum to more than 1")
        if self.max_corruptions_per_sentence < 1:
            raise CorpusError("max_corruptions_per_sentence must be positive")
        if not 0 <= self.rng_seed < 2**64:
            raise CorpusError("rng_seed must be a 64-bit unsigned integer")


def check_seq(seq: Sequence[int]) -> None:
    if len(seq) < 2 or seq[0] != BOS_ID or seq[-1] != EOS_ID:
        raise CorpusError("token sequence must be wrapped in <s> ... </s>")
    inner = seq[1:-1]
    if any(t in _FORBIDDEN_IN_TEXT or t in (BOS_ID, EOS_ID) for t in inner):
        raise CorpusError("reserved token inside a text sequence")


def tokenize(text: str, vocab: Vocab) -> TokenSeq:
    words = text.split()
    if not words:
        raise CorpusError("empty text")
    return (BOS_ID, *(vocab.id(w) for w in words), EOS_ID)


def detokenize(seq: Sequence[int], vocab: Vocab) -> str:
    ids = list(seq)
    if ids and ids[0] == BOS_ID:
        ids = ids[1:]
    if ids and ids[-1] == EOS_ID:
        ids = ids[:-1]
    return " ".join(vocab.token(i) for i in ids)


def parse_parallel_line(line: str, vocab: Vocab, lineno: int) -> ParallelExample:
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 2:
        raise CorpusError(f"line {lineno}: expected 'source<TAB>target', got {len(fields)} field(s)")
    try:
        return ParallelExample(tokenize(fields[0], vocab), tokenize(fields[1], vocab))
    except CorpusError as exc:
        raise CorpusError(f"line {lineno}: {exc}") from None


def load_parallel(path: str | Path, vocab: Vocab) -> list[ParallelExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            examples.append(parse_parallel_line(line, vocab, lineno))
    return examples


def write_parallel(path: str | Path, examples: Iterable[ParallelExample], vocab: Vocab) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{detokenize(ex.source, vocab)}\t{detokenize(ex.target, vocab)}\n")
            n += 1
    return n


def sentence_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based generator (Philox-4x64) keyed by ``(seed, index)``.

    The key is derived through ``SeedSequence([seed, index])`` so every
    sentence of a corpus owns an independent, reproducible stream no matter
    which order or which worker processes it.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


@dataclass(frozen=True)
class Corruption:
    kind: str  # "insert" | "replace" | "delete"
    position: int
    token: int | None = None


def plan_corruptions(
    clean: Sequence[int], rules: CorruptionRules, vocab: Vocab, index: int = 0
) -> list[Corruption]:
    """Sample the corruptions that :func:`synthesize_corruptions` will apply."""
    check_seq(clean)
    n_content = len(clean) - 2
    if n_content < 1:
        raise CorpusError("clean sentence needs at least one content token")
    content = np.asarray(vocab.content_ids)
    if len(content) < 2:
        raise CorpusError("vocab needs at least two content tokens to corrupt")

    rng = sentence_rng(rules.rng_seed, index)
    cuts = np.cumsum([rules.p_insert, rules.p_replace, rules.p_delete])
    draws = rng.random(n_content)
    ops: list[tuple[str, int]] = []
    for offset, u in enumerate(draws):
        pos = offset + 1
        if u < cuts[0]:
            ops.append(("insert", pos))
        elif u < cuts[1]:
            ops.append(("replace", pos))
        elif u < cuts[2]:
            ops.append(("delete", pos))
    if len(ops) > rules.max_corruptions_per_sentence:
        keep = np.sort(rng.choice(len(ops), rules.max_corruptions_per_sentence, replace=False))
        ops = [ops[i] for i in keep]
    # a sentence must keep at least one content token
    if sum(kind == "delete" for kind, _ in ops) == n_content:
        ops = ops[:-1]

    planned = []
    for kind, pos in ops:
        if kind == "delete":
            planned.append(Corruption(kind, pos))
            continue
        if kind == "replace":
            choices = content[content != clean[pos]]
        else:
            choices = content
        planned.append(Corruption(kind, pos, int(choices[rng.integers(len(choices))])))
    return planned


def apply_corruptions(clean: Sequence[int], ops: Sequence[Corruption]) -> TokenSeq:
    out = list(clean)
    # right to left, so earlier positions stay valid
    for op in sorted(ops, key=lambda o: o.position, reverse=True):
        if op.kind == "replace":
            out[op.position] = op.token
        elif op.kind == "delete":
            del out[op.position]
        else:
            out.insert(op.position + 1, op.token)
    return tuple(out)


def synthesize_corruptions(
    clean: Sequence[int], rules: CorruptionRules, vocab: Vocab, index: int = 0
) -> ParallelExample:
    """Corrupt ``clean`` into a (source, target=clean) training pair.

    ``index`` selects the per-sentence random stream; with the default the
    result depends on ``rules.rng_seed`` alone.
    """
    ops = plan_corruptions(clean, rules, vocab, index)
    return ParallelExample(apply_corruptions(clean, ops), tuple(clean))
