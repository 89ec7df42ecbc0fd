"""Deterministic synthetic corpora for smoke tests and the toy learning task.

The toy language is a family of modular arithmetic progressions over
``w000 .. w{n-1}``: a sentence picks a start word and a stride and counts
upwards. Any single corruption breaks the progression locally, so errors are
both detectable and correctable from context. The default uses stride 1 only,
which keeps every correction a one-step lookup from a neighbour.
"""

from __future__ import annotations

from dataclasses import replace

from .corpus import (
    BOS_ID,
    EOS_ID,
    N_RESERVED,
    CorruptionRules,
    ParallelExample,
    TokenSeq,
    Vocab,
    sentence_rng,
    synthesize_corruptions,
)

ONE_EDIT_RULES = CorruptionRules(
    p_insert=0.2, p_replace=0.5, p_delete=0.3, max_corruptions_per_sentence=1, rng_seed=111
)

# offsets keep the clean-text streams apart from the corruption streams
_CLEAN_STREAM = 1 << 40
_SPLIT_STRIDE = 1 << 32


def toy_vocab(n_words: int = 100) -> Vocab:
    return Vocab.build(f"w{i:03d}" for i in range(n_words))


def progression_sentence(
    vocab: Vocab, seed: int, index: int, min_len: int = 4, max_len: int = 14, strides=(1, 2, 3)
) -> TokenSeq:
    rng = sentence_rng(seed, _CLEAN_STREAM + index)
    n_words = len(vocab) - N_RESERVED
    length = int(rng.integers(min_len, max_len + 1))
    start = int(rng.integers(n_words))
    stride = int(strides[rng.integers(len(strides))])
    words = [N_RESERVED + (start + k * stride) % n_words for k in range(length)]
    return (BOS_ID, *words, EOS_ID)


def random_sentence(vocab: Vocab, seed: int, index: int, max_content: int = 14) -> TokenSeq:
    rng = sentence_rng(seed, _CLEAN_STREAM + index)
    length = int(rng.integers(1, max_content + 1))
    words = rng.integers(N_RESERVED, len(vocab), size=length)
    return (BOS_ID, *map(int, words), EOS_ID)


def corrupt_corpus(
    clean: list[TokenSeq], rules: CorruptionRules, vocab: Vocab, offset: int = 0
) -> list[ParallelExample]:
    return [synthesize_corruptions(c, rules, vocab, offset + i) for i, c in enumerate(clean)]


def toy_task(
    n_train: int = 10_000,
    n_dev: int = 1_000,
    n_test: int = 1_000,
    seed: int = 111,
    n_words: int = 100,
    strides: tuple[int, ...] = (1,),
) -> tuple[Vocab, dict[str, list[ParallelExample]]]:
    """Train/dev/test pairs with exactly one corruption per sentence."""
    vocab = toy_vocab(n_words)
    rules = replace(ONE_EDIT_RULES, rng_seed=seed)
    splits = {}
    for k, (name, n) in enumerate((("train", n_train), ("dev", n_dev), ("test", n_test))):
        offset = k * _SPLIT_STRIDE
        clean = [progression_sentence(vocab, seed, offset + i, strides=strides) for i in range(n)]
        splits[name] = corrupt_corpus(clean, rules, vocab, offset)
    return vocab, splits
