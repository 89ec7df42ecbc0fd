from pathlib import Path

import numpy as np
import pytest
import torch

from decogec.alignment import LabelSet
from decogec.corpus import ParallelExample, Vocab, tokenize
from decogec.model import GLMModel, ModelConfig
from decogec.training import TrainConfig, build_sft1_dataset, train

torch.set_num_threads(1)

EX1_SRC = "The every male employees were standing in the back row ."
EX1_TGT = "All the male employees were standing in the back row ."
EX2_SRC = "They are covered with rust so bad ."
EX2_TGT = "They are covered with rust so badly ."


def worked_vocab() -> Vocab:
    return Vocab.from_corpus([f"{EX1_SRC}\t{EX1_TGT}", f"{EX2_SRC}\t{EX2_TGT}"])


def seq(text: str, vocab: Vocab):
    return tokenize(text, vocab)


def tiny_model(vocab_size: int, label_set: str = "KEI", mode: str = "joint", d: int = 16,
               layers: int = 2, heads: int = 2, ff: int = 32, seed: int = 0, **kw) -> GLMModel:
    torch.manual_seed(seed)
    cfg = ModelConfig(vocab_size=vocab_size, label_count=len(label_set), d_model=d, n_layers=layers,
                      n_heads=heads, d_ff=ff, **kw)
    return GLMModel(cfg, mode=mode, label_set=label_set).eval()


def memorize(pairs, vocab, steps=300, mode="joint", label_set="KEI", d=32, lr=3e-3):
    """Train a small model on ``pairs`` until it reproduces them."""
    data = build_sft1_dataset(pairs, LabelSet(label_set))
    cfg = TrainConfig(mode=mode, label_set=label_set, learning_rate=lr, warmup_steps=20,
                      batch_size=len(data), max_epochs=steps, max_steps=steps, eval_interval=0)
    mc = ModelConfig(vocab_size=len(vocab), label_count=len(label_set), d_model=d, n_layers=2,
                     n_heads=2, d_ff=2 * d)
    model, log = train(data, pairs, cfg, mc)
    return model, log


@pytest.fixture(scope="session")
def wvocab() -> Vocab:
    return worked_vocab()


@pytest.fixture(scope="session")
def worked(wvocab):
    return [
        ParallelExample(seq(EX1_SRC, wvocab), seq(EX1_TGT, wvocab)),
        ParallelExample(seq(EX2_SRC, wvocab), seq(EX2_TGT, wvocab)),
    ]


@pytest.fixture(scope="session")
def memorized(wvocab, worked):
    """Model that memorized both worked pairs plus the two correct sentences."""
    pairs = [*worked, ParallelExample(worked[0].target, worked[0].target),
             ParallelExample(worked[1].target, worked[1].target)]
    model, _ = memorize(pairs, wvocab)
    return model, pairs


GOLDEN = Path(__file__).parent / "golden"
SFT1_PREDICTIONS = ("K E E K E E K K K K K K K", "K K K K K I K K K K")


def render_worked(vocab, pair, predicted: str | None = None) -> str:
    """Build the SFT1 (or, given predictions, SFT2) sample for ``pair`` and lay it out as text."""
    from decogec.alignment import format_labels, parse_labels
    from decogec.template import merge_detections, render_sample
    from decogec.training import build_sft2_dataset

    if predicted is None:
        (s,) = build_sft1_dataset([pair])
    else:
        pred = parse_labels(predicted)
        (s,) = build_sft2_dataset([pair], lambda _src: pred)
    text = render_sample(vocab, s.source, s.target, s.masked, s.pieces, s.labels)
    if predicted is not None:
        merged = merge_detections(s.labels, parse_labels(predicted))
        text += f"\nDetections by SFT1: {predicted}\nMerged Detections: {format_labels(merged)}"
    return text


def edit_graph(max_len: int, alphabet: int = 3):
    """All strings up to ``max_len`` and their pairwise edit distances by BFS over single edits.

    Nodes are strings; edges are one insertion, deletion or substitution.
    Distances come from breadth-first search, independent of any DP.
    """
    import itertools

    import scipy.sparse as sp
    from scipy.sparse.csgraph import shortest_path

    strings = [s for n in range(max_len + 1) for s in itertools.product(range(alphabet), repeat=n)]
    index = {s: i for i, s in enumerate(strings)}
    rows, cols = [], []
    for s, i in index.items():
        for k in range(len(s)):
            rows.append(i)
            cols.append(index[s[:k] + s[k + 1:]])
            for a in range(alphabet):
                if a != s[k]:
                    rows.append(i)
                    cols.append(index[s[:k] + (a,) + s[k + 1:]])
        if len(s) < max_len:
            for k in range(len(s) + 1):
                for a in range(alphabet):
                    rows.append(i)
                    cols.append(index[s[:k] + (a,) + s[k:]])
    graph = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(strings),) * 2)
    dist = shortest_path(graph, unweighted=True, directed=False).astype(np.int64)
    return strings, index, dist


def check_edits_against_oracle(a, b, index, dist) -> str | None:
    """Return a description of the first disagreement between extract_edits and the oracle."""
    from decogec.corpus import BOS_ID, EOS_ID, N_RESERVED
    from decogec.evaluate import apply_edits, extract_edits

    wrap = lambda xs: (BOS_ID, *(N_RESERVED + x for x in xs), EOS_ID)
    src, hyp = wrap(a), wrap(b)
    edits = sorted(extract_edits(src, hyp))
    if apply_edits(src, edits) != hyp:
        return "edits do not rebuild the hypothesis"
    cost = 0
    for e in edits:
        if e.start == 0 or e.end == len(src) or (e.start == e.end and not e.replacement):
            return f"bad edit {e}"
        span = tuple(t - N_RESERVED for t in src[e.start:e.end])
        cost += dist[index[span], index[tuple(t - N_RESERVED for t in e.replacement)]]
    if cost != dist[index[tuple(a)], index[tuple(b)]]:
        return f"edit cost {cost} is not minimal"
    if any(x.end >= y.start for x, y in zip(edits, edits[1:])):
        return "adjacent edits were not merged"
    return None


class ScriptedModel:
    """Stand-in model with table-driven detection and deterministic infilling.

    ``probs`` maps a source to its (n, 3) probability matrix. ``fills`` maps
    ``(source, span_start)`` to the piece a slot should receive; any other
    slot is filled with ``junk``, so a false-positive detection costs an edit.
    """

    mode = "joint"

    def __init__(self, probs: dict, fills: dict, junk: int):
        self.probs, self.fills, self.junk = probs, fills, junk
        self.calls = 0

    def detection_probs(self, source):
        return np.asarray(self.probs[tuple(source)])

    def next_token_logprobs(self, source, masked, committed, prefixes):
        from decogec.corpus import EOP_ID
        from decogec.template import ReplaceSpan

        self.calls += 1
        origin = masked.slots[len(committed)].origin
        key = (tuple(source), origin.start if isinstance(origin, ReplaceSpan) else -origin.index - 1)
        want = (*self.fills.get(key, (self.junk,)), EOP_ID)
        rows = np.full((len(prefixes), max(max(want), self.junk) + 1), -np.inf)
        for r, prefix in enumerate(prefixes):
            rows[r, want[min(len(prefix), len(want) - 1)]] = 0.0
        return rows


def random_grid_case(seed: int, n_sentences: int = 12):
    """A scripted model and dev set with one true error per sentence and random detection noise."""
    from decogec.corpus import ParallelExample
    from decogec.toy import random_sentence, toy_vocab

    vocab = toy_vocab(20)
    rng = np.random.default_rng([seed, 99])
    probs, fills, pairs = {}, {}, []
    for k in range(n_sentences):
        src = random_sentence(vocab, seed, k, 10)
        while len(src) < 4 or tuple(src) in probs:
            src = random_sentence(vocab, seed, k + 1000 * (len(probs) + 1), 10)
        pos = int(rng.integers(1, len(src) - 1))
        fix = vocab.content_ids.start + (src[pos] - vocab.content_ids.start + 1) % len(vocab.content_ids)
        tgt = (*src[:pos], fix, *src[pos + 1:])
        p = rng.dirichlet([4.0, 1.0, 1.0], size=len(src))
        p[pos] = rng.dirichlet([1.0, 3.0, 1.0])
        probs[tuple(src)] = p
        fills[(tuple(src), pos)] = (fix,)
        pairs.append(ParallelExample(tuple(src), tgt))
    return ScriptedModel(probs, fills, junk=vocab.content_ids.start), pairs
