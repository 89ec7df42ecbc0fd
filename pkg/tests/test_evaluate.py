import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_edits_against_oracle, edit_graph
from decogec.alignment import parse_labels
from decogec.corpus import BOS_ID, EOS_ID, N_RESERVED
from decogec.evaluate import (
    Edit,
    ScoreReport,
    apply_edits,
    corpus_score,
    correction_accuracy,
    detection_metrics,
    extract_edits,
    f_beta,
    score,
)
from decogec.model import IGNORE
from decogec.template import TextPiece, build_masked_text
from decogec.training import build_sft1_dataset, make_sample


@settings(max_examples=200, deadline=None)
@given(st.floats(0.001, 1.0))
def test_f_half_of_equal_pr(p):
    assert f_beta(p, p) == pytest.approx(p, abs=1e-12)


def test_hand_case():
    rep = ScoreReport(tp=3, fp=1, fn=3)
    assert rep.precision == 0.75 and rep.recall == 0.5
    assert rep.f_half == pytest.approx(0.6818, abs=1e-4)


def test_empty_conventions():
    assert ScoreReport(0, 0, 0).f_half == 1.0
    assert ScoreReport(0, 2, 0).precision == 0.0 and ScoreReport(0, 2, 0).recall == 1.0
    assert ScoreReport(0, 0, 2).precision == 1.0 and ScoreReport(0, 0, 2).f_half == 0.0
    assert f_beta(0.0, 0.0) == 0.0


def test_precision_weighted():
    assert f_beta(0.8, 0.4) > f_beta(0.4, 0.8)


def test_score_counts():
    a, b, c = Edit(1, 2, (9,)), Edit(3, 3, (8,)), Edit(4, 5, ())
    assert score({a, b}, {a, c}) == ScoreReport(1, 1, 1)
    assert (ScoreReport(1, 2, 3) + ScoreReport(1, 1, 1)).as_dict()["tp"] == 2


def w(*xs):
    return (BOS_ID, *(N_RESERVED + x for x in xs), EOS_ID)


def test_extract_examples():
    assert extract_edits(w(0, 1, 2), w(0, 1, 2)) == frozenset()
    assert extract_edits(w(0, 1, 2), w(0, 2)) == {Edit(2, 3, ())}
    assert extract_edits(w(0, 1), w(0, 5, 1)) == {Edit(2, 2, (N_RESERVED + 5,))}
    assert extract_edits(w(0, 1, 2, 3), w(0, 4, 5, 3)) == {Edit(2, 4, (N_RESERVED + 4, N_RESERVED + 5))}


@pytest.fixture(scope="module")
def graph4():
    return edit_graph(4)


def test_exhaustive_oracle_small(graph4):
    strings, index, dist = graph4
    bad = [(a, b, r) for a in strings for b in strings if (r := check_edits_against_oracle(a, b, index, dist))]
    assert not bad, bad[:5]


def test_oracle_distances_are_levenshtein(graph4):
    strings, index, dist = graph4
    # the BFS graph agrees with the textbook closed forms on a few pairs
    assert dist[index[()], index[(0, 1, 2)]] == 3
    assert dist[index[(0, 1)], index[(1, 0)]] == 2
    assert dist[index[(0, 1, 2, 0)], index[(1, 2, 0, 1)]] == 2


def test_corpus_score_symmetry():
    srcs = [w(0, 1, 2), w(3, 4), w(5, 6, 7)]
    hyps = [w(0, 9, 2), w(3, 4), w(5, 7)]
    refs = [w(0, 9, 2), w(3, 8, 4), w(5, 6)]
    rep = corpus_score(srcs, hyps, refs)
    assert rep == ScoreReport(1, 1, 2)
    order = [2, 0, 1]
    assert corpus_score(*[[x[i] for i in order] for x in (srcs, hyps, refs)]) == rep
    swapped = corpus_score(srcs, refs, hyps)
    assert (swapped.tp, swapped.fp, swapped.fn) == (rep.tp, rep.fn, rep.fp)
    with pytest.raises(ValueError):
        corpus_score(srcs, hyps[:2], refs)


def test_apply_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(300):
        a = w(*rng.integers(0, 4, rng.integers(0, 9)))
        b = w(*rng.integers(0, 4, rng.integers(0, 9)))
        assert apply_edits(a, extract_edits(a, b)) == b


def test_detection_hand_counts():
    gold = [parse_labels("K E E K K"), parse_labels("K K I K"), parse_labels("K E E K")]
    pred = [parse_labels("K E K K K"), parse_labels("K K I K"), parse_labels("K E E E")]
    m = detection_metrics(pred, gold)
    assert m["rec_e"] == 0.75 and m["rec_i"] == 1.0 and m["rec_k"] == 7 / 8
    assert m["acc_d"] == 11 / 13
    assert m["vacuous"] == ["rec_d"]
    with pytest.raises(ValueError):
        detection_metrics(pred[:2], gold)
    with pytest.raises(ValueError):
        detection_metrics([pred[0][:-1], *pred[1:]], gold)


def test_vacuous_insert_recall():
    m = detection_metrics([parse_labels("K E K")], [parse_labels("K E K")])
    assert m["rec_i"] == 1.0 and "rec_i" in m["vacuous"]


class RandomLogits(torch.nn.Module):
    """Scores every vocabulary entry with fresh noise: a uniform random guesser."""

    def __init__(self, vocab_size):
        super().__init__()
        self.vocab_size = vocab_size
        self.gen = torch.Generator().manual_seed(0)

    def forward(self, batch):
        n = int(batch.lm_mask.sum())
        return None, torch.randn(n, self.vocab_size, generator=self.gen)


def test_random_guesser_accuracy():
    rng = np.random.default_rng(1)
    samples = []
    for _ in range(400):
        src = w(*rng.integers(0, 20, 6))
        labels = parse_labels("K K E K K K K K")
        pieces = [TextPiece(tuple(int(x) for x in rng.integers(N_RESERVED, 30, 4)), 0)]
        s = make_sample(src, src, labels, build_masked_text(src, labels), pieces)
        rows = s.lm_targets != IGNORE
        s.lm_targets[rows] = rng.integers(0, 8, int(rows.sum()))
        samples.append(s)
    acc = correction_accuracy(RandomLogits(8), samples)
    assert abs(acc - 1 / 8) < 0.05


def test_memorized_correction_accuracy(memorized):
    model, pairs = memorized
    assert correction_accuracy(model, build_sft1_dataset(pairs[:2])) == 1.0
