import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import seq
from decogec.alignment import (
    AlignmentError,
    EditScript,
    Label,
    LabelSet,
    Segment,
    align,
    apply_script,
    derive_labels,
    format_labels,
    parse_labels,
)
from decogec.corpus import BOS_ID, EOS_ID, N_RESERVED, CorruptionRules, Vocab, synthesize_corruptions
from decogec.template import build_masked_text, extract_pieces, reassemble
from decogec.toy import random_sentence, toy_vocab

ABC = Vocab.build(["a", "b", "c", "d"])


def levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wrap(xs):
    return (BOS_ID, *(N_RESERVED + x for x in xs), EOS_ID)


def test_worked_example1(worked, wvocab):
    script = align(worked[0].source, worked[0].target)
    assert len(script.edits) == 1
    e = script.edits[0]
    assert (e.src_start, e.src_end) == (1, 3)
    assert [wvocab.token(t) for t in e.replacement] == ["All", "the"]
    assert format_labels(derive_labels(script)) == "K E E K K K K K K K K K K"
    assert apply_script(worked[0].source, script) == worked[0].target


def test_worked_example2_labels(worked):
    assert format_labels(derive_labels(align(worked[1].source, worked[1].target))) == "K K K K K K K E K K"


def test_identity_single_aligned_segment():
    s = seq("a b c", ABC)
    script = align(s, s)
    assert script.cost == 0
    assert script.segments == (Segment(True, 0, 5, 0, 5),)
    assert derive_labels(script) == (Label.KEEP,) * 5


def test_insertion_after_a():
    src, tgt = seq("a c", ABC), seq("a b c", ABC)
    script = align(src, tgt)
    (e,) = script.edits
    assert (e.src_start, e.src_end, e.tgt_start, e.tgt_end) == (2, 2, 2, 3)
    assert format_labels(derive_labels(script, LabelSet("KEI"))) == "K I K K"
    ke = derive_labels(script, LabelSet("KE"))
    assert format_labels(ke) == "K E K K"
    (piece,) = extract_pieces(src, tgt, script, LabelSet("KE"))
    assert [ABC.token(t) for t in piece.ids] == ["a", "b"]


def test_sentence_initial_insertion():
    src, tgt = seq("b c", ABC), seq("a b c", ABC)
    script = align(src, tgt)
    assert format_labels(derive_labels(script)) == "I K K K"
    # BOS cannot be rewritten under KE; the first word absorbs the insertion
    assert format_labels(derive_labels(script, LabelSet("KE"))) == "K E K K"
    for ls in ("KE", "KEI"):
        labels = derive_labels(script, LabelSet(ls))
        assert reassemble(build_masked_text(src, labels), extract_pieces(src, tgt, script, LabelSet(ls))) == tgt


def test_keid_deletion():
    src, tgt = seq("a b c", ABC), seq("a c", ABC)
    script = align(src, tgt)
    assert format_labels(derive_labels(script, LabelSet("KEID"))) == "K K D K K"
    assert format_labels(derive_labels(script, LabelSet("KEI"))) == "K K E K K"


def test_adjacent_edits_merge():
    src, tgt = seq("a b c", ABC), seq("a d d c", ABC)
    script = align(src, tgt)
    assert len(script.edits) == 1
    for a, b in zip(script.segments, script.segments[1:]):
        assert a.aligned or b.aligned


def test_tie_break_prefers_replace():
    script = align(seq("a b", ABC), seq("a c", ABC))
    (e,) = script.edits
    assert (e.src_start, e.src_end) == (2, 3) and e.tgt_len == 1


def test_dump_format():
    script = align(seq("a c", ABC), seq("a b c", ABC))
    assert script.dump(ABC) == "ALIGNED 0..2\nEDIT 2..2 -> 'b'\nALIGNED 2..4"


def test_apply_script_rejects_out_of_bounds():
    bad = EditScript((Segment(True, 0, 9, 0, 9),), 0)
    with pytest.raises(AlignmentError):
        apply_script((BOS_ID, EOS_ID), bad)


def test_unknown_label_set():
    with pytest.raises(ValueError):
        LabelSet("KI")
    assert parse_labels("K e INSERT") == (Label.KEEP, Label.ERROR, Label.INSERT)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=12), st.lists(st.integers(0, 3), max_size=12))
def test_minimal_cost_matches_oracle(a, b):
    src, tgt = wrap(a), wrap(b)
    script = align(src, tgt)
    assert script.cost == levenshtein(a, b)
    assert apply_script(src, script) == tgt
    assert align(src, tgt) == script
    # tiling and no empty/adjacent edits
    assert script.segments[0].src_start == 0 and script.src_len == len(src) and script.tgt_len == len(tgt)
    for x, y in zip(script.segments, script.segments[1:]):
        assert x.src_end == y.src_start and x.tgt_end == y.tgt_start
        assert x.aligned or y.aligned
    for e in script.edits:
        assert e.src_len or e.tgt_len


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=10), st.lists(st.integers(0, 3), max_size=10))
def test_label_soundness_kei(a, b):
    script = align(wrap(a), wrap(b))
    labels = derive_labels(script)
    masked = build_masked_text(wrap(a), labels)
    n_span = sum(1 for e in script.edits if e.src_len)
    n_ins = sum(1 for e in script.edits if not e.src_len)
    runs = sum(1 for i, l in enumerate(labels) if l == Label.ERROR and (i == 0 or labels[i - 1] != Label.ERROR))
    assert runs == n_span
    assert labels.count(Label.INSERT) == n_ins
    assert len(masked.slots) == n_span + n_ins


def test_roundtrip_on_synthesized_corpus():
    v = toy_vocab(50)
    rules = CorruptionRules(0.1, 0.1, 0.1, 3, 42)
    for i in range(1000):
        ex = synthesize_corruptions(random_sentence(v, 42, i), rules, v, i)
        assert apply_script(ex.source, align(ex.source, ex.target)) == ex.target
