"""Fault-tolerant template: detection labels to masked text, text pieces, reassembly.

A mask slot is either a ``ReplaceSpan`` (a maximal run of ERROR labels, one
MASK for the whole run) or an ``InsertAfter`` (a MASK placed right after an
INSERT-labelled token). Pieces may be empty; an empty piece on a ReplaceSpan
deletes the span, and restoring the original tokens undoes a false alarm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

from .alignment import DetectionLabels, EditScript, Label, LabelSet, derive_labels, format_labels
from .corpus import EOP_ID, MASK_ID, N_RESERVED, SOP_ID, TokenSeq, Vocab, detokenize


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class ReplaceSpan:
    start: int
    end: int


@dataclass(frozen=True)
class InsertAfter:
    index: int


Origin = Union[ReplaceSpan, InsertAfter]


@dataclass(frozen=True)
class MaskSlot:
    slot_index: int
    origin: Origin
    position: int  # index of the MASK token inside MaskedText.ids


@dataclass(frozen=True)
class MaskedText:
    ids: TokenSeq
    slots: tuple[MaskSlot, ...]

    @property
    def mask_positions(self) -> tuple[int, ...]:
        return tuple(s.position for s in self.slots)


@dataclass(frozen=True)
class TextPiece:
    ids: TokenSeq
    slot_index: int

    def __post_init__(self) -> None:
        if any(t < N_RESERVED for t in self.ids):
            raise TemplateError("text pieces may not contain reserved tokens")


def _check_labels(source: Sequence[int], labels: Sequence[Label]) -> None:
    if len(labels) != len(source):
        raise TemplateError(f"{len(labels)} labels for {len(source)} source tokens")
    if labels[0] not in (Label.KEEP, Label.INSERT) or labels[-1] != Label.KEEP:
        raise TemplateError("<s> may only be KEEP/INSERT and </s> only KEEP")


def build_masked_text(source: Sequence[int], labels: Sequence[Label]) -> MaskedText:
    _check_labels(source, labels)
    ids: list[int] = []
    slots: list[MaskSlot] = []
    i, n = 0, len(source)
    while i < n:
        lab = labels[i]
        if lab == Label.ERROR:
            j = i
            while j < n and labels[j] == Label.ERROR:
                j += 1
            slots.append(MaskSlot(len(slots), ReplaceSpan(i, j), len(ids)))
            ids.append(MASK_ID)
            i = j
            continue
        if lab != Label.DELETE:
            ids.append(source[i])
            if lab == Label.INSERT:
                slots.append(MaskSlot(len(slots), InsertAfter(i), len(ids)))
                ids.append(MASK_ID)
        i += 1
    return MaskedText(tuple(ids), tuple(slots))


def reassemble(masked: MaskedText, pieces: Sequence[TextPiece]) -> TokenSeq:
    if len(pieces) != len(masked.slots):
        raise TemplateError(f"{len(pieces)} pieces for {len(masked.slots)} mask slots")
    out: list[int] = []
    it = iter(pieces)
    for tok in masked.ids:
        if tok == MASK_ID:
            out.extend(next(it).ids)
        else:
            out.append(tok)
    return tuple(out)


def restore_pieces(source: Sequence[int], masked: MaskedText) -> list[TextPiece]:
    """Pieces that undo every mask: original tokens for spans, nothing for insertions."""
    pieces = []
    for slot in masked.slots:
        if isinstance(slot.origin, ReplaceSpan):
            ids = tuple(source[slot.origin.start : slot.origin.end])
        else:
            ids = ()
        pieces.append(TextPiece(ids, slot.slot_index))
    return pieces


def _boundary_map(script: EditScript) -> tuple[list, list, list[bool]]:
    """Target offsets at each source boundary plus a per-token "matched" flag.

    Boundary ``k`` sits between source tokens ``k-1`` and ``k``. ``lo[k]:hi[k]``
    is the target text inserted at that boundary (empty unless a pure
    insertion lands there); boundaries inside an edited span stay ``None``.
    """
    n = script.src_len
    lo: list[int | None] = [None] * (n + 1)
    hi: list[int | None] = [None] * (n + 1)
    matched = [False] * n
    for seg in script.segments:
        if seg.aligned:
            for k in range(seg.src_start, seg.src_end + 1):
                lo[k] = hi[k] = seg.tgt_start + (k - seg.src_start)
            for t in range(seg.src_start, seg.src_end):
                matched[t] = True
    for seg in script.edits:
        if not seg.src_len:
            lo[seg.src_start] = seg.tgt_start
            hi[seg.src_start] = seg.tgt_end
    return lo, hi, matched


def gold_pieces_for_merged(
    source: Sequence[int],
    target: Sequence[int],
    gold_script: EditScript,
    merged: Sequence[Label],
) -> list[TextPiece]:
    """Gold pieces for the masked text built from ``merged`` labels.

    Works for any labelling that covers every gold edit: spans map to the
    target text they align with (original tokens for false alarms), insertion
    slots receive whatever the target inserts at that boundary.
    """
    _check_labels(source, merged)
    if gold_script.src_len != len(source) or gold_script.tgt_len != len(target):
        raise TemplateError("edit script does not match the sentence pair")
    lo, hi, matched = _boundary_map(gold_script)
    n = len(source)

    for seg in gold_script.edits:
        if seg.src_len:
            wanted = (Label.DELETE,) if not seg.tgt_len else ()
            for t in range(seg.src_start, seg.src_end):
                if merged[t] not in (Label.ERROR, *wanted):
                    raise TemplateError(f"labels miss the gold edit at source token {t}")
        else:
            k = seg.src_start
            covered = merged[k - 1] in (Label.INSERT, Label.ERROR) or (
                k < n and merged[k] == Label.ERROR
            )
            if not covered:
                raise TemplateError(f"labels miss the gold insertion before source token {k}")
    for t, lab in enumerate(merged):
        if lab == Label.DELETE and matched[t]:
            raise TemplateError(f"DELETE on correct source token {t} cannot be recovered")

    masked = build_masked_text(source, merged)
    pieces = []
    for slot in masked.slots:
        origin = slot.origin
        if isinstance(origin, ReplaceSpan):
            a, b = origin.start, origin.end
            after_insert = a > 0 and merged[a - 1] == Label.INSERT
            start = hi[a] if after_insert else lo[a]
            end = hi[b]
        else:
            start, end = lo[origin.index + 1], hi[origin.index + 1]
        if start is None or end is None:
            raise TemplateError("mask slot boundary falls inside a gold edit")
        pieces.append(TextPiece(tuple(target[start:end]), slot.slot_index))
    return pieces


def extract_pieces(
    source: Sequence[int],
    target: Sequence[int],
    script: EditScript,
    label_set: LabelSet = LabelSet(),
) -> list[TextPiece]:
    labels = derive_labels(script, label_set)
    return gold_pieces_for_merged(source, target, script, labels)


def merge_detections(gold: Sequence[Label], predicted: Sequence[Label]) -> DetectionLabels:
    if len(gold) != len(predicted):
        raise TemplateError("gold and predicted labels differ in length")
    out = []
    for g, p in zip(gold, predicted):
        if p == Label.KEEP or (g != Label.KEEP and g != p):
            out.append(Label(g))
        else:
            out.append(Label(p))
    return tuple(out)


def piece_inputs(pieces: Sequence[TextPiece]) -> list[TokenSeq]:
    return [(SOP_ID, *p.ids) for p in pieces]


def piece_targets(pieces: Sequence[TextPiece]) -> list[TokenSeq]:
    return [(*p.ids, EOP_ID) for p in pieces]


def render_sample(
    vocab: Vocab,
    source: Sequence[int],
    target: Sequence[int],
    masked: MaskedText,
    pieces: Sequence[TextPiece],
    labels: Sequence[Label],
) -> str:
    """Training sample laid out one field per line, for golden-file comparison."""

    def show(ids: Sequence[int]) -> str:
        return " ".join(vocab.token(t) for t in ids)

    rows = [
        ("Source Text", show(source)),
        ("Target Text", show(target)),
        ("Masked Text", show(masked.ids)),
        ("Text Pieces Input", " ".join(show(p) for p in piece_inputs(pieces))),
        ("Text Pieces Target", " ".join(show(p) for p in piece_targets(pieces))),
        ("Detection Labels", format_labels(labels)),
    ]
    return "\n".join(f"{k}: {v}" for k, v in rows)


def pieces_text(vocab: Vocab, pieces: Sequence[TextPiece]) -> list[str]:
    return [detokenize(p.ids, vocab) for p in pieces]
