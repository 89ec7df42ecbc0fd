"""Levenshtein alignment of token sequences and detection-label derivation."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

from .corpus import TokenSeq, Vocab, check_seq


class AlignmentError(ValueError):
    pass


class Label(IntEnum):
    KEEP = 0
    ERROR = 1
    INSERT = 2
    DELETE = 3

    @property
    def short(self) -> str:
        return self.name[0]

    @classmethod
    def parse(cls, text: str) -> "Label":
        for label in cls:
            if text.upper() in (label.short, label.name):
                return label
        raise ValueError(f"unknown detection label {text!r}")


@dataclass(frozen=True)
class LabelSet:
    variant: str = "KEI"

    def __post_init__(self) -> None:
        if self.variant not in ("KE", "KEI", "KEID"):
            raise ValueError(f"unknown label set {self.variant!r}")

    @property
    def members(self) -> tuple[Label, ...]:
        return tuple(Label(i) for i in range(len(self.variant)))

    def __len__(self) -> int:
        return len(self.variant)


DetectionLabels = tuple[Label, ...]


def format_labels(labels: Sequence[Label]) -> str:
    return " ".join(Label(l).short for l in labels)


def parse_labels(text: str) -> DetectionLabels:
    return tuple(Label.parse(t) for t in text.split())


@dataclass(frozen=True)
class Segment:
    """Half-open source span ``[src_start, src_end)`` paired with a target span.

    Aligned segments have identical source and target tokens; unaligned ones
    carry the target tokens in ``replacement``.
    """

    aligned: bool
    src_start: int
    src_end: int
    tgt_start: int
    tgt_end: int
    replacement: TokenSeq = ()

    @property
    def src_len(self) -> int:
        return self.src_end - self.src_start

    @property
    def tgt_len(self) -> int:
        return self.tgt_end - self.tgt_start


@dataclass(frozen=True)
class EditScript:
    segments: tuple[Segment, ...]
    cost: int

    @property
    def src_len(self) -> int:
        return self.segments[-1].src_end if self.segments else 0

    @property
    def tgt_len(self) -> int:
        return self.segments[-1].tgt_end if self.segments else 0

    @property
    def edits(self) -> tuple[Segment, ...]:
        return tuple(s for s in self.segments if not s.aligned)

    def dump(self, vocab: Vocab | None = None) -> str:
        lines = []
        for seg in self.segments:
            if seg.aligned:
                lines.append(f"ALIGNED {seg.src_start}..{seg.src_end}")
            else:
                toks = (vocab.token(t) if vocab else str(t) for t in seg.replacement)
                lines.append(f"EDIT {seg.src_start}..{seg.src_end} -> '{' '.join(toks)}'")
        return "\n".join(lines)


def _edit_ops(a: Sequence[int], b: Sequence[int]) -> tuple[list[str], int]:
    """Minimal unit-cost edit path between ``a`` and ``b``.

    Costs are computed over suffixes so the path can be traced forwards,
    preferring match > replace > delete > insert at each step.
    """
    n, m = len(a), len(b)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][m] = n - i
    for j in range(m + 1):
        dist[n][j] = m - j
    for i in range(n - 1, -1, -1):
        row, below = dist[i], dist[i + 1]
        ai = a[i]
        for j in range(m - 1, -1, -1):
            diag = below[j + 1] + (ai != b[j])
            best = below[j] + 1
            if row[j + 1] + 1 < best:
                best = row[j + 1] + 1
            row[j] = diag if diag < best else best

    ops = []
    i = j = 0
    while i < n or j < m:
        here = dist[i][j]
        if i < n and j < m:
            if a[i] == b[j] and here == dist[i + 1][j + 1]:
                ops.append("M")
                i += 1
                j += 1
                continue
            if a[i] != b[j] and here == dist[i + 1][j + 1] + 1:
                ops.append("R")
                i += 1
                j += 1
                continue
        if i < n and here == dist[i + 1][j] + 1:
            ops.append("D")
            i += 1
        else:
            ops.append("I")
            j += 1
    return ops, dist[0][0]


def align(source: Sequence[int], target: Sequence[int]) -> EditScript:
    """Minimal edit script turning ``source`` into ``target``.

    Sentinels are pinned to each other; contiguous edit operations are merged
    into a single unaligned segment.
    """
    check_seq(source)
    check_seq(target)
    ops, cost = _edit_ops(source[1:-1], target[1:-1])
    ops = ["M", *ops, "M"]

    segments: list[Segment] = []
    i = j = 0
    k = 0
    while k < len(ops):
        aligned = ops[k] == "M"
        si, tj = i, j
        while k < len(ops) and (ops[k] == "M") == aligned:
            if ops[k] in "MR":
                i += 1
                j += 1
            elif ops[k] == "D":
                i += 1
            else:
                j += 1
            k += 1
        replacement = () if aligned else tuple(target[tj:j])
        segments.append(Segment(aligned, si, i, tj, j, replacement))
    return EditScript(tuple(segments), cost)


def apply_script(source: Sequence[int], script: EditScript) -> TokenSeq:
    out: list[int] = []
    pos = 0
    for seg in script.segments:
        if seg.src_start != pos or seg.src_end < seg.src_start or seg.src_end > len(source):
            raise AlignmentError(f"segment span {seg.src_start}..{seg.src_end} out of bounds")
        if seg.aligned:
            out.extend(source[seg.src_start : seg.src_end])
        else:
            if len(seg.replacement) != seg.tgt_len:
                raise AlignmentError("replacement length disagrees with target span")
            out.extend(seg.replacement)
        pos = seg.src_end
    if pos != len(source):
        raise AlignmentError("script does not cover the whole source")
    return tuple(out)


def derive_labels(script: EditScript, label_set: LabelSet = LabelSet()) -> DetectionLabels:
    n = script.src_len
    labels = [Label.KEEP] * n
    for seg in script.edits:
        if seg.src_len:
            lab = Label.DELETE if label_set.variant == "KEID" and not seg.tgt_len else Label.ERROR
            for t in range(seg.src_start, seg.src_end):
                labels[t] = lab
            continue
        k = seg.src_start  # insertion point: between token k-1 and token k
        if k < 1:
            raise AlignmentError("insertion point has no preceding token")
        if label_set.variant != "KE":
            labels[k - 1] = Label.INSERT
        elif k > 1:
            labels[k - 1] = Label.ERROR
        else:
            # <s> can't be rewritten, so a sentence-initial insertion rewrites the first word
            if k >= n - 1:
                raise AlignmentError("insertion into an empty sentence under the KE label set")
            labels[k] = Label.ERROR
    if labels[0] not in (Label.KEEP, Label.INSERT) or labels[-1] != Label.KEEP:
        raise AlignmentError("sentinel tokens received an edit label")
    return tuple(labels)


def edit_distance(source: Sequence[int], target: Sequence[int]) -> int:
    return _edit_ops(source, target)[1]

