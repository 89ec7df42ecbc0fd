"""Edit-level P/R/F0.5 and detection/correction diagnostics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple, Sequence

import torch

from .alignment import Label, align
from .corpus import TokenSeq


class Edit(NamedTuple):
    start: int
    end: int
    replacement: TokenSeq


EditSet = frozenset


def extract_edits(source: Sequence[int], hypothesis: Sequence[int]) -> frozenset[Edit]:
    return frozenset(
        Edit(seg.src_start, seg.src_end, seg.replacement) for seg in align(source, hypothesis).edits
    )


def apply_edits(source: Sequence[int], edits: Iterable[Edit]) -> TokenSeq:
    out, pos = [], 0
    for e in sorted(edits):
        out.extend(source[pos : e.start])
        out.extend(e.replacement)
        pos = e.end
    out.extend(source[pos:])
    return tuple(out)


def f_beta(precision: float, recall: float, beta: float = 0.5) -> float:
    if precision == 0 and recall == 0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * precision * recall / (b2 * precision + recall)


@dataclass(frozen=True)
class ScoreReport:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def f_half(self) -> float:
        return f_beta(self.precision, self.recall)

    def __add__(self, other: "ScoreReport") -> "ScoreReport":
        return ScoreReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def as_dict(self) -> dict:
        return {**asdict(self), "precision": self.precision, "recall": self.recall, "f0_5": self.f_half}

    def to_json(self) -> str:
        return json.dumps(self.as_dict())


def score(hyp_edits: Iterable[Edit], gold_edits: Iterable[Edit]) -> ScoreReport:
    hyp, gold = set(hyp_edits), set(gold_edits)
    return ScoreReport(len(hyp & gold), len(hyp - gold), len(gold - hyp))


def corpus_score(
    sources: Sequence[Sequence[int]],
    hypotheses: Sequence[Sequence[int]],
    references: Sequence[Sequence[int]],
) -> ScoreReport:
    total = ScoreReport(0, 0, 0)
    for src, hyp, ref in zip(sources, hypotheses, references, strict=True):
        total = total + score(extract_edits(src, hyp), extract_edits(src, ref))
    return total


def detection_metrics(
    pred_labels: Sequence[Sequence[Label]], gold_labels: Sequence[Sequence[Label]]
) -> dict:
    """Token accuracy plus per-class recall; classes absent from gold get recall 1."""
    if len(pred_labels) != len(gold_labels):
        raise ValueError("prediction and gold sentence counts differ")
    correct = total = 0
    hits = {lab: 0 for lab in Label}
    counts = {lab: 0 for lab in Label}
    for pred, gold in zip(pred_labels, gold_labels):
        if len(pred) != len(gold):
            raise ValueError("prediction and gold label lengths differ")
        for p, g in zip(pred, gold):
            g = Label(g)
            total += 1
            counts[g] += 1
            if p == g:
                correct += 1
                hits[g] += 1
    out = {"acc_d": correct / total if total else 1.0, "vacuous": []}
    for lab in (Label.KEEP, Label.ERROR, Label.INSERT, Label.DELETE):
        key = f"rec_{lab.short.lower()}"
        if counts[lab]:
            out[key] = hits[lab] / counts[lab]
        else:
            out[key] = 1.0
            out["vacuous"].append(key)
    return out


@torch.no_grad()
def correction_accuracy(model, samples: Sequence, batch_size: int = 64) -> float:
    """Teacher-forced next-token accuracy over all piece positions (terminators included)."""
    from .model import collate

    hits = total = 0
    was_training = model.training
    model.eval()
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        batch = collate([s.packed for s in chunk], lm_targets=[s.lm_targets for s in chunk])
        _, lm = model(batch)
        targets = batch.lm_targets[batch.lm_mask]
        hits += int((lm.argmax(-1) == targets).sum())
        total += len(targets)
    model.train(was_training)
    if not total:
        raise ValueError("no piece positions to score")
    return hits / total
