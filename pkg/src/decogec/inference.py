"""Controlled detection, per-slot beam-search infilling and the correction pipeline."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .alignment import Label, format_labels
from .corpus import EOP_ID, ParallelExample, TokenSeq, Vocab, detokenize
from .evaluate import ScoreReport, corpus_score
from .model import ModelError
from .template import MaskedText, TextPiece, build_masked_text, reassemble


@dataclass(frozen=True)
class DetectionControl:
    keep_threshold: float | None = None
    error_lower_bound: float | None = None
    insert_lower_bound: float | None = None

    def __post_init__(self) -> None:
        for v in (self.keep_threshold, self.error_lower_bound, self.insert_lower_bound):
            if v is not None and not 0 <= v <= 1:
                raise ValueError("control thresholds must lie in [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "DetectionControl":
        """Parse ``"delta,phi_e,phi_i"``; empty fields leave a rule unset."""
        fields = text.split(",")
        if len(fields) != 3:
            raise ValueError(f"control string needs three comma-separated fields, got {text!r}")
        values = [float(f) if f.strip() else None for f in fields]
        return cls(*values)

    def __str__(self) -> str:
        return ",".join("" if v is None else f"{v:g}" for v in
                        (self.keep_threshold, self.error_lower_bound, self.insert_lower_bound))


# tuned thresholds for the English setting
ENGLISH_CONTROL = DetectionControl(0.38, 0.5, 0.6)


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 3
    max_piece_len: int = 10

    def __post_init__(self) -> None:
        if self.beam_size < 1 or self.max_piece_len < 1:
            raise ValueError("beam_size and max_piece_len must be at least 1")


def apply_detection_control(probs, ctrl: DetectionControl) -> tuple[Label, ...]:
    """Labels from a (n, |L|) probability matrix (or one row) under detection control.

    A KEEP probability strictly above the threshold forces KEEP; otherwise
    ERROR/INSERT probabilities strictly below their bounds are zeroed and the
    argmax of the unrenormalised row wins, ties going to the lower label id.
    """
    p = np.array(probs, dtype=np.float64, copy=True)
    if p.ndim == 1:
        p = p[None]
    if p.ndim != 2 or p.shape[1] < 2 or (p < 0).any() or np.abs(p.sum(1) - 1).max(initial=0) > 1e-6:
        raise ValueError("malformed detection probability rows")
    forced = np.zeros(len(p), dtype=bool)
    if ctrl.keep_threshold is not None:
        forced = p[:, Label.KEEP] > ctrl.keep_threshold
    if ctrl.error_lower_bound is not None:
        p[p[:, Label.ERROR] < ctrl.error_lower_bound, Label.ERROR] = 0.0
    if ctrl.insert_lower_bound is not None and p.shape[1] > Label.INSERT:
        p[p[:, Label.INSERT] < ctrl.insert_lower_bound, Label.INSERT] = 0.0
    picked = np.where(forced, Label.KEEP, p.argmax(1))
    return tuple(Label(int(x)) for x in picked)


def _fix_sentinels(labels: Sequence[Label]) -> tuple[Label, ...]:
    out = list(labels)
    if out[0] not in (Label.KEEP, Label.INSERT):
        out[0] = Label.KEEP
    out[-1] = Label.KEEP
    return tuple(out)


def detect(model, source: Sequence[int], ctrl: DetectionControl = DetectionControl()):
    """Controlled labels and the raw probability matrix for one sentence."""
    if getattr(model, "mode", "joint") == "correct_only":
        raise ModelError("correct-only model has no trained detection head")
    probs = model.detection_probs(source)
    return _fix_sentinels(apply_detection_control(probs, ctrl)), probs


def decode_slot(model, source, masked: MaskedText, committed: Sequence[TextPiece], cfg: DecodeConfig) -> TextPiece:
    """Beam search for the piece of slot ``len(committed)``, scored by mean token log-prob."""
    alive: list[tuple[TokenSeq, float]] = [((), 0.0)]
    finished: list[tuple[TokenSeq, float, int]] = []
    while alive and len(finished) < cfg.beam_size:
        rows = model.next_token_logprobs(source, masked, committed, [p for p, _ in alive])
        cands = []
        for (prefix, total), row in zip(alive, rows):
            for tok in np.argsort(-row, kind="stable")[: cfg.beam_size]:
                if np.isfinite(row[tok]):
                    cands.append((total + float(row[tok]), prefix, int(tok)))
        cands.sort(key=lambda c: -c[0])
        alive = []
        for total, prefix, tok in cands[: cfg.beam_size]:
            if tok == EOP_ID:
                finished.append((prefix, total, len(prefix) + 1))
            elif len(prefix) + 1 >= cfg.max_piece_len:
                finished.append(((*prefix, tok), total, len(prefix) + 1))
            else:
                alive.append(((*prefix, tok), total))
    best = max(finished, key=lambda f: f[1] / f[2])
    return TextPiece(best[0], len(committed))


def infill(model, source: Sequence[int], masked: MaskedText, cfg: DecodeConfig = DecodeConfig()) -> list[TextPiece]:
    """Fill the slots left to right; each committed piece conditions the next."""
    pieces: list[TextPiece] = []
    for _ in masked.slots:
        pieces.append(decode_slot(model, source, masked, pieces, cfg))
    return pieces


def decoder_steps(pieces: Sequence[TextPiece]) -> int:
    return sum(len(p.ids) + 1 for p in pieces)


@dataclass
class Trace:
    source: TokenSeq
    labels: tuple[Label, ...]
    masked: MaskedText
    pieces: list[TextPiece]
    output: TokenSeq
    decoder_steps: int
    timings: dict = field(default_factory=dict)

    def to_record(self, vocab: Vocab) -> dict:
        return {
            "source": detokenize(self.source, vocab),
            "labels": format_labels(self.labels),
            "masked": " ".join(vocab.token(t) for t in self.masked.ids),
            "pieces": [detokenize(p.ids, vocab) for p in self.pieces],
            "output": detokenize(self.output, vocab),
            "decoder_steps": self.decoder_steps,
            "timings": self.timings,
        }

    def to_json(self, vocab: Vocab) -> str:
        return json.dumps(self.to_record(vocab), ensure_ascii=False)


def correct(
    model,
    source: Sequence[int],
    ctrl: DetectionControl = DetectionControl(),
    cfg: DecodeConfig = DecodeConfig(),
    labels: Sequence[Label] | None = None,
) -> tuple[TokenSeq, Trace]:
    """Detect, mask, infill, reassemble. ``labels`` bypasses detection (correct-only models)."""
    if getattr(model, "mode", "joint") == "detect_only":
        raise ModelError("detection-only model cannot generate corrections")
    source = tuple(source)
    t0 = time.perf_counter()
    if labels is None:
        labels, _ = detect(model, source, ctrl)
    labels = tuple(Label(l) for l in labels)
    t1 = time.perf_counter()
    masked = build_masked_text(source, labels)
    if not masked.slots:
        output, pieces = source, []
    else:
        pieces = infill(model, source, masked, cfg)
        output = reassemble(masked, pieces)
    t2 = time.perf_counter()
    timings = {
        "detection_ms": (t1 - t0) * 1e3,
        "correction_ms": (t2 - t1) * 1e3,
        "total_ms": (t2 - t0) * 1e3,
    }
    return output, Trace(source, labels, masked, pieces, output, decoder_steps(pieces), timings)


# grid search -------------------------------------------------------------------


@dataclass(frozen=True)
class ControlGrid:
    delta: tuple[float | None, ...] = (None,)
    phi_e: tuple[float | None, ...] = (None,)
    phi_i: tuple[float | None, ...] = (None,)

    def axes(self):
        out = []
        for name in ("delta", "phi_e", "phi_i"):
            values = tuple(getattr(self, name))
            if not values:
                raise ValueError(f"empty grid axis {name!r}")
            # the neutral value is scanned first so ties resolve toward it
            out.append((None, *(v for v in values if v is not None)))
        return out


Scorer = Callable[[Sequence, Sequence, Sequence], ScoreReport]


def grid_search_control(
    model,
    dev_pairs: Sequence[ParallelExample],
    grids: ControlGrid,
    cfg: DecodeConfig = DecodeConfig(),
    scorer: Scorer = corpus_score,
) -> tuple[DetectionControl, list[dict]]:
    """Greedy two-stage search: the KEEP threshold alone, then both lower bounds at that threshold."""
    if not dev_pairs:
        raise ValueError("empty dev set")
    deltas, phi_es, phi_is = grids.axes()
    sources = [p.source for p in dev_pairs]
    refs = [p.target for p in dev_pairs]
    probs = [detect(model, s)[1] for s in sources]
    fill_cache: dict[tuple[int, TokenSeq], TokenSeq] = {}

    def run(ctrl: DetectionControl) -> ScoreReport:
        hyps = []
        for k, (src, pr) in enumerate(zip(sources, probs)):
            labels = _fix_sentinels(apply_detection_control(pr, ctrl))
            masked = build_masked_text(src, labels)
            key = (k, masked.ids)
            if key not in fill_cache:
                fill_cache[key] = reassemble(masked, infill(model, src, masked, cfg)) if masked.slots else src
            hyps.append(fill_cache[key])
        return scorer(sources, hyps, refs)

    table: list[dict] = []

    def record(stage: int, ctrl: DetectionControl) -> float:
        rep = run(ctrl)
        table.append({"stage": stage, "delta": ctrl.keep_threshold, "phi_e": ctrl.error_lower_bound,
                      "phi_i": ctrl.insert_lower_bound, "precision": rep.precision,
                      "recall": rep.recall, "f0_5": rep.f_half})
        return rep.f_half

    best_delta, best_f = None, -1.0
    for d in deltas:
        f = record(1, DetectionControl(d, None, None))
        if f > best_f:
            best_delta, best_f = d, f

    best = DetectionControl(best_delta, None, None)
    for e in phi_es:
        for i in phi_is:
            if e is None and i is None:
                continue  # already scored in stage 1
            ctrl = DetectionControl(best_delta, e, i)
            f = record(2, ctrl)
            if f > best_f:
                best, best_f = ctrl, f
    return best, table
