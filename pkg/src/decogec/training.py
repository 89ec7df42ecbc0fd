"""Losses, SFT1/SFT2 sample construction and the training loop."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .alignment import Label, LabelSet, align, derive_labels
from .corpus import EOP_ID, ParallelExample, TokenSeq
from .evaluate import correction_accuracy, detection_metrics
from .model import IGNORE, Batch, GLMModel, ModelConfig, PackedInput, collate, pack_input
from .template import (
    MaskedText,
    TextPiece,
    TemplateError,
    build_masked_text,
    gold_pieces_for_merged,
    merge_detections,
)

logger = logging.getLogger(__name__)

MODES = ("joint", "detect_only", "correct_only")
EVAL_KEYS = ("ad_accuracy", "general_accuracy")
PROB_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``model`` holds the last good weights."""

    def __init__(self, message: str, model: GLMModel, log: list[dict]):
        super().__init__(message)
        self.model = model
        self.log = log


@dataclass
class TrainConfig:
    gamma: float = 2.0
    alpha_keep: float = 1.0
    alpha_error_insert: float = 2.0
    w_detect: float = 10.0
    mode: str = "joint"
    label_set: str = "KEI"
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 1e-4
    batch_size: int = 32
    grad_accum_steps: int = 1
    max_epochs: int = 10
    max_steps: int | None = None
    patience: int = 10
    eval_interval: int = 200
    eval_key: str = "ad_accuracy"
    max_piece_len: int = 10
    grad_clip: float | None = 1.0
    rng_seed: int = 111

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.alpha_keep <= 0 or self.alpha_error_insert <= 0:
            raise ValueError("class weights must be positive")
        if self.w_detect < 0:
            raise ValueError("w_detect must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.eval_key not in EVAL_KEYS:
            raise ValueError(f"eval_key must be one of {EVAL_KEYS}")
        LabelSet(self.label_set)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def alpha(self, label: int) -> float:
        return self.alpha_keep if label == Label.KEEP else self.alpha_error_insert


# losses ----------------------------------------------------------------------


def focal_loss(prob_of_true_label: float, label: int, cfg: TrainConfig) -> float:
    p = float(prob_of_true_label)
    if not 0 < p <= 1:
        raise ValueError(f"probability must lie in (0, 1], got {p}")
    return cfg.alpha(label) * (1.0 - p) ** cfg.gamma * -math.log(max(p, PROB_FLOOR))


def focal_loss_terms(det_logits: torch.Tensor, labels: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    """Per-token focal loss for a (N, |L|) logit matrix."""
    logp = torch.log_softmax(det_logits, dim=-1).gather(1, labels[:, None]).squeeze(1)
    logp = logp.clamp(min=math.log(PROB_FLOOR))
    p = logp.exp()
    alpha = torch.where(labels == Label.KEEP, cfg.alpha_keep, cfg.alpha_error_insert).to(logp.dtype)
    return alpha * (1.0 - p) ** cfg.gamma * -logp


def correction_loss(lm_logits: torch.Tensor, piece_targets: torch.Tensor) -> torch.Tensor:
    """Summed token cross-entropy over piece positions (``<|endofpiece|>`` included)."""
    lm_logits = torch.as_tensor(lm_logits)
    piece_targets = torch.as_tensor(piece_targets, dtype=torch.long)
    if lm_logits.shape[0] != piece_targets.shape[0]:
        raise ValueError("logit rows and piece targets disagree")
    if not len(piece_targets):
        return lm_logits.new_zeros(())
    return torch.nn.functional.cross_entropy(lm_logits, piece_targets, reduction="sum")


def combined_loss(detect_loss_sum, n_detect_tokens: int, correct_loss_sum, n_correct_tokens: int, cfg: TrainConfig):
    """Token-averaged correction loss plus ``w_detect`` times the averaged detection loss.

    In joint mode a head with no tokens in the batch drops out of the sum.
    """
    if cfg.mode == "detect_only":
        if n_detect_tokens <= 0:
            raise ValueError("no detection tokens")
        return detect_loss_sum / n_detect_tokens
    if cfg.mode == "correct_only":
        if n_correct_tokens <= 0:
            raise ValueError("no correction tokens")
        return correct_loss_sum / n_correct_tokens
    if n_detect_tokens <= 0 and n_correct_tokens <= 0:
        raise ValueError("no active tokens")
    total = 0.0
    if n_correct_tokens > 0:
        total = total + correct_loss_sum / n_correct_tokens
    if n_detect_tokens > 0:
        total = total + cfg.w_detect * (detect_loss_sum / n_detect_tokens)
    return total


def batch_loss(model: GLMModel, batch: Batch, cfg: TrainConfig) -> tuple[torch.Tensor, dict]:
    det_logits, lm_logits = model(batch)
    lm_targets = batch.lm_targets[batch.lm_mask]
    det_sum = focal_loss_terms(det_logits, batch.det_targets, cfg).sum()
    cor_sum = correction_loss(lm_logits, lm_targets)
    n_det, n_cor = len(batch.det_targets), len(lm_targets)
    loss = combined_loss(det_sum, n_det, cor_sum, n_cor, cfg)
    parts = {
        "loss_detect": det_sum.item() / max(n_det, 1),
        "loss_correct": cor_sum.item() / max(n_cor, 1),
    }
    return loss, parts


# samples ---------------------------------------------------------------------


@dataclass
class TrainingSample:
    source: TokenSeq
    target: TokenSeq
    labels: tuple[Label, ...]  # detection targets, always gold
    masked: MaskedText
    pieces: list[TextPiece]
    packed: PackedInput
    lm_targets: np.ndarray  # next-token targets per packed row, IGNORE off pieces

    @property
    def n_piece_tokens(self) -> int:
        return int((self.lm_targets != IGNORE).sum())


def make_sample(
    source: Sequence[int],
    target: Sequence[int],
    gold_labels: Sequence[Label],
    masked: MaskedText,
    pieces: Sequence[TextPiece],
    max_positions: int | None = None,
) -> TrainingSample:
    packed = pack_input(source, masked, pieces, max_positions=max_positions)
    lm_targets = np.full(len(packed), IGNORE, dtype=np.int64)
    for (a, b), piece in zip(packed.piece_ranges, pieces):
        lm_targets[a:b] = [*piece.ids, EOP_ID]
    return TrainingSample(
        tuple(source), tuple(target), tuple(gold_labels), masked, list(pieces), packed, lm_targets
    )


def _too_long(pieces: Sequence[TextPiece], max_piece_len: int) -> bool:
    return any(len(p.ids) > max_piece_len for p in pieces)


def build_sft1_dataset(
    pairs: Iterable[ParallelExample],
    label_set: LabelSet = LabelSet(),
    max_piece_len: int = 10,
    max_positions: int | None = None,
) -> list[TrainingSample]:
    samples, skipped = [], 0
    for pair in pairs:
        script = align(pair.source, pair.target)
        labels = derive_labels(script, label_set)
        masked = build_masked_text(pair.source, labels)
        pieces = gold_pieces_for_merged(pair.source, pair.target, script, labels)
        if _too_long(pieces, max_piece_len):
            skipped += 1
            continue
        samples.append(make_sample(pair.source, pair.target, labels, masked, pieces, max_positions))
    if skipped:
        logger.info("skipped %d pair(s) with a piece longer than %d tokens", skipped, max_piece_len)
    return samples


Detector = Callable[[TokenSeq], Sequence[Label]]


def _as_detector(detector) -> Detector:
    if hasattr(detector, "detection_probs"):
        from .inference import DetectionControl, detect

        return lambda source: detect(detector, source, DetectionControl())[0]
    return detector


def build_sft2_dataset(
    pairs: Iterable[ParallelExample],
    sft1_model,
    label_set: LabelSet = LabelSet(),
    max_piece_len: int = 10,
    max_positions: int | None = None,
) -> list[TrainingSample]:
    """Masked text from gold labels merged with the SFT1 model's own detections.

    ``sft1_model`` is a trained model or any callable mapping a source
    sequence to predicted labels. Detection targets stay gold.
    """
    detector = _as_detector(sft1_model)
    samples, skipped, fallback = [], 0, 0
    for pair in pairs:
        script = align(pair.source, pair.target)
        gold = derive_labels(script, label_set)
        merged = merge_detections(gold, detector(pair.source))
        try:
            pieces = gold_pieces_for_merged(pair.source, pair.target, script, merged)
        except TemplateError:
            # unrecoverable prediction (e.g. DELETE on a correct token): keep the gold layout
            fallback += 1
            merged = gold
            pieces = gold_pieces_for_merged(pair.source, pair.target, script, merged)
        if _too_long(pieces, max_piece_len):
            skipped += 1
            continue
        masked = build_masked_text(pair.source, merged)
        samples.append(make_sample(pair.source, pair.target, gold, masked, pieces, max_positions))
    if skipped or fallback:
        logger.info("sft2: %d skipped for piece length, %d fell back to gold masks", skipped, fallback)
    return samples


def sample_batch(samples: Sequence[TrainingSample], mode: str = "joint") -> Batch:
    if mode == "detect_only":
        packs = [pack_input(s.source) for s in samples]
        return collate(packs, [s.labels for s in samples], [np.full(len(p), IGNORE) for p in packs])
    return collate([s.packed for s in samples], [s.labels for s in samples], [s.lm_targets for s in samples])


# evaluation keys ---------------------------------------------------------------


def accuracy_keys(rec_k: float, rec_e: float, rec_i: float, acc_c: float) -> dict:
    return {
        "ad_accuracy": rec_e + rec_i + acc_c,
        "general_accuracy": (rec_k * rec_e * rec_i * acc_c) ** 0.25,
    }


@torch.no_grad()
def eval_keys(
    model: GLMModel,
    dev: Sequence[ParallelExample] | Sequence[TrainingSample],
    label_set: LabelSet | None = None,
    batch_size: int = 64,
) -> dict:
    """AD-Accuracy (Rec_E + Rec_I + Acc_C) and General-Accuracy (geometric mean of all four)."""
    label_set = label_set or LabelSet(model.label_set)
    samples = list(dev)
    if samples and isinstance(samples[0], ParallelExample):
        samples = build_sft1_dataset(samples, label_set, max_positions=model.config.max_positions)
    if not samples:
        raise ValueError("empty dev set")
    was_training = model.training
    model.eval()
    preds, golds = [], []
    if model.mode != "correct_only":
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            det, _ = model(sample_batch(chunk, "detect_only"))
            flat = det.argmax(-1).tolist()
            pos = 0
            for s in chunk:
                preds.append([Label(x) for x in flat[pos : pos + len(s.source)]])
                golds.append(s.labels)
                pos += len(s.source)
    vacuous = []
    if preds:
        det_m = detection_metrics(preds, golds)
        vacuous += det_m["vacuous"]
    else:
        det_m = {"acc_d": 1.0, "rec_k": 1.0, "rec_e": 1.0, "rec_i": 1.0, "vacuous": ["detection"]}
        vacuous.append("detection")
    acc_c = 1.0
    if model.mode != "detect_only":
        with_pieces = [s for s in samples if s.n_piece_tokens]
        if with_pieces:
            acc_c = correction_accuracy(model, with_pieces, batch_size=batch_size)
        else:
            vacuous.append("acc_c")
    else:
        vacuous.append("acc_c")
    model.train(was_training)
    if vacuous:
        logger.debug("vacuous eval components: %s", sorted(set(vacuous)))
    rec_k, rec_e, rec_i = det_m["rec_k"], det_m["rec_e"], det_m["rec_i"]
    return {
        **accuracy_keys(rec_k, rec_e, rec_i, acc_c),
        "acc_d": det_m["acc_d"],
        "rec_k": rec_k,
        "rec_e": rec_e,
        "rec_i": rec_i,
        "acc_c": acc_c,
        "vacuous": sorted(set(vacuous)),
    }


# training loop -------------------------------------------------------------------


def _schedule(cfg: TrainConfig, total_steps: int) -> Callable[[int], float]:
    warm = max(cfg.warmup_steps, 0)

    def factor(step: int) -> float:
        if step < warm:
            return (step + 1) / warm
        if total_steps <= warm:
            return 1.0
        return max(0.0, (total_steps - step) / (total_steps - warm))

    return factor


def train(
    dataset: Sequence[TrainingSample],
    dev_pairs: Sequence[ParallelExample] | Sequence[TrainingSample],
    cfg: TrainConfig,
    model_config: ModelConfig | None = None,
    *,
    model: GLMModel | None = None,
    log_fn: Callable[[dict], None] | None = None,
) -> tuple[GLMModel, list[dict]]:
    """Minibatch AdamW with warmup and linear (power-1 polynomial) decay.

    The dev set is scored with ``cfg.eval_key`` every ``eval_interval``
    optimizer steps and once at the end; the best-scoring weights are
    returned. Training stops after ``patience`` evaluations without
    improvement, after ``max_epochs`` or after ``max_steps``.
    """
    if not dataset:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.rng_seed)
    if model is None:
        if model_config is None:
            raise ValueError("need a model or a model configuration")
        model = GLMModel(model_config, mode=cfg.mode, label_set=cfg.label_set)
    else:
        model.mode = cfg.mode
    label_set = LabelSet(cfg.label_set)
    if len(label_set) != model.config.label_count:
        raise ValueError("label set does not match the model's detection head")
    dev = list(dev_pairs)
    if dev and isinstance(dev[0], ParallelExample):
        dev = build_sft1_dataset(dev, label_set, cfg.max_piece_len, model.config.max_positions)
    samples = list(dataset)
    if cfg.mode == "correct_only":
        samples = [s for s in samples if s.n_piece_tokens]
        if not samples:
            raise ValueError("no correction targets in the training set")

    steps_per_epoch = math.ceil(len(samples) / (cfg.batch_size * cfg.grad_accum_steps))
    total_steps = steps_per_epoch * cfg.max_epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.dim() >= 2 and "emb" not in name else no_decay).append(p)
    optim = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
    )
    sched = torch.optim.lr_scheduler.LambdaLR(optim, _schedule(cfg, total_steps))
    rng = np.random.default_rng(cfg.rng_seed)

    log: list[dict] = []

    def emit(record: dict) -> None:
        log.append(record)
        if log_fn is not None:
            log_fn(record)

    best_score, best_state, bad_evals = -math.inf, copy.deepcopy(model.state_dict()), 0
    step, t0 = 0, time.perf_counter()
    running: dict[str, float] = {}

    def evaluate() -> bool:
        nonlocal best_score, best_state, bad_evals
        keys = eval_keys(model, dev, label_set) if dev else {cfg.eval_key: -running.get("loss", 0.0)}
        score = keys[cfg.eval_key]
        improved = score > best_score
        if improved:
            best_score, best_state, bad_evals = score, copy.deepcopy(model.state_dict()), 0
        else:
            bad_evals += 1
        emit({"step": step, "event": "eval", "score": score, **{k: v for k, v in keys.items() if k != "vacuous"},
              "elapsed_s": round(time.perf_counter() - t0, 2)})
        return bad_evals >= cfg.patience

    stop = False
    model.train()
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(samples))
        batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        for b0 in range(0, len(batches), cfg.grad_accum_steps):
            group = batches[b0 : b0 + cfg.grad_accum_steps]
            optim.zero_grad(set_to_none=True)
            agg = {"loss": 0.0, "loss_detect": 0.0, "loss_correct": 0.0}
            for idx in group:
                batch = sample_batch([samples[i] for i in idx], cfg.mode)
                try:
                    loss, parts = batch_loss(model, batch, cfg)
                except FloatingPointError as exc:
                    model.load_state_dict(best_state)
                    raise TrainingDiverged(str(exc), model, log) from exc
                if not torch.isfinite(loss):
                    model.load_state_dict(best_state)
                    raise TrainingDiverged(f"non-finite loss at step {step}", model, log)
                (loss / len(group)).backward()
                agg["loss"] += loss.item() / len(group)
                for k, v in parts.items():
                    agg[k] += v / len(group)
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            lr = optim.param_groups[0]["lr"]
            optim.step()
            sched.step()
            step += 1
            running = agg
            if step % 50 == 0 or step == 1:
                emit({"step": step, "epoch": epoch, "event": "train", "lr": lr, **agg})
            if cfg.eval_interval and step % cfg.eval_interval == 0 and evaluate():
                stop = True
            if stop or step >= total_steps:
                stop = True
                break
        if stop:
            break
    evaluate()
    model.load_state_dict(best_state)
    model.eval()
    emit({"step": step, "event": "done", "best_score": best_score, "elapsed_s": round(time.perf_counter() - t0, 2)})
    return model, log


def weight_sweep(
    dataset: Sequence[TrainingSample],
    dev_pairs,
    base: TrainConfig,
    model_config: ModelConfig,
    w_detect_grid: Sequence[float] = (1, 5, 10, 20),
    alpha_grid: Sequence[float] = (1, 2, 3, 4),
) -> list[dict]:
    """Loss-weight matrix: alpha sweep at w_D=10, w_D sweep at alpha=2, plus plain cross-entropy."""
    configs = [replace(base, gamma=0.0, alpha_error_insert=1.0, w_detect=10.0)]
    configs += [replace(base, alpha_error_insert=a, w_detect=10.0) for a in alpha_grid]
    configs += [replace(base, alpha_error_insert=2.0, w_detect=w) for w in w_detect_grid if w != 10]
    rows = []
    for cfg in configs:
        model, _ = train(dataset, dev_pairs, cfg, model_config)
        keys = eval_keys(model, dev_pairs, LabelSet(cfg.label_set))
        rows.append({"gamma": cfg.gamma, "alpha_error_insert": cfg.alpha_error_insert,
                     "w_detect": cfg.w_detect, **{k: v for k, v in keys.items() if k != "vacuous"}})
    return rows


def config_to_json(cfg: TrainConfig, model_config: ModelConfig | None = None) -> str:
    data = {"train": asdict(cfg)}
    if model_config is not None:
        data["model"] = asdict(model_config)
    return json.dumps(data, indent=2)


@dataclass
class RunLog:
    """Newline-delimited JSON training log."""

    path: str
    _fh: object = field(default=None, repr=False)

    def __enter__(self) -> "RunLog":
        self._fh = open(self.path, "w", encoding="utf-8")
        return self

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def __exit__(self, *exc) -> None:
        self._fh.close()
