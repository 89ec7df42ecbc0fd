"""Command-line entry point: synth, train, detect, correct, evaluate, grid and bench.

Exit codes: 0 success, 2 usage or input error, 3 numerical abort. Every
invocation emits a JSON run manifest (stderr, or ``--manifest FILE``).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import torch

from .alignment import LabelSet, align, derive_labels, format_labels, parse_labels
from .corpus import (
    CorpusError,
    CorruptionRules,
    ParallelExample,
    Vocab,
    apply_corruptions,
    detokenize,
    load_parallel,
    plan_corruptions,
    tokenize,
    write_parallel,
)
from .evaluate import corpus_score, detection_metrics
from .inference import (
    ControlGrid,
    DecodeConfig,
    DetectionControl,
    correct,
    detect,
    grid_search_control,
)
from .model import ModelConfig, ModelError, load_checkpoint, save_checkpoint
from .template import TemplateError
from .training import (
    RunLog,
    TrainConfig,
    TrainingDiverged,
    build_sft1_dataset,
    build_sft2_dataset,
    eval_keys,
    train,
)

logger = logging.getLogger("decogec")

DEFAULT_SEED = 111
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
MODE_NAMES = {"joint": "joint", "detect": "detect_only", "correct": "correct_only"}


class UsageError(Exception):
    """Bad flags or inputs; reported with exit code 2."""


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int
    config_paths: dict = field(default_factory=dict)
    checkpoint: str | None = None
    vocab: str | None = None
    outputs: dict = field(default_factory=dict)
    started: str = ""
    ended: str = ""
    exit_code: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _read_json(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read JSON config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _parse_ctrl(text: str | None) -> DetectionControl:
    if text is None:
        return DetectionControl()
    try:
        return DetectionControl.parse(text)
    except ValueError as exc:
        raise UsageError(f"bad --ctrl {text!r}: {exc}") from None


def _parse_grid(text: str | None) -> tuple[float | None, ...]:
    if text is None or not text.strip():
        return (None,)
    out = []
    for field_ in text.split(","):
        field_ = field_.strip()
        if field_.lower() in ("", "none", "off"):
            out.append(None)
            continue
        try:
            out.append(float(field_))
        except ValueError:
            raise UsageError(f"bad grid value {field_!r}") from None
    return tuple(out)


def _read_lines(path: str) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.rstrip("\r\n") for line in fh]
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def _load_model(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _decode_cfg(args) -> DecodeConfig:
    try:
        return DecodeConfig(beam_size=args.beam, max_piece_len=args.max_piece)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _open_out(path: str | None):
    return open(path, "w", encoding="utf-8", newline="\n") if path else None


# commands ------------------------------------------------------------------------


def cmd_synth(args, manifest: RunManifest) -> int:
    lines = [line for line in _read_lines(args.clean) if line.strip()]
    if not lines:
        raise UsageError(f"{args.clean}: no sentences")
    raw = _read_json(args.rules)
    raw["rng_seed"] = args.seed
    try:
        rules = CorruptionRules(**{k: v for k, v in raw.items() if k in CorruptionRules.__dataclass_fields__})
    except TypeError as exc:
        raise UsageError(f"bad rules config: {exc}") from None
    manifest.config_paths["rules"] = args.rules
    if args.vocab:
        vocab = Vocab.load(args.vocab)
        manifest.vocab = args.vocab
    else:
        vocab = Vocab.from_corpus(lines)
    counts = {"insert": 0, "replace": 0, "delete": 0}
    pairs = []
    for i, line in enumerate(lines):
        clean = tokenize(line, vocab)
        ops = plan_corruptions(clean, rules, vocab, i)
        for op in ops:
            counts[op.kind] += 1
        pairs.append(ParallelExample(apply_corruptions(clean, ops), clean))
    n = write_parallel(args.out, pairs, vocab)
    manifest.outputs["corpus"] = args.out
    print(json.dumps({"examples": n, "corruptions": counts}))
    return EXIT_OK


def _train_configs(args) -> tuple[TrainConfig, dict]:
    data = _read_json(args.config) if args.config else {}
    train_part = data.get("train", data if "model" not in data else {})
    model_part = data.get("model", {})
    train_part = {**train_part, "mode": MODE_NAMES[args.mode], "rng_seed": args.seed}
    train_part.setdefault("eval_key", "ad_accuracy" if args.stage == "sft1" else "general_accuracy")
    try:
        cfg = TrainConfig.from_dict(train_part)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None
    return cfg, model_part


def cmd_train(args, manifest: RunManifest) -> int:
    if args.stage == "sft2" and not args.init:
        raise UsageError("--stage sft2 needs --init pointing at an SFT1 checkpoint")
    cfg, model_part = _train_configs(args)
    if args.config:
        manifest.config_paths["train"] = args.config
    init_model = None
    if args.init:
        init_model, vocab, _ = _load_model(args.init)
        manifest.config_paths["init"] = args.init
        if init_model.label_set != cfg.label_set:
            raise UsageError(f"--init has label set {init_model.label_set}, config asks for {cfg.label_set}")
    elif args.vocab:
        vocab = Vocab.load(args.vocab)
    else:
        files = [args.data] + ([args.dev] if args.dev else [])
        vocab = Vocab.from_corpus(line for f in files for line in _read_lines(f))
    manifest.vocab = args.vocab
    pairs = load_parallel(args.data, vocab)
    dev = load_parallel(args.dev, vocab) if args.dev else []
    if not pairs:
        raise UsageError(f"{args.data}: empty training corpus")

    if init_model is not None:
        model_config = init_model.config
    else:
        try:
            model_config = ModelConfig(**{**model_part, "vocab_size": len(vocab), "label_count": len(cfg.label_set)})
        except TypeError as exc:
            raise UsageError(f"bad model config: {exc}") from None
    label_set = LabelSet(cfg.label_set)

    if args.stage == "sft1":
        dataset = build_sft1_dataset(pairs, label_set, cfg.max_piece_len, model_config.max_positions)
    else:
        detector = init_model
        if args.detector:
            detector, _, _ = _load_model(args.detector)
            manifest.config_paths["detector"] = args.detector
        if detector.mode == "correct_only":
            raise UsageError("sft2 needs a detector with a trained detection head (see --detector)")
        dataset = build_sft2_dataset(pairs, detector, label_set, cfg.max_piece_len, model_config.max_positions)
        init_model = copy.deepcopy(init_model)

    log_path = args.log or f"{args.out}.log.jsonl"
    manifest.outputs["log"] = log_path
    manifest.checkpoint = args.out
    meta = {"stage": args.stage, "train_config": asdict(cfg), "seed": args.seed}
    with RunLog(log_path) as run_log:
        try:
            model, log = train(dataset, dev, cfg, model_config, model=init_model, log_fn=run_log)
        except TrainingDiverged as exc:
            save_checkpoint(args.out, exc.model, vocab, **meta, diverged=True)
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(args.out, model, vocab, **meta)
    done = log[-1]
    print(json.dumps({"checkpoint": args.out, "steps": done["step"], "best_score": done["best_score"]}))
    return EXIT_OK


def _sources(path: str, vocab: Vocab) -> list[tuple[int, ...]]:
    out = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        try:
            out.append(tokenize(line, vocab))
        except CorpusError as exc:
            raise UsageError(f"{path} line {lineno}: {exc}") from None
    return out


def cmd_detect(args, manifest: RunManifest) -> int:
    model, vocab, _ = _load_model(args.model)
    manifest.checkpoint = args.model
    if model.mode == "correct_only":
        raise UsageError("correct-only model has no trained detection head")
    ctrl = _parse_ctrl(args.ctrl)
    sources = _sources(args.input, vocab)
    rows = _map(lambda s: detect(model, s, ctrl)[0], sources, args.threads)
    fh = _open_out(args.out)
    for labels in rows:
        print(format_labels(labels), file=fh or sys.stdout)
    if fh:
        fh.close()
        manifest.outputs["labels"] = args.out
    return EXIT_OK


def cmd_correct(args, manifest: RunManifest) -> int:
    ctrl = _parse_ctrl(args.ctrl)
    model, vocab, _ = _load_model(args.model)
    manifest.checkpoint = args.model
    if model.mode == "detect_only":
        raise UsageError("detection-only model cannot generate corrections")
    dcfg = _decode_cfg(args)
    sources = _sources(args.input, vocab)
    external = None
    if args.labels:
        external = [parse_labels(line) for line in _read_lines(args.labels)]
        if len(external) != len(sources):
            raise UsageError("--labels must have one line per input sentence")
    elif model.mode == "correct_only":
        raise UsageError("correct-only model needs --labels")

    def run(k: int):
        return correct(model, sources[k], ctrl, dcfg, labels=external[k] if external else None)

    try:
        results = _map(run, range(len(sources)), args.threads)
    except TemplateError as exc:
        raise UsageError(str(exc)) from None

    fh = _open_out(args.out)
    trace = _open_out(args.trace)
    for output, tr in results:
        print(detokenize(output, vocab), file=fh or sys.stdout)
        if trace:
            trace.write(tr.to_json(vocab) + "\n")
    for handle, key, path in ((fh, "corrections", args.out), (trace, "trace", args.trace)):
        if handle:
            handle.close()
            manifest.outputs[key] = path
    summary = _timing_summary([tr for _, tr in results])
    print(json.dumps(summary), file=sys.stderr)
    return EXIT_OK


def _timing_summary(traces) -> dict:
    n = len(traces)
    out = {"sentences": n}
    for key in ("detection_ms", "correction_ms", "total_ms"):
        vals = [t.timings[key] for t in traces]
        out[key] = {"total": sum(vals), "mean": sum(vals) / n if n else 0.0}
    out["decoder_steps"] = sum(t.decoder_steps for t in traces)
    return out


def cmd_evaluate(args, manifest: RunManifest) -> int:
    model, vocab, _ = _load_model(args.model)
    manifest.checkpoint = args.model
    pairs = load_parallel(args.pairs, vocab)
    if not pairs:
        raise UsageError(f"{args.pairs}: empty evaluation set")
    ctrl = _parse_ctrl(args.ctrl)
    dcfg = _decode_cfg(args)
    label_set = LabelSet(model.label_set)
    gold = [derive_labels(align(p.source, p.target), label_set) for p in pairs]
    report: dict = {"sentences": len(pairs)}
    if model.mode != "correct_only":
        pred = _map(lambda p: detect(model, p.source, ctrl)[0], pairs, args.threads)
        det = detection_metrics(pred, gold)
        report["detection"] = det
    if model.mode != "detect_only":
        def run(k: int):
            labels = gold[k] if model.mode == "correct_only" else None
            return correct(model, pairs[k].source, ctrl, dcfg, labels=labels)[0]

        hyps = _map(run, range(len(pairs)), args.threads)
        score = corpus_score([p.source for p in pairs], hyps, [p.target for p in pairs])
        report["score"] = score.as_dict()
        report["exact_match"] = sum(h == p.target for h, p in zip(hyps, pairs)) / len(pairs)
    keys = eval_keys(model, pairs, label_set)
    report["eval_keys"] = keys
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        manifest.outputs["report"] = args.out
    return EXIT_OK


def cmd_grid(args, manifest: RunManifest) -> int:
    model, vocab, _ = _load_model(args.model)
    manifest.checkpoint = args.model
    if model.mode != "joint":
        raise UsageError("grid search needs a joint model")
    dev = load_parallel(args.dev, vocab)
    if not dev:
        raise UsageError(f"{args.dev}: empty dev set")
    phi = args.phi_grid
    grids = ControlGrid(
        delta=_parse_grid(args.delta_grid),
        phi_e=_parse_grid(args.phi_e_grid if args.phi_e_grid is not None else phi),
        phi_i=_parse_grid(args.phi_i_grid if args.phi_i_grid is not None else phi),
    )
    best, table = grid_search_control(model, dev, grids, _decode_cfg(args))
    best_row = next(
        r for r in table
        if (r["delta"], r["phi_e"], r["phi_i"]) == (best.keep_threshold, best.error_lower_bound, best.insert_lower_bound)
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for row in table:
                fh.write(json.dumps(row) + "\n")
        manifest.outputs["table"] = args.out
    print(json.dumps({"best": str(best), "precision": best_row["precision"],
                      "recall": best_row["recall"], "f0_5": best_row["f0_5"]}))
    return EXIT_OK


def cmd_bench(args, manifest: RunManifest) -> int:
    model, vocab, _ = _load_model(args.model)
    manifest.checkpoint = args.model
    if model.mode != "joint":
        raise UsageError("bench needs a joint model")
    ctrl = _parse_ctrl(args.ctrl)
    dcfg = _decode_cfg(args)
    sources = _sources(args.input, vocab)
    if not sources:
        raise UsageError(f"{args.input}: no sentences")
    traces = []
    for _ in range(args.repeat):
        traces = [correct(model, s, ctrl, dcfg)[1] for s in sources]
    totals = [t.timings["total_ms"] for t in traces]
    steps = [t.decoder_steps for t in traces]
    # a full-sentence generator would emit every output token plus a terminator
    full = [len(t.output) - 1 for t in traces]
    summary = {
        **_timing_summary(traces),
        "latency_ms": {"median": statistics.median(totals), "max": max(totals)},
        "decoder_steps_per_sentence": sum(steps) / len(steps),
        "full_regeneration_steps_per_sentence": sum(full) / len(full),
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# parser --------------------------------------------------------------------------


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ctrl", help='detection control "delta,phi_e,phi_i"; empty fields leave a rule unset')
    p.add_argument("--beam", type=int, default=3, help="beam width per slot (default 3)")
    p.add_argument("--max-piece", type=int, default=10, help="max tokens per text piece (default 10)")


def _add_threads(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--threads", type=int, default=1,
        help="sentence-level worker threads (default 1); outputs keep input order, but "
             "floating-point results may differ in the last bits from a single-thread run",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decogec", description="Detection-correction grammatical error correction.")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED, help="seed for all randomness (default 111)")
    parser.add_argument("--manifest", help="write the run manifest here instead of stderr")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="corrupt a clean corpus into source/target pairs")
    p.add_argument("--clean", required=True, help="clean sentences, one per line")
    p.add_argument("--rules", required=True, help="JSON corruption rules")
    p.add_argument("--vocab", help="vocab file for inserted/replacement tokens (default: the clean corpus)")
    p.add_argument("--out", required=True, help="output TSV corpus")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="SFT1 or SFT2 fine-tuning")
    p.add_argument("--stage", choices=("sft1", "sft2"), default="sft1")
    p.add_argument("--mode", choices=tuple(MODE_NAMES), default="joint")
    p.add_argument("--data", required=True, help="training TSV corpus")
    p.add_argument("--dev", help="dev TSV corpus for model selection")
    p.add_argument("--config", help='JSON config: {"train": {...}, "model": {...}}')
    p.add_argument("--init", help="checkpoint to start from (required for sft2)")
    p.add_argument("--detector", help="sft2: checkpoint whose detections build the data (default --init)")
    p.add_argument("--vocab", help="vocab file (default: built from --data and --dev)")
    p.add_argument("--log", help="NDJSON training log (default OUT.log.jsonl)")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="label each input sentence")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True, help="sentences, one per line")
    p.add_argument("--ctrl", help='detection control "delta,phi_e,phi_i"')
    p.add_argument("--out", help="label file (default stdout)")
    _add_threads(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("correct", help="correct each input sentence")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True, help="sentences, one per line")
    _add_decode_flags(p)
    p.add_argument("--labels", help="external detection labels, one line per sentence (e.g. 'K E K')")
    p.add_argument("--trace", help="NDJSON trace of labels, masked text and pieces")
    p.add_argument("--out", help="corrected sentences (default stdout)")
    _add_threads(p)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("evaluate", help="edit-level P/R/F0.5 plus detection metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True, help="TSV corpus of source/reference pairs")
    _add_decode_flags(p)
    p.add_argument("--out", help="also write the JSON report here")
    _add_threads(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="greedy grid search over detection control")
    p.add_argument("--model", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--delta-grid", help="comma-separated KEEP thresholds")
    p.add_argument("--phi-grid", help="comma-separated lower bounds used for both phi_e and phi_i")
    p.add_argument("--phi-e-grid", help="ERROR lower bounds (overrides --phi-grid)")
    p.add_argument("--phi-i-grid", help="INSERT lower bounds (overrides --phi-grid)")
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--max-piece", type=int, default=10)
    p.add_argument("--out", help="NDJSON score table")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("bench", help="per-phase latency and decoder-step counts")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    _add_decode_flags(p)
    p.add_argument("--repeat", type=int, default=1, help="timed passes over the input")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    torch.manual_seed(args.seed)
    manifest = RunManifest(command=args.command, argv=argv, seed=args.seed, started=_now())
    try:
        code = args.func(args, manifest)
    except (UsageError, CorpusError, ModelError, TemplateError, OSError, ValueError) as exc:
        print(f"decogec {args.command}: error: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"decogec {args.command}: numerical abort: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    manifest.ended = _now()
    manifest.exit_code = code
    if args.manifest:
        Path(args.manifest).write_text(manifest.to_json() + "\n", encoding="utf-8")
    else:
        print(manifest.to_json(), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
