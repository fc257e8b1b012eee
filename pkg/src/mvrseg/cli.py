"""Command-line interface: ``mvrseg <command> [options]``.

Commands: train-vocab, encode, stats, train, eval, sweep, replay.

Every command writes a JSON run manifest (command line, resolved options,
seed, model paths, timestamp) before producing output. ``mvrseg replay
MANIFEST`` re-runs the recorded command line.

Defaults can be overridden with ``--config FILE`` holding ``key=value``
lines, where keys are option names (``vocab-size`` or ``vocab_size``).
"""

from __future__ import annotations

import argparse
import contextlib
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import granularity
from .data import (
    Prediction,
    label_space,
    read_classification,
    read_corpus,
    read_tagging,
    to_examples,
    write_predictions,
)
from .models import BpeModel, count_corpus, load_model, save_model, train_bpe, train_unigram
from .segment import example_rng, make_segmenter
from .trainer import LOSS_TERMS, TrainConfig, ToyModel, forward, train

PROG = "mvrseg"


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Manifest and config plumbing
# ---------------------------------------------------------------------------


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (set, frozenset, tuple)):
        return sorted(value) if isinstance(value, (set, frozenset)) else list(value)
    return value


def write_manifest(path: str | Path, command: str, argv: list[str], args: argparse.Namespace, model_paths: list[str]):
    options = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func", "argv")}
    manifest = {
        "command": command,
        "argv": argv,
        "config": options,
        "seed": options.get("seed"),
        "model_paths": [str(Path(p).resolve()) for p in model_paths if p],
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "version": __version__,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _manifest_path(args, default_output: str | Path | None, in_dir: bool = False) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if default_output in (None, "-"):
        return Path(f"{PROG}-{args.command}.manifest.json")
    if in_dir:
        return Path(default_output) / "manifest.json"
    return Path(f"{default_output}.manifest.json")


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _threads() -> int:
    raw = os.environ.get("MVRSEG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(f"MVRSEG_THREADS must be an integer, got {raw!r}") from None


def _open_out(path):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", encoding="utf-8")


# ---------------------------------------------------------------------------
# train-vocab / encode / stats
# ---------------------------------------------------------------------------


def cmd_train_vocab(args) -> int:
    write_manifest(_manifest_path(args, args.out), "train-vocab", args.argv, args, [args.out])
    stats = count_corpus(read_corpus(args.corpus))
    if args.vocab_size < len(stats.chars):
        raise CliError(f"--vocab-size {args.vocab_size} is below the character inventory size {len(stats.chars)}")
    if args.family == "bpe":
        model = train_bpe(stats, args.vocab_size - len(stats.chars))
    else:
        model = train_unigram(
            stats,
            args.vocab_size,
            seed_max_len=args.seed_max_len,
            prune_fraction=args.prune_fraction,
            em_iters=args.em_iters,
        )
    save_model(model, args.out)
    return 0


def _strength(args, model) -> float | None:
    if isinstance(model, BpeModel):
        return args.p
    return args.alpha


def cmd_encode(args) -> int:
    write_manifest(_manifest_path(args, args.out), "encode", args.argv, args, [args.model])
    model = load_model(args.model)
    segmenter = make_segmenter(model, _strength(args, model))
    sentences = read_corpus(args.input) if args.input not in (None, "-") else sys.stdin.read().splitlines()
    with _open_out(args.out) as fh:
        for i, sentence in enumerate(sentences):
            if args.mode == "sample":
                tokens = segmenter.sample(sentence, example_rng(args.seed, i))
            else:
                tokens = segmenter.encode(sentence)
            fh.write(" ".join(tokens.pieces) + "\n")
    return 0


def cmd_stats(args) -> int:
    write_manifest(_manifest_path(args, args.out), "stats", args.argv, args, [args.model])
    model = load_model(args.model)
    corpus = read_corpus(args.corpus)
    groups = read_corpus(args.groups) if args.groups else ["all"] * len(corpus)
    known = set(args.strict_groups.split(",")) if args.strict_groups else None
    report = granularity(corpus, make_segmenter(model), groups, known_groups=known)
    with _open_out(args.out) as fh:
        fh.write(json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n")
    return 0


# ---------------------------------------------------------------------------
# train / eval / sweep
# ---------------------------------------------------------------------------


def _read_task_data(path, task):
    return read_tagging(path) if task == "tag" else read_classification(path)


def _train_config(args, **overrides) -> TrainConfig:
    ablate = set()
    for item in args.ablate or []:
        ablate.update(x for x in item.split(",") if x)
    fields = dict(
        mode=args.mode,
        task=args.task,
        lam=args.lam,
        tau=args.tau,
        dropout_p=args.p,
        alpha=args.alpha,
        flatten_target=args.flatten_target,
        ablate=frozenset(ablate),
        detach_target=args.detach_target,
        lr=args.lr,
        momentum=args.momentum,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        max_pieces=args.max_pieces,
        embed_dim=args.embed_dim,
    )
    fields.update(overrides)
    return TrainConfig(**fields)


def run_training(args, config: TrainConfig, on_epoch=None):
    seg_model = load_model(args.seg_model)
    segmenter = make_segmenter(seg_model)
    raw_train = _read_task_data(args.data, config.task)
    raw_dev = _read_task_data(args.dev, config.task) if args.dev else []
    labels = label_space([*raw_train, *raw_dev])
    if len(labels) < 2:
        raise CliError("need at least two labels")
    train_set = to_examples(raw_train, labels)
    dev_set = to_examples(raw_dev, labels) if raw_dev else None
    model, history = train(
        train_set, segmenter, config, dev=dev_set, num_classes=len(labels), labels=labels, on_epoch=on_epoch
    )
    return model, history, segmenter


def cmd_train(args) -> int:
    out = Path(args.out)
    write_manifest(_manifest_path(args, out, in_dir=True), "train", args.argv, args, [args.seg_model])
    config = _train_config(args)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics:

        def emit(record):
            metrics.write(json.dumps(record) + "\n")
            metrics.flush()

        model, history, segmenter = run_training(args, config, on_epoch=emit)
    model.save(
        out / "model.npz",
        seg_model=str(Path(args.seg_model).resolve()),
        family=segmenter.family,
        config={k: _jsonable(v) for k, v in vars(config.resolved(segmenter.family)).items()},
    )
    if history:
        print(json.dumps(history[-1]))
    return 0


def cmd_eval(args) -> int:
    write_manifest(_manifest_path(args, args.out_predictions), "eval", args.argv, args, [args.model])
    if not Path(args.model).is_file():
        raise CliError(f"model file not found: {args.model}")
    model, meta = ToyModel.load(args.model)
    seg_path = args.seg_model or meta.get("seg_model")
    if not seg_path:
        raise CliError("no segmentation model recorded; pass --seg-model")
    segmenter = make_segmenter(load_model(seg_path))
    raw = _read_task_data(args.data, model.task)
    labels = model.labels or [str(i) for i in range(model.num_classes)]
    examples = to_examples(raw, labels)
    records = []
    correct = 0
    for ex in examples:
        probs = forward(model, segmenter.encode(ex.text))
        if model.task == "clf":
            records.append(Prediction(ex.id, ex.group, int(ex.label), probs.tolist()))
        else:
            for w, (gold, row) in enumerate(zip(ex.label, probs)):
                records.append(Prediction(f"{ex.id}:{w}", ex.group, int(gold), row.tolist()))
    for rec in records:
        correct += rec.predicted == rec.gold
    if args.out_predictions:
        write_predictions(records, args.out_predictions)
    result = {"accuracy": correct / len(records) if records else None, "n": len(records)}
    print(json.dumps(result))
    return 0


_GRID_KEYS = {
    "lambda": ("lam", float),
    "lam": ("lam", float),
    "tau": ("tau", float),
    "p": ("dropout_p", float),
    "alpha": ("alpha", float),
    "lr": ("lr", float),
    "momentum": ("momentum", float),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "max_pieces": ("max_pieces", int),
    "embed_dim": ("embed_dim", int),
    "mode": ("mode", str),
}


def parse_grid(spec: str) -> list[dict[str, object]]:
    """``"lambda=0.2,0.6;tau=1,2"`` -> cartesian product of settings, in order."""
    axes = []
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise CliError(f"bad grid axis {part!r}; expected name=v1,v2")
        name, values = part.split("=", 1)
        name = name.strip().replace("-", "_")
        if name not in _GRID_KEYS:
            raise CliError(f"unknown grid key {name!r}; choose from {sorted(_GRID_KEYS)}")
        field_name, cast = _GRID_KEYS[name]
        try:
            parsed = [cast(v.strip()) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise CliError(f"bad value in grid axis {name!r}: {exc}") from None
        if not parsed:
            raise CliError(f"grid axis {name!r} has no values")
        axes.append([(name, field_name, v) for v in parsed])
    return [{name: v for name, _, v in combo} for combo in itertools.product(*axes)]


def _grid_overrides(point: dict) -> dict:
    return {_GRID_KEYS[k][0]: v for k, v in point.items()}


def _sweep_job(args, point: dict, seed: int) -> dict:
    config = _train_config(args, **_grid_overrides(point), seed=seed)
    _, history, _ = run_training(args, config)
    final = history[-1] if history else {}
    return {"point": point, "seed": seed, **{k: final.get(k) for k in ("loss", "train_acc", "dev_acc")}}


def aggregate_runs(runs: list[dict], points: list[dict]) -> list[dict]:
    rows = []
    for point in points:
        mine = [r for r in runs if r["point"] == point]
        row = {"point": point, "runs": len(mine)}
        for metric in ("train_acc", "dev_acc"):
            vals = [r[metric] for r in mine if r[metric] is not None]
            row[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{metric}_std"] = float(np.std(vals)) if vals else None
        rows.append(row)
    return rows


def cmd_sweep(args) -> int:
    write_manifest(_manifest_path(args, args.out), "sweep", args.argv, args, [args.seg_model])
    points = parse_grid(args.grid)
    if not points:
        raise CliError("empty grid")
    if args.repeats < 1:
        raise CliError("--repeats must be >= 1")
    jobs = [(point, args.seed + r) for point in points for r in range(args.repeats)]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        job_args = argparse.Namespace(**{k: v for k, v in vars(args).items() if k != "func"})
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_job, job_args, point, seed) for point, seed in jobs]
            runs = [f.result() for f in futures]
    else:
        runs = [_sweep_job(args, point, seed) for point, seed in jobs]
    if args.runs_out:
        with open(args.runs_out, "w", encoding="utf-8") as fh:
            for run in runs:
                fh.write(json.dumps(run) + "\n")
    rows = aggregate_runs(runs, points)
    keys = list(points[0])
    with _open_out(args.out) as fh:
        fh.write("\t".join([*keys, "runs", "train_acc", "dev_acc"]) + "\n")
        for row in rows:
            cells = [str(row["point"][k]) for k in keys] + [str(row["runs"])]
            for metric in ("train_acc", "dev_acc"):
                mean, std = row[f"{metric}_mean"], row[f"{metric}_std"]
                cells.append("nan" if mean is None else f"{mean:.4f}±{std:.4f}")
            fh.write("\t".join(cells) + "\n")
    return 0


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest_file).read_text(encoding="utf-8"))
    argv = manifest.get("argv")
    if not isinstance(argv, list) or not argv:
        raise CliError(f"{args.manifest_file}: manifest has no argv")
    return main(argv)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=["clf", "tag"], default="clf")
    p.add_argument("--mode", choices=["baseline", "SR", "MVR"], default="MVR")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="consistency weight")
    p.add_argument("--tau", type=float, default=1.0, help="flattening temperature")
    p.add_argument("--p", type=float, default=None, help="BPE-dropout probability")
    p.add_argument("--alpha", type=float, default=None, help="unigram sampling temperature")
    p.add_argument("--ablate", action="append", help=f"loss terms to drop: {','.join(LOSS_TERMS)}")
    p.add_argument("--flatten-target", choices=["det_only", "both"], default="det_only")
    p.add_argument("--detach-target", action="store_true", help="treat the flattened target as a constant")
    p.add_argument("--data", required=True)
    p.add_argument("--dev")
    p.add_argument("--seg-model", required=True, help="BPE merges or unigram vocab file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-pieces", type=int, default=None)
    p.add_argument("--embed-dim", type=int, default=16)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    parser.add_argument("--config", help="key=value file overriding option defaults")
    parser.add_argument("--manifest", help="where to write the run manifest")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-vocab", help="train a BPE or unigram vocabulary")
    p.add_argument("--family", choices=["bpe", "ulm"], required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed-max-len", type=int, default=8)
    p.add_argument("--prune-fraction", type=float, default=0.25)
    p.add_argument("--em-iters", type=int, default=2)
    p.add_argument("--seed", type=int, default=0, help="unused; training is deterministic")
    p.set_defaults(func=cmd_train_vocab)

    p = sub.add_parser("encode", help="segment a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=["det", "sample"], default="det")
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="input", default="-")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("stats", help="pieces-per-word report by group")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--groups", help="file with one group label per corpus line")
    p.add_argument("--strict-groups", help="comma-separated allowed group labels")
    p.add_argument("--out", default="-")
    p.add_argument("--seed", type=int, default=0, help="unused; deterministic segmentation")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="fine-tune the toy model (baseline, SR or MVR)")
    _add_train_options(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on deterministic segmentation")
    p.add_argument("--model", required=True, help="model.npz written by train")
    p.add_argument("--data", required=True)
    p.add_argument("--seg-model", help="override the recorded segmentation model")
    p.add_argument("--out-predictions")
    p.add_argument("--seed", type=int, default=0, help="unused; inference never samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over training options, several seeds per point")
    _add_train_options(p)
    p.add_argument("--grid", required=True, help='e.g. "lambda=0.2,0.6;tau=1,2"')
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default="-")
    p.add_argument("--runs-out", help="JSON lines with one record per run")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest_file")
    p.set_defaults(func=cmd_replay)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config_file(known.config)
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            dests = {a.dest: a for a in sub._actions}
            overrides = {}
            for key, raw in values.items():
                key = "lam" if key == "lambda" else key
                if key in dests:
                    act = dests[key]
                    if isinstance(act, argparse._StoreTrueAction):
                        overrides[key] = raw.lower() in ("1", "true", "yes", "on")
                    else:
                        overrides[key] = act.type(raw) if act.type else raw
                    act.required = False
            sub.set_defaults(**overrides)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        args.argv = argv
        return args.func(args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
