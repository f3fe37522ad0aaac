"""Command-line entry points: train, eval, roc, stream, footprint, augment-preview.

Settings come from flags, then an optional ``--config`` file of
``key = value`` lines (keys are the long flag names), then defaults.
Artifacts go to ``<out>/<timestamp>-seed<seed>/`` together with the
effective configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation
from .augment import AugmentConfig, augment
from .data_io import (
    SAMPLE_RATE,
    WavError,
    WeightContainer,
    WeightFormatError,
    load_wav,
    read_manifest,
    read_weights,
    split_dataset,
    write_wav,
    write_weights,
)
from .frontend import pcen_full
from .model import PRESETS, footprint_report, preset
from .streaming import current_probs, init_stream, latency_trend, profile_stream, push_samples
from .training import TrainConfig, TrainingDivergedError, format_metrics, predict_probs, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SPLITS = ("train", "validation", "test")

log = logging.getLogger("voicequery")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _add_model_args(p):
    p.add_argument("--variant", choices=sorted(PRESETS), default="crnn-750m")
    for dim in ("c", "k", "d"):
        p.add_argument(f"--{dim}", type=int, default=None, help=f"override hyperparameter {dim}")
    p.add_argument("--r-hidden", type=int, default=None)
    p.add_argument("--n-queries", type=int, default=None, help="number of known queries (default: from manifest)")


def _add_common(p, out=True):
    p.add_argument("--config", default=None, help="key = value settings file")
    p.add_argument("--seed", type=int, default=0)
    if out:
        p.add_argument("--out", default="runs", help="parent directory for the run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voicequery", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a manifest")
    _add_common(p)
    _add_model_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=48)
    p.add_argument("--no-augment", action="store_true")

    for name, helptext in (("eval", "score a split and write summary + ROC"), ("roc", "write the ROC curve of a split")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--manifest", required=True)
        p.add_argument("--weights", required=True)
        p.add_argument("--split", choices=SPLITS + ("all",), default="test")
        if name == "eval":
            p.add_argument("--alpha", type=float, default=None, help="fixed threshold (default: pick on validation)")
            p.add_argument("--target-far", type=float, default=0.01)

    p = sub.add_parser("stream", help="streaming inference over a WAV file or raw PCM on stdin")
    _add_common(p, out=False)
    p.add_argument("--weights", required=True)
    p.add_argument("input", help="WAV path, or '-' for raw 16 kHz int16 little-endian PCM on stdin")
    p.add_argument("--interval-ms", type=int, default=100)
    p.add_argument("--chunk", type=int, default=1600, help="samples fed per call")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--flush", action="store_true", help="also classify at end of input")
    p.add_argument("--profile", action="store_true", help="report per-hop latency and real-time factor on stderr")

    p = sub.add_parser("footprint", help="parameter and multiply accounting")
    p.add_argument("--config", default=None)
    _add_model_args(p)

    p = sub.add_parser("augment-preview", help="write before/after WAV pairs for listening")
    _add_common(p)
    p.add_argument("inputs", nargs="*", help="WAV files")
    p.add_argument("--manifest", default=None)
    p.add_argument("--count", type=int, default=5)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        # Re-parse with the file's values as defaults so explicit flags still win.
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        values = read_config_file(args.config)
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for action in sub._actions:
            if action.dest in values and action.nargs == 0:
                values[action.dest] = values[action.dest].lower() in ("1", "true", "yes", "on")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def make_hp(args, n_queries: int | None = None):
    overrides = {k: getattr(args, k) for k in ("c", "k", "d", "r_hidden") if getattr(args, k, None) is not None}
    nq = args.n_queries if getattr(args, "n_queries", None) is not None else n_queries
    if nq is not None:
        overrides["n_classes"] = nq + 1
    try:
        return preset(args.variant, **overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def run_dir(args) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(args.out) / f"{stamp}-seed{args.seed}"
    suffix = 1
    while path.exists():
        path = Path(args.out) / f"{stamp}-seed{args.seed}-{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    effective = {k: v for k, v in vars(args).items() if k != "func"}
    (path / "config.txt").write_text("".join(f"{k} = {v}\n" for k, v in sorted(effective.items())))
    return path


def load_manifest(path):
    try:
        return read_manifest(path)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e.strerror or e}") from None
    except ValueError as e:
        raise DataError(str(e)) from None


def load_examples(manifest):
    try:
        return manifest.load()
    except OSError as e:
        raise DataError(f"cannot read audio: {e}") from None
    except WavError as e:
        raise DataError(f"bad audio: {e}") from None


def load_model(path):
    try:
        wc = read_weights(path)
    except OSError as e:
        raise DataError(f"cannot read weights {path}: {e.strerror or e}") from None
    except WeightFormatError as e:
        raise DataError(f"bad weight container {path}: {e}") from None
    return wc.hyperparams, wc.tensors


def select_split(manifest, split):
    if split == "all":
        return manifest
    try:
        parts = dict(zip(SPLITS, split_dataset(manifest)))
    except ValueError as e:
        raise DataError(str(e)) from None
    return parts[split]


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    hp = make_hp(args, manifest.n_queries)
    if hp.n_classes != manifest.n_queries + 1:
        raise ConfigError(f"model has {hp.n_classes} classes but manifest implies {manifest.n_queries + 1}")
    try:
        tr, va, _ = split_dataset(manifest)
    except ValueError as e:
        raise DataError(str(e)) from None
    out = run_dir(args)
    cfg = TrainConfig(
        batch_size=args.batch_size,
        total_epochs=args.epochs,
        seed=args.seed,
        augment=None if args.no_augment else AugmentConfig(),
    )
    metrics_path = out / "metrics.tsv"
    metrics_path.write_text("epoch\tlr\ttrain_loss\tval_far\tval_qer\n")

    def on_epoch(row, w):
        with metrics_path.open("a") as fh:
            fh.write(format_metrics([row]))
        write_weights(out / f"epoch_{row['epoch']:02d}.vqw", WeightContainer(hp, w))

    w, _ = train(load_examples(tr), load_examples(va), hp, cfg, on_epoch=on_epoch)
    write_weights(out / "final.vqw", WeightContainer(hp, w))
    print(out)
    return EXIT_OK


def _score(manifest, w, hp):
    examples = load_examples(manifest)
    if not examples:
        raise DataError("split is empty")
    feats = [pcen_full(x).astype(np.float32) for x, _ in examples]
    probs = predict_probs(feats, w, hp)
    return evaluation.records_from_probs(probs, [label for _, label in examples])


def cmd_eval(args) -> int:
    hp, w = load_model(args.weights)
    manifest = load_manifest(args.manifest)
    if manifest.n_queries + 1 != hp.n_classes:
        raise DataError(f"weights expect {hp.n_classes} classes, manifest has {manifest.n_queries + 1}")
    out = run_dir(args)
    rows = {}
    if args.alpha is None:
        val = _score(select_split(manifest, "validation"), w, hp)
        try:
            point = evaluation.pick_alpha(val, hp.unknown, args.target_far)
        except evaluation.TargetNotMetError as e:
            log.warning("%s", e)
            point = e.best
        alpha = point.alpha
        rows["validation"] = point
    else:
        alpha = args.alpha
    records = _score(select_split(manifest, args.split), w, hp)
    rows[args.split] = evaluation.roc_sweep(records, [alpha], hp.unknown)[0]
    rows[f"{args.split}@0"] = evaluation.roc_sweep(records, [0.0], hp.unknown)[0]
    summary = evaluation.summary_table(rows)
    (out / "summary.txt").write_text(summary)
    (out / "roc.tsv").write_text(evaluation.format_roc(evaluation.roc_sweep(records, evaluation.default_alpha_grid(), hp.unknown)))
    (out / "summary.json").write_text(json.dumps({k: vars(v) for k, v in rows.items()}, indent=2))
    sys.stdout.write(summary)
    print(out)
    return EXIT_OK


def cmd_roc(args) -> int:
    hp, w = load_model(args.weights)
    manifest = load_manifest(args.manifest)
    records = _score(select_split(manifest, args.split), w, hp)
    text = evaluation.format_roc(evaluation.roc_sweep(records, evaluation.default_alpha_grid(), hp.unknown))
    out = run_dir(args)
    (out / "roc.tsv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _read_stream_input(src) -> np.ndarray:
    try:
        if src == "-":
            raw = sys.stdin.buffer.read()
            return np.frombuffer(raw[: len(raw) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
        return load_wav(Path(src).read_bytes()).unit()
    except OSError as e:
        raise DataError(f"cannot read {src}: {e.strerror or e}") from None
    except WavError as e:
        raise DataError(f"bad audio {src}: {e}") from None


def cmd_stream(args) -> int:
    hp, w = load_model(args.weights)
    samples = _read_stream_input(args.input)
    if args.chunk < 1:
        raise ConfigError("--chunk must be >= 1")
    st = init_stream(hp)
    out = sys.stdout

    def emit(at_ms, probs):
        label = evaluation.apply_threshold(probs, args.alpha, hp.unknown)
        out.write(f"{at_ms}\t{label}\t{probs.max():.6f}\n")

    for i in range(0, len(samples), args.chunk):
        st, preds = push_samples(st, samples[i: i + args.chunk], w, hp, args.interval_ms)
        for p in preds:
            emit(p.at_ms, p.probs)
    if args.flush and st.frames_seen and st.samples_seen % (SAMPLE_RATE * args.interval_ms // 1000):
        emit(st.samples_seen * 1000 // SAMPLE_RATE, current_probs(st, w, hp))
    if args.profile:
        times, rtf = profile_stream(samples, w, hp, args.interval_ms)
        stats = latency_trend(times)
        sys.stderr.write(
            f"hops {len(times)}  median {1e3 * stats['median_s']:.3f} ms  p99 {1e3 * stats['p99_s']:.3f} ms  "
            f"slope {stats['slope_s_per_hop']:.3e} s/hop  real-time factor {rtf:.4f}\n"
        )
    return EXIT_OK


def cmd_footprint(args) -> int:
    sys.stdout.write(footprint_report(make_hp(args)))
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    paths = [Path(p) for p in args.inputs]
    if args.manifest:
        m = load_manifest(args.manifest)
        paths += [m.resolve(p) for p, _ in m.records[: args.count]]
    if not paths:
        raise ConfigError("give WAV paths or --manifest")
    out = run_dir(args)
    rng = np.random.default_rng(args.seed)
    cfg = replace(AugmentConfig(), apply_probs=(1.0, 1.0, 1.0))
    for i, path in enumerate(paths):
        try:
            wav = load_wav(path.read_bytes())
        except (OSError, WavError) as e:
            raise DataError(f"{path}: {e}") from None
        write_wav(out / f"{i:03d}_before.wav", wav)
        write_wav(out / f"{i:03d}_after.wav", augment(wav, cfg, rng))
    print(out)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "roc": cmd_roc,
    "stream": cmd_stream,
    "footprint": cmd_footprint,
    "augment-preview": cmd_augment_preview,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
