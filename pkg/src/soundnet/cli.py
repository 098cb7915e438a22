"""Command-line entry point: ``soundnet train | extract | svm train | svm eval | gradcheck``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import network as N
from .audio import DEFAULT_OVERLAP, WavError, extract_windows, preprocess, read_wav
from .features import SvmModel, average_scores, extract_features, svm_predict, svm_train
from .formats import (
    DISTILL,
    FeatureDump,
    FormatError,
    load_checkpoint,
    load_features,
    load_manifest,
    read_posteriors,
    recording_id,
    save_features,
)
from .training import LOSSES, DistillSample, TrainConfig, run_gradcheck, train_autoencoder, train_distill

log = logging.getLogger("soundnet")

EXIT_USAGE = 2
ARCHS = {
    "soundnet8": N.build_soundnet8,
    "soundnet5": N.build_soundnet5,
    "autoencoder4": N.build_autoencoder4,
    "soundnet8-compact": N.build_soundnet8_compact,
}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
RUN_KEYS = {"arch", "loss", "output_dir", "width_divisor"}


class UsageError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

def parse_config(text: str, source: str = "config") -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in TRAIN_KEYS | RUN_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def train_config_from(values: Dict[str, str]) -> TrainConfig:
    kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in values:
            cast = int if f.type in (int, "int") else float
            try:
                kwargs[f.name] = cast(values[f.name])
            except ValueError:
                raise UsageError(f"config key {f.name!r}: cannot parse {values[f.name]!r}") from None
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_arch(name: str, width_divisor: Optional[int] = None) -> N.NetworkConfig:
    if name not in ARCHS:
        raise UsageError(f"unknown architecture {name!r}; choose from {', '.join(ARCHS)}")
    if name == "soundnet8-compact" and width_divisor:
        return N.build_soundnet8_compact(width_divisor)
    return ARCHS[name]()


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _load_audio(path: Path) -> np.ndarray:
    return preprocess(read_wav(path)).samples


def _teacher_for(audio: Path, posterior: Path):
    clips = read_posteriors(posterior)
    for clip in clips:
        if clip.clip_id in (audio.stem, audio.name):
            return clip.probs
    if len(clips) == 1:
        return clips[0].probs
    raise UsageError(f"{posterior}: no clip id matches {audio.name} among {len(clips)} clips")


def cmd_train(args) -> int:
    values: Dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        values = parse_config(path.read_text(), str(path))
    for key in ("arch", "loss", "seed", "output_dir"):
        if getattr(args, key) is not None:
            values[key] = str(getattr(args, key))
    config = train_config_from(values)
    arch = values.get("arch", "soundnet8")
    loss = values.get("loss", "kl")
    if loss not in LOSSES:
        raise UsageError(f"config key 'loss': must be one of {sorted(LOSSES)}, got {loss!r}")
    net = build_arch(arch, int(values["width_divisor"]) if "width_divisor" in values else None)
    out_dir = Path(values.get("output_dir", "runs"))

    manifest = load_manifest(args.manifest)
    print(
        f"soundnet train: arch={net.name} loss={loss} lr={config.learning_rate:g} batch={config.batch_size} "
        f"iters={config.max_iterations} beta1={config.beta1:g} beta2={config.beta2:g} seed={config.seed} "
        f"clips={len(manifest)} output={out_dir}",
        flush=True,
    )
    if args.dry_run:
        return 0
    waves = [_load_audio(a) for a, _ in manifest]
    length = min(len(w) for w in waves)
    if any(len(w) != length for w in waves):
        log.warning("cropping %d clips to the shortest length, %d samples", len(waves), length)
    waves = [w[:length] for w in waves]

    kwargs = dict(checkpoint_dir=out_dir, metrics_path=out_dir / "metrics.tsv")
    out_dir.mkdir(parents=True, exist_ok=True)
    if arch == "autoencoder4":
        result = train_autoencoder(waves, config, net=net, **kwargs)
    else:
        if manifest.mode != DISTILL:
            raise UsageError(f"manifest {args.manifest}: {arch} training needs an audio_path,teacher_posterior_path manifest")
        samples = [DistillSample(w, _teacher_for(a, Path(p)), a.stem) for w, (a, p) in zip(waves, manifest)]
        result = train_distill(samples, net, config, loss=loss, **kwargs)
    final = result.losses[-1] if result.losses else float("nan")
    print(f"done: {len(result.losses)} iterations, final loss {final:.6g}, {len(result.checkpoints)} checkpoints in {out_dir}")
    return 0


# --------------------------------------------------------------------------
# extract
# --------------------------------------------------------------------------

def cmd_extract(args) -> int:
    config, params = load_checkpoint(args.checkpoint).to_params()
    if args.layer not in config.taps:
        raise UsageError(f"unknown layer {args.layer!r}; valid taps: {', '.join(config.taps)}")
    paths = list(args.audio)
    if args.manifest:
        paths += [str(a) for a, _ in load_manifest(args.manifest)]
    if not paths:
        raise UsageError("no audio files given")
    dump: Optional[FeatureDump] = None
    failed = 0
    for path in paths:
        try:
            wave = preprocess(read_wav(path))
        except (OSError, WavError, ValueError) as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            failed += 1
            continue
        windows = np.stack(extract_windows(wave, args.window_seconds, args.overlap))
        feats = np.atleast_2d(extract_features(config, params, args.layer, windows, args.mean_over_time))
        if dump is None:
            dump = FeatureDump(args.layer, feats.shape[1])
        for i, vec in enumerate(feats):
            dump.add(f"{path}#{i}", vec)
    if dump is None:
        print("error: no audio file could be read", file=sys.stderr)
        return 1
    save_features(args.output, dump)
    print(f"wrote {len(dump.ids)} records of dimension {dump.dim} from {len(paths) - failed} files to {args.output}")
    return 0


# --------------------------------------------------------------------------
# svm
# --------------------------------------------------------------------------

def _labels_by_recording(manifest_path: str) -> Dict[str, str]:
    manifest = load_manifest(manifest_path, check_paths=False)
    if manifest.mode == DISTILL:
        raise UsageError(f"manifest {manifest_path}: expected an audio_path,label manifest")
    return {str(Path(a).resolve()): str(label) for a, label in manifest}


def _labeled_windows(dump: FeatureDump, labels: Dict[str, str]) -> Tuple[np.ndarray, List[str], List[str]]:
    recordings = [recording_id(i) for i in dump.ids]
    missing = sorted({r for r in recordings if str(Path(r).resolve()) not in labels})
    if missing:
        raise UsageError(f"{len(missing)} recordings in the feature dump have no label, e.g. {missing[0]}")
    y = [labels[str(Path(r).resolve())] for r in recordings]
    return dump.matrix(), y, recordings


def cmd_svm_train(args) -> int:
    dump = load_features(args.features)
    X, y, groups = _labeled_windows(dump, _labels_by_recording(args.labels))
    model = svm_train(X, y, C_grid=args.c_grid, folds=args.folds, groups=groups, seed=args.seed)
    model.save(args.output)
    print(f"trained {len(model.classes)} one-vs-all classifiers on {len(X)} windows from {len(set(groups))} recordings; C={model.C:g}")
    return 0


def evaluate(model: SvmModel, dump: FeatureDump, labels: Dict[str, str]) -> Tuple[List[str], List[str], List[str]]:
    """Window-averaged predictions per recording: (recording ids, true labels, predicted labels)."""
    X, y, recordings = _labeled_windows(dump, labels)
    scores = svm_predict(model, X)
    order: List[str] = []
    rows: Dict[str, List[int]] = {}
    for i, r in enumerate(recordings):
        if r not in rows:
            order.append(r)
            rows[r] = []
        rows[r].append(i)
    truth = [y[rows[r][0]] for r in order]
    pred = [average_scores(scores[rows[r]], model.classes)[0] for r in order]
    return order, truth, pred


def confusion_csv(classes: Sequence[str], truth: Sequence[str], pred: Sequence[str]) -> str:
    labels = list(classes) + sorted(set(truth) - set(classes))
    index = {c: i for i, c in enumerate(labels)}
    matrix = np.zeros((len(labels), len(labels)), dtype=int)
    for t, p in zip(truth, pred):
        matrix[index[t], index[p]] += 1
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\predicted"] + labels)
    for c, row in zip(labels, matrix):
        writer.writerow([c] + row.tolist())
    return buf.getvalue()


def cmd_svm_eval(args) -> int:
    model = SvmModel.load(args.model)
    dump = load_features(args.features)
    _, truth, pred = evaluate(model, dump, _labels_by_recording(args.labels))
    truth_arr, pred_arr = np.array(truth), np.array(pred)
    for c in sorted(set(truth), key=lambda c: (c not in model.classes, model.classes.index(c) if c in model.classes else c)):
        mask = truth_arr == c
        print(f"class {c}: {int((pred_arr[mask] == c).sum())}/{int(mask.sum())} = {(pred_arr[mask] == c).mean():.4f}")
    print(f"overall accuracy: {int((truth_arr == pred_arr).sum())}/{len(truth)} = {(truth_arr == pred_arr).mean():.4f}")
    table = confusion_csv(model.classes, truth, pred)
    if args.confusion:
        Path(args.confusion).write_text(table)
    else:
        sys.stdout.write(table)
    return 0


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------

def _corrupted_backward(net, params, result, grad):
    grads = N.backward(net, params, result, grad)
    key = sorted(k for k in grads if k.endswith(".weight"))[-1]
    grads[key] = grads[key] * 1.01
    return grads


def cmd_gradcheck(args) -> int:
    backward = _corrupted_backward if args.corrupt else N.backward
    report = run_gradcheck(args.scale, n_samples=args.samples, seed=args.seed, backward_fn=backward)
    print(report.format())
    ok = report.passed(args.tolerance)
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {report.max_rel_error:.3e} (tolerance {args.tolerance:g})")
    return 0 if ok else 1


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soundnet", description="Train, inspect and evaluate raw-waveform sound networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="distillation or autoencoder training from a manifest")
    t.add_argument("--config", help="key=value file of training settings")
    t.add_argument("--manifest", required=True, help="CSV manifest of training clips")
    t.add_argument("--arch", choices=sorted(ARCHS))
    t.add_argument("--loss", choices=sorted(LOSSES))
    t.add_argument("--seed", type=int)
    t.add_argument("--output-dir", dest="output_dir")
    t.add_argument("--dry-run", action="store_true", help="validate inputs, print the run header and stop")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="dump layer features for audio windows")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--layer", required=True)
    e.add_argument("--window-seconds", type=float, default=1.0)
    e.add_argument("--overlap", type=float, default=DEFAULT_OVERLAP)
    e.add_argument("--mean-over-time", action="store_true", help="average the tap over time instead of flattening")
    e.add_argument("--manifest", help="labeled manifest whose audio files are added to the inputs")
    e.add_argument("--output", required=True, help="feature dump to write")
    e.add_argument("audio", nargs="*")
    e.set_defaults(func=cmd_extract)

    s = sub.add_parser("svm", help="train or evaluate a one-vs-all linear SVM")
    ssub = s.add_subparsers(dest="svm_command", required=True)
    st = ssub.add_parser("train")
    st.add_argument("--features", required=True)
    st.add_argument("--labels", required=True, help="audio_path,label manifest")
    st.add_argument("--output", required=True, help="model file to write")
    st.add_argument("--c-grid", type=float, nargs="+", default=[0.01, 0.1, 1.0, 10.0, 100.0])
    st.add_argument("--folds", type=int, default=5)
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_svm_train)
    se = ssub.add_parser("eval")
    se.add_argument("--model", required=True)
    se.add_argument("--features", required=True)
    se.add_argument("--labels", required=True)
    se.add_argument("--confusion", help="write the confusion matrix CSV here instead of stdout")
    se.set_defaults(func=cmd_svm_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of backpropagation")
    g.add_argument("--scale", choices=["tiny", "small"], default="tiny")
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, KeyError) as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; checkpoints already written are complete", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
