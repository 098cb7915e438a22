"""Layer features from a trained network and one-vs-all linear SVMs on top of them."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import StratifiedGroupKFold, StratifiedKFold

from . import network as N
from .audio import DEFAULT_OVERLAP, Waveform, extract_windows
from .formats import atomic_write
from .network import NetworkConfig, Parameters

log = logging.getLogger(__name__)

DEFAULT_C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
DEFAULT_FOLDS = 5
GAP_TOLERANCE = 1e-4
MAX_EPOCHS = 1000


# --------------------------------------------------------------------------
# feature extraction
# --------------------------------------------------------------------------

def feature_dim(config: NetworkConfig, layer: str, window_length: int, mean_over_time: bool = False) -> int:
    """Dimensionality of :func:`extract_features` output for a window of ``window_length`` samples."""
    idx = config.resolve_tap(layer)
    channels = next(l.out_channels for l in reversed(config.layers[:idx + 1]) if l.out_channels)
    if mean_over_time:
        return channels
    return channels * config.output_lengths(window_length, stop_at=layer)[config.layers[idx].name]


def extract_features(
    config: NetworkConfig,
    params: Parameters,
    layer: str,
    windows: np.ndarray,
    mean_over_time: bool = False,
) -> np.ndarray:
    """Eval-mode activations at tap ``layer``, flattened channel-major.

    ``windows`` is one window ``(length,)`` or a stack ``(n, length)``; the
    result is ``(dim,)`` or ``(n, dim)`` with ``dim = channels * timesteps``,
    or ``channels`` when ``mean_over_time`` averages out the time axis.
    """
    if layer not in config.taps:
        raise KeyError(f"unknown layer {layer!r}; valid taps: {', '.join(config.taps)}")
    windows = np.asarray(windows, dtype=np.float32)
    single = windows.ndim == 1
    x = windows.reshape(1 if single else len(windows), 1, -1)
    act = N.forward(config, params, x, "eval", stop_at=layer).output
    feats = act.mean(axis=2) if mean_over_time else act.reshape(len(act), -1)
    return feats[0] if single else feats


# --------------------------------------------------------------------------
# binary solver
# --------------------------------------------------------------------------

@dataclass
class BinaryFit:
    w: np.ndarray  # weights over the bias-augmented features
    epochs: int
    gap: float
    converged: bool


def _primal_dual(X: np.ndarray, y: np.ndarray, w: np.ndarray, alpha: np.ndarray, upper: float) -> Tuple[float, float]:
    reg = 0.5 * float(w @ w)
    hinge = np.maximum(0.0, 1.0 - y * (X @ w)).sum()
    return reg + upper * float(hinge), float(alpha.sum()) - reg


def train_binary(
    X: np.ndarray,
    y: np.ndarray,
    C: float,
    rng: np.random.Generator,
    tol: float = GAP_TOLERANCE,
    max_epochs: int = MAX_EPOCHS,
) -> BinaryFit:
    """Hinge-loss linear SVM by dual coordinate descent.

    Minimises ``0.5 |w|^2 + (C / n) * sum(max(0, 1 - y_i w.x_i))``, so each
    dual variable lives in ``[0, C / n]``. ``X`` should already carry a constant
    column if a bias is wanted. Stops once the relative duality gap
    ``(P - D) / |P|`` is at most ``tol`` or after ``max_epochs`` sweeps.
    """
    n, d = X.shape
    upper = C / n
    alpha = np.zeros(n)
    w = np.zeros(d)
    sq = np.einsum("ij,ij->i", X, X)
    rows = [X[i] for i in range(n)]
    gap = np.inf
    for epoch in range(1, max_epochs + 1):
        for i in rng.permutation(n):
            if sq[i] == 0:
                continue
            xi, yi = rows[i], y[i]
            grad = yi * float(w @ xi) - 1.0
            old = alpha[i]
            new = min(max(old - grad / sq[i], 0.0), upper)
            if new != old:
                alpha[i] = new
                w += (new - old) * yi * xi
        primal, dual = _primal_dual(X, y, w, alpha, upper)
        gap = (primal - dual) / max(abs(primal), 1e-12)
        if gap <= tol:
            return BinaryFit(w, epoch, gap, True)
    log.warning("SVM solver stopped at %d epochs with relative duality gap %.2e", max_epochs, gap)
    return BinaryFit(w, max_epochs, gap, False)


# --------------------------------------------------------------------------
# one-vs-all model
# --------------------------------------------------------------------------

@dataclass
class SvmModel:
    """One-vs-all linear classifier on standardised features."""

    classes: Tuple[str, ...]
    weights: np.ndarray  # (n_classes, dim)
    biases: np.ndarray  # (n_classes,)
    C: float
    mean: np.ndarray  # (dim,)
    scale: np.ndarray  # (dim,)

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if not self.classes:
            raise ValueError("an SVM model needs at least one class")
        if self.weights.shape != (len(self.classes), len(self.mean)) or self.biases.shape != (len(self.classes),):
            raise ValueError(
                f"weights {self.weights.shape} / biases {self.biases.shape} do not fit "
                f"{len(self.classes)} classes of dimension {len(self.mean)}"
            )

    @property
    def dim(self) -> int:
        return len(self.mean)

    def save(self, path: Union[str, Path]) -> None:
        doc = {
            "classes": list(self.classes),
            "C": self.C,
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
        }
        atomic_write(path, json.dumps(doc).encode("utf-8"))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SvmModel":
        doc = json.loads(Path(path).read_text())
        return cls(
            tuple(doc["classes"]),
            np.array(doc["weights"], dtype=np.float64).reshape(len(doc["classes"]), -1),
            np.array(doc["biases"], dtype=np.float64),
            float(doc["C"]),
            np.array(doc["mean"], dtype=np.float64),
            np.array(doc["scale"], dtype=np.float64),
        )


def _standardizer(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def _fit(X: np.ndarray, labels: np.ndarray, classes: Sequence[str], C: float, seed: int) -> SvmModel:
    mean, scale = _standardizer(X)
    Z = np.hstack([(X - mean) / scale, np.ones((len(X), 1))])
    rng = np.random.default_rng(seed)
    weights = np.empty((len(classes), X.shape[1]))
    biases = np.empty(len(classes))
    for k, cls in enumerate(classes):
        y = np.where(labels == cls, 1.0, -1.0)
        fit = train_binary(Z, y, C, rng)
        weights[k], biases[k] = fit.w[:-1], fit.w[-1]
    return SvmModel(tuple(classes), weights, biases, C, mean, scale)


def _folds(labels: np.ndarray, groups: Optional[np.ndarray], folds: int, seed: int):
    keys = labels if groups is None else np.array([f"{l}\x00{g}" for l, g in zip(labels, groups)])
    # every label must appear in enough distinct groups for stratification
    per_class = min(len(set(keys[labels == c])) for c in np.unique(labels))
    k = min(folds, per_class)
    if k < 2:
        return None
    if groups is None:
        splitter = StratifiedKFold(k, shuffle=True, random_state=seed)
        return list(splitter.split(np.zeros(len(labels)), labels))
    splitter = StratifiedGroupKFold(k, shuffle=True, random_state=seed)
    return list(splitter.split(np.zeros(len(labels)), labels, groups))


def svm_train(
    features: np.ndarray,
    labels: Sequence[str],
    C_grid: Sequence[float] = DEFAULT_C_GRID,
    folds: int = DEFAULT_FOLDS,
    groups: Optional[Sequence[str]] = None,
    seed: int = 0,
) -> SvmModel:
    """Pick C by stratified k-fold accuracy (ties go to the smaller C), then refit on everything.

    ``groups`` keeps samples that share a group (e.g. windows of one
    recording) inside the same fold. Standardisation constants are refit on the
    training part of every fold, never on held-out rows.
    """
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray([str(l) for l in labels])
    if X.ndim != 2 or len(X) != len(labels):
        raise ValueError(f"features {X.shape} and {len(labels)} labels do not line up")
    if not np.isfinite(X).all():
        raise ValueError("features contain NaN or Inf")
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise ValueError(f"need at least two classes to train an SVM, got {list(classes)}")
    if np.all(X == X[0]):
        raise ValueError("degenerate features: every sample is identical")
    if not C_grid or any(c <= 0 for c in C_grid):
        raise ValueError(f"C grid must be non-empty and positive, got {list(C_grid)}")
    grid = sorted(C_grid)
    groups_arr = None if groups is None else np.asarray([str(g) for g in groups])

    best_c = grid[0]
    splits = _folds(labels, groups_arr, folds, seed) if len(grid) > 1 else None
    if splits is None and len(grid) > 1:
        log.warning("too few samples per class for cross-validation; using C=%g", best_c)
    if splits is not None:
        best_acc = -1.0
        for C in grid:
            correct = 0
            for train, test in splits:
                model = _fit(X[train], labels[train], classes, C, seed)
                pred = np.array(model.classes)[svm_predict(model, X[test]).argmax(axis=1)]
                correct += int((pred == labels[test]).sum())
            acc = correct / len(labels)
            log.info("C=%g cross-validated accuracy %.4f", C, acc)
            if acc > best_acc:
                best_c, best_acc = C, acc
    return _fit(X, labels, classes, best_c, seed)


def svm_predict(model: SvmModel, features: np.ndarray) -> np.ndarray:
    """Raw one-vs-all margins: ``(n_classes,)`` for one vector, ``(n, n_classes)`` for a stack."""
    X = np.asarray(features, dtype=np.float64)
    if X.shape[-1] != model.dim:
        raise ValueError(f"feature dimension {X.shape[-1]} does not match the model's {model.dim}")
    return ((X - model.mean) / model.scale) @ model.weights.T + model.biases


def predict_labels(model: SvmModel, features: np.ndarray) -> np.ndarray:
    return np.array(model.classes)[np.atleast_2d(svm_predict(model, features)).argmax(axis=1)]


def average_scores(window_scores: np.ndarray, classes: Sequence[str]) -> Tuple[str, np.ndarray]:
    """Mean score per class over windows; the argmax breaks ties in class order."""
    mean = np.asarray(window_scores, dtype=np.float64).mean(axis=0)
    return classes[int(np.argmax(mean))], mean


def classify_recording(
    model: SvmModel,
    config: NetworkConfig,
    params: Parameters,
    layer: str,
    waveform: Waveform,
    window_seconds: float,
    overlap: float = DEFAULT_OVERLAP,
    mean_over_time: bool = False,
) -> Tuple[str, np.ndarray]:
    """Label a preprocessed recording by averaging SVM scores over its windows."""
    windows = np.stack(extract_windows(waveform, window_seconds, overlap))
    feats = extract_features(config, params, layer, windows, mean_over_time)
    return average_scores(svm_predict(model, feats), model.classes)
