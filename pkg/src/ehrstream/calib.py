"""Post-hoc uncertainty quantification: temperature scaling, histogram
binning, split-conformal prediction sets, and their evaluation metrics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import AlphaError, DegenerateError, IoError, ShapeError

T_MIN = 0.05
T_MAX = 50.0
DEFAULT_BINS = 15

_ROW_SUM_TOL = 1e-9


def as_prob_matrix(probs) -> np.ndarray:
    """Validate an (N, K) matrix of per-row probability vectors."""
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 2:
        raise ShapeError(f"expected an (N, K>=2) matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ShapeError("probability matrix contains non-finite entries")
    if (arr < -1e-12).any() or (arr > 1 + 1e-12).any():
        raise ShapeError("probabilities must lie in [0, 1]")
    sums = arr.sum(axis=1)
    if np.abs(sums - 1.0).max() > _ROW_SUM_TOL:
        worst = float(np.abs(sums - 1.0).max())
        raise ShapeError(f"rows must sum to 1 (worst deviation {worst:.3g})")
    return arr


def _as_labels(labels, n: int, k: int) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ShapeError(f"labels must be a length-{n} vector, got {arr.shape}")
    arr = arr.astype(np.int64)
    if (arr < 0).any() or (arr >= k).any():
        raise ShapeError(f"labels must lie in 0..{k - 1}")
    return arr


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    z = logits / temperature
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    picked = z[np.arange(z.shape[0]), labels]
    return float(np.mean(lse - picked))


@dataclass(frozen=True)
class TemperatureModel:
    T: float

    def __post_init__(self):
        if not (T_MIN <= self.T <= T_MAX):
            raise ShapeError(f"T must lie in [{T_MIN}, {T_MAX}], got {self.T}")


def fit_temperature(logits, labels) -> TemperatureModel:
    """Fit the scalar temperature minimizing mean NLL of softmax(logits/T).

    Golden-section search on log T over [log 0.05, log 50] to 1e-4,
    assuming the NLL is unimodal in T on this bracket (it is for softmax
    losses). A flat or non-improving objective falls back to T = 1.
    """
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 2:
        raise ShapeError(f"expected an (N, K>=2) logit matrix, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise DegenerateError("logits contain non-finite values")
    y = _as_labels(labels, arr.shape[0], arr.shape[1])

    f = lambda x: _nll(arr, y, math.exp(x))
    lo, hi = math.log(T_MIN), math.log(T_MAX)
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > 1e-4:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    x_star = (a + b) / 2.0
    t_star = min(max(math.exp(x_star), T_MIN), T_MAX)
    nll_star = _nll(arr, y, t_star)
    nll_one = _nll(arr, y, 1.0)
    if nll_star >= nll_one - 1e-12:
        return TemperatureModel(T=1.0)
    return TemperatureModel(T=t_star)


def apply_temperature(model: TemperatureModel, logits) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ShapeError(f"expected an (N, K>=2) logit matrix, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise DegenerateError("logits contain non-finite values")
    return softmax(arr / model.T)


# --------------------------------------------------------------------------
# histogram binning (binary probabilities)


@dataclass(frozen=True)
class BinningModel:
    edges: tuple[float, ...]
    bin_rates: tuple[float, ...]

    @property
    def bins(self) -> int:
        return len(self.bin_rates)


def _bin_index(p: np.ndarray, bins: int) -> np.ndarray:
    idx = (p * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def fit_histogram_binning(probs, labels, bins: int = DEFAULT_BINS) -> BinningModel:
    """Equal-width bins; each bin's rate is its empirical positive rate.

    Empty bins inherit their midpoint so apply never hits undefined input.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 1:
        raise ShapeError(f"probs must be a non-empty vector, got {p.shape}")
    if (p < 0).any() or (p > 1).any() or not np.isfinite(p).all():
        raise ShapeError("probs must lie in [0, 1]")
    y = np.asarray(labels)
    if y.shape != p.shape:
        raise ShapeError("labels must match probs in length")
    y = y.astype(np.float64)
    if bins < 1:
        raise ShapeError("bins must be >= 1")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = _bin_index(p, bins)
    rates = []
    for b in range(bins):
        mask = idx == b
        if mask.any():
            rates.append(float(y[mask].mean()))
        else:
            rates.append(float((edges[b] + edges[b + 1]) / 2.0))
    return BinningModel(edges=tuple(edges.tolist()), bin_rates=tuple(rates))


def apply_binning(model: BinningModel, probs) -> np.ndarray:
    p = np.atleast_1d(np.asarray(probs, dtype=np.float64))
    if (p < 0).any() or (p > 1).any():
        raise ShapeError("probs must lie in [0, 1]")
    idx = _bin_index(p, model.bins)
    return np.asarray(model.bin_rates, dtype=np.float64)[idx]


# --------------------------------------------------------------------------
# calibration and coverage metrics


def ece(probs, labels, bins: int = DEFAULT_BINS) -> float:
    """Top-label expected calibration error over equal-width confidence bins."""
    arr = as_prob_matrix(probs)
    y = _as_labels(labels, arr.shape[0], arr.shape[1])
    conf = arr.max(axis=1)
    pred = arr.argmax(axis=1)
    correct = (pred == y).astype(np.float64)
    idx = _bin_index(conf, bins)
    n = arr.shape[0]
    total = 0.0
    for b in range(bins):
        mask = idx == b
        nb = int(mask.sum())
        if nb == 0:
            continue
        acc = float(correct[mask].mean())
        avg_conf = float(conf[mask].mean())
        total += (nb / n) * abs(acc - avg_conf)
    return total


# --------------------------------------------------------------------------
# split-conformal prediction sets


@dataclass(frozen=True)
class ConformalThreshold:
    t: float
    alpha: float
    n_cal: int


def _ceil_exact(x: float) -> int:
    return math.ceil(x - 1e-9)


def fit_label_threshold(cal_probs, cal_labels, alpha: float) -> ConformalThreshold:
    """Split-conformal threshold on true-class probability scores.

    With ``k = n + 1 - ceil((n+1)(1-alpha))``, the threshold is the k-th
    smallest calibration score, giving P(true class in set) >= 1 - alpha
    under exchangeability.
    """
    arr = as_prob_matrix(cal_probs)
    y = _as_labels(cal_labels, arr.shape[0], arr.shape[1])
    if not (0.0 < alpha < 1.0):
        raise AlphaError(f"alpha must lie in (0, 1), got {alpha}")
    n = arr.shape[0]
    need = _ceil_exact((n + 1) * (1.0 - alpha))
    if need > n:
        raise AlphaError(
            f"calibration set of {n} is too small for alpha={alpha} "
            f"(needs ceil((n+1)(1-alpha)) = {need} <= n)"
        )
    k = n + 1 - need
    scores = arr[np.arange(n), y]
    t = float(np.partition(scores, k - 1)[k - 1])
    return ConformalThreshold(t=t, alpha=alpha, n_cal=n)


def predict_set(thr: ConformalThreshold, probs_row) -> set[int]:
    row = np.asarray(probs_row, dtype=np.float64)
    if row.ndim != 1:
        raise ShapeError(f"probs_row must be a vector, got shape {row.shape}")
    return set(np.nonzero(row >= thr.t)[0].tolist())


def predict_sets(thr: ConformalThreshold, probs) -> list[set[int]]:
    arr = as_prob_matrix(probs)
    mask = arr >= thr.t
    return [set(np.nonzero(m)[0].tolist()) for m in mask]


def coverage(sets: list[set[int]], labels) -> float:
    y = np.asarray(labels)
    if y.ndim != 1 or len(sets) != y.shape[0]:
        raise ShapeError("sets and labels must have matching lengths")
    hit = sum(1 for s, label in zip(sets, y.tolist()) if label in s)
    return hit / len(sets)


def avg_set_size(sets: list[set[int]]) -> float:
    if not sets:
        raise ShapeError("avg_set_size of zero sets is undefined")
    return sum(len(s) for s in sets) / len(sets)


# --------------------------------------------------------------------------
# CSV interchange used by the command line


def read_prob_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read a ``p_0..p_{K-1},label`` CSV into (matrix, labels)."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None:
                raise ShapeError(f"{path}: empty file")
            k = len(header) - 1
            expected = [f"p_{i}" for i in range(k)] + ["label"]
            if header != expected:
                raise ShapeError(
                    f"{path}: header must be p_0..p_{{K-1}},label, got "
                    f"{','.join(header)!r}"
                )
            rows = []
            labels = []
            for row in reader:
                rows.append([float(x) for x in row[:k]])
                labels.append(int(row[k]))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ShapeError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64), np.asarray(labels, dtype=np.int64)
