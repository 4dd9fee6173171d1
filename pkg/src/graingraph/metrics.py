"""Quantities of interest and evaluation metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError


class MetricWarning(UserWarning):
    pass


@dataclass
class QoIReport:
    volumes: dict  # grain id -> um^3
    sizes: dict  # grain id -> equivalent diameter, um
    heights: list  # z_l, um
    eliminated: list  # cumulative count per layer
    misorientation: list  # degrees per layer
    size_cdf: tuple = field(default=((), ()))  # (sorted sizes, F)

    def to_dict(self) -> dict:
        return {
            "volumes": {str(k): v for k, v in self.volumes.items()},
            "sizes": {str(k): v for k, v in self.sizes.items()},
            "heights": list(self.heights),
            "eliminated": list(self.eliminated),
            "misorientation": list(self.misorientation),
            "size_cdf": {"x": list(self.size_cdf[0]), "F": list(self.size_cdf[1])},
        }


def equivalent_diameter(volume):
    """Diameter of the sphere with the given volume."""
    return np.cbrt(6.0 * np.asarray(volume, dtype=float) / np.pi)


def empirical_cdf(sample) -> tuple[np.ndarray, np.ndarray]:
    x = np.sort(np.asarray(sample, dtype=float))
    return x, np.arange(1, len(x) + 1) / max(len(x), 1)


def qoi_from_trajectory(traj, all_grains: bool = False) -> QoIReport:
    """Volumes, sizes, eliminated counts and misorientation of a rollout.

    A grain's volume is ``dz * sum of its areas`` over the layers it lived
    through, plus its excess volume if it survives to the last layer. The
    size distribution covers final-layer grains unless ``all_grains``.
    """
    graphs = traj.graphs
    if len(graphs) < 2:
        raise InputError(f"need a trajectory with at least 2 layers, got {len(graphs)}")
    d = graphs[0].domain
    a0 = d.l0x * d.l0y
    v0 = a0 * d.l0z
    dz = traj.dz
    column: dict = {}
    theta: dict = {}
    mis = []
    for g in graphs:
        num = den = 0.0
        for gid, gr in g.grains.items():
            column[gid] = column.get(gid, 0.0) + dz * gr.area * a0
            theta[gid] = gr.theta_z
            vol = column[gid] + gr.excess_volume * v0
            num += vol * gr.theta_z
            den += vol
        mis.append(math.degrees(num / den) if den > 0 else 0.0)
    last = graphs[-1]
    volumes = {gid: column[gid] + (last.grains[gid].excess_volume * v0 if gid in last.grains else 0.0) for gid in sorted(column)}
    sizes = {gid: float(equivalent_diameter(v)) for gid, v in volumes.items()}
    pool = sizes.values() if all_grains else [sizes[g] for g in sorted(last.grains)]
    x, f = empirical_cdf(list(pool))
    eliminated = list(traj.eliminated_counts())
    return QoIReport(volumes, sizes, [g.z for g in graphs], eliminated, mis, (x.tolist(), f.tolist()))


# -- image and distribution comparisons ----------------------------------------


def misclassification_rate(a, b) -> float:
    """Fraction of pixels whose grain index differs."""
    da = getattr(a, "data", a)
    db = getattr(b, "data", b)
    da, db = np.asarray(da), np.asarray(db)
    if da.shape != db.shape:
        raise InputError(f"image shapes differ: {da.shape} vs {db.shape}")
    if da.size == 0:
        raise InputError("empty images")
    return float(np.count_nonzero(da != db) / da.size)


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance between empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise InputError("KS needs two non-empty samples")
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / len(a)
    fb = np.searchsorted(b, pts, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


def ks_critical(alpha: float, m: int, n: int) -> float:
    """Critical KS value for sample sizes m and n at level alpha."""
    if not 0 < alpha < 2 or m < 1 or n < 1:
        raise InputError("need 0 < alpha < 2 and positive sample sizes")
    return math.sqrt(-math.log(alpha / 2) * (1 + n / m) / (2 * n))


# -- regression and classification -------------------------------------------------


def rrmse(truth, pred) -> float:
    """Relative root-mean-square error in percent."""
    x = np.asarray(truth, dtype=float)
    y = np.asarray(pred, dtype=float)
    if x.shape != y.shape:
        raise InputError(f"shape mismatch {x.shape} vs {y.shape}")
    den = float(np.sum(x * x))
    if den == 0:
        raise NumericError("RRMSE undefined for an all-zero truth")
    return 100.0 * math.sqrt(float(np.sum((x - y) ** 2)) / den)


def _binary(labels, scores):
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=float)
    if y.shape != s.shape:
        raise InputError(f"shape mismatch {y.shape} vs {s.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    y = y.astype(bool)
    if not y.any():
        raise InputError("no positive labels: precision and recall are degenerate")
    return y, s


def pr_curve(labels, scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision and recall at every distinct score threshold.

    An item counts as positive when its score is at least the threshold.
    Returns (precision, recall, thresholds), starting from recall 0 with
    precision 1 and ending at the lowest threshold.
    """
    y, s = _binary(labels, scores)
    o = np.argsort(-s, kind="stable")
    s, y = s[o], y[o]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = np.r_[1.0, tp / (tp + fp)]
    recall = np.r_[0.0, tp / y.sum()]
    return precision, recall, np.r_[np.inf, s[last]]


def pr_auc(labels, scores) -> float:
    precision, recall, _ = pr_curve(labels, scores)
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2))


def f1_at(labels, scores, threshold: float) -> float:
    y, s = _binary(labels, scores)
    hit = s >= threshold
    tp = np.count_nonzero(hit & y)
    fp = np.count_nonzero(hit & ~y)
    fn = np.count_nonzero(~hit & y)
    if tp == 0:
        return 0.0
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    return 2 * p * r / (p + r)


# -- losses ----------------------------------------------------------------------------


def _masked_mean(rows: np.ndarray, mask) -> float | None:
    if mask is None:
        mask = np.ones(len(rows), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(rows),):
        raise InputError("mask length does not match the data")
    if not mask.any():
        return None
    return float(rows[mask].mean())


def l2_loss(truth: dict, pred: dict, junction_mask=None, grain_mask=None) -> float:
    """Regression loss: mean squared junction displacement error plus mean
    squared grain (ds, v) error, each over unmasked vertices.

    ``truth`` and ``pred`` map ``dx, dy, ds, v`` to arrays.
    """
    arr = {k: (np.asarray(truth[k], float), np.asarray(pred[k], float)) for k in ("dx", "dy", "ds", "v")}
    for k, (a, b) in arr.items():
        if a.shape != b.shape:
            raise InputError(f"{k}: shape mismatch {a.shape} vs {b.shape}")
    jr = (arr["dx"][0] - arr["dx"][1]) ** 2 + (arr["dy"][0] - arr["dy"][1]) ** 2
    gr = (arr["ds"][0] - arr["ds"][1]) ** 2 + (arr["v"][0] - arr["v"][1]) ** 2
    parts = [_masked_mean(jr, junction_mask), _masked_mean(gr, grain_mask)]
    if all(p is None for p in parts):
        warnings.warn("every entry is masked; loss defined as 0", MetricWarning, stacklevel=2)
        return 0.0
    return float(sum(p for p in parts if p is not None))


def bce_loss(labels, p, mask=None) -> float:
    """Mean binary cross-entropy over unmasked edges."""
    y = np.asarray(labels, dtype=float)
    q = np.asarray(p, dtype=float)
    if y.shape != q.shape:
        raise InputError(f"shape mismatch {y.shape} vs {q.shape}")
    lo, hi = 1e-12, 1 - 1e-12
    clipped = (q < lo) | (q > hi)
    if clipped.any():
        warnings.warn(f"{int(clipped.sum())} probabilities clamped to [1e-12, 1-1e-12]", MetricWarning, stacklevel=2)
    q = np.clip(q, lo, hi)
    terms = -(y * np.log(q) + (1 - y) * np.log1p(-q))
    out = _masked_mean(terms, mask)
    if out is None:
        warnings.warn("every entry is masked; loss defined as 0", MetricWarning, stacklevel=2)
        return 0.0
    return out
