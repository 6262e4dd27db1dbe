"""Bias statistics across noise realisations and threshold classification of K1 maps."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

# K1 thresholds separating background, defect and healthy tissue
NOISE_UPPER = 0.3
ABNORMAL_UPPER = 0.6


class Region(enum.IntEnum):
    NOISE = 0
    ABNORMAL = 1
    NORMAL = 2


def voxel_bias(estimate, truth, noise_region):
    """Relative bias ``(estimate - truth) / truth``; the denominator is 1 where ``noise_region`` is set.

    Works elementwise on scalars or arrays.
    """
    est = np.asarray(estimate, dtype=float)
    tr = np.asarray(truth, dtype=float)
    noise = np.asarray(noise_region, dtype=bool)
    if not np.all(np.isfinite(tr)):
        raise InvalidArgumentError("truth values must be finite")
    denom = np.where(noise, 1.0, tr)
    if np.any(denom == 0):
        raise InvalidArgumentError("zero truth outside the noise region")
    out = (est - tr) / denom
    return float(out) if out.ndim == 0 else out


def lower_median(values) -> float:
    """Median taking the lower of the two middle values for even counts."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        return float("nan")
    return float(v[(v.size - 1) // 2])


@dataclass
class BiasReport:
    n_realizations: int
    mean: np.ndarray  # b_bar per voxel
    mean_sq: np.ndarray  # mean of squared biases per voxel
    std: np.ndarray | None  # sample std (N-1 divisor); None when N == 1
    roi_labels: np.ndarray | None = None
    roi_medians: dict = field(default_factory=dict)

    def identity_residual(self) -> float:
        """Largest |mean_sq - (s^2 (N-1)/N + b_bar^2)| over voxels."""
        if self.std is None:
            return float(np.max(np.abs(self.mean_sq - self.mean ** 2)))
        N = self.n_realizations
        rhs = self.std ** 2 * (N - 1) / N + self.mean ** 2
        return float(np.max(np.abs(self.mean_sq - rhs)))


def aggregate_bias(biases, roi_labels=None) -> BiasReport:
    """Per-voxel aggregates over realisations (rows) and lower medians per ROI.

    ``roi_labels`` assigns each voxel (column) to a reporting region; medians are
    reported for ``mean``, ``mean_sq`` and ``std`` keyed ``(roi, statistic)``
    plus ``("all", statistic)`` over every voxel.
    """
    b = np.asarray(biases, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    if b.ndim != 2 or b.shape[0] < 1:
        raise InvalidArgumentError("biases must be (N realisations, voxels) with N >= 1")
    N = b.shape[0]
    mean = b.mean(axis=0)
    mean_sq = np.mean(b * b, axis=0)
    std = b.std(axis=0, ddof=1) if N >= 2 else None
    rep = BiasReport(N, mean, mean_sq, std)
    stats = {"mean": mean, "mean_sq": mean_sq}
    if std is not None:
        stats["std"] = std
    for name, vals in stats.items():
        rep.roi_medians[("all", name)] = lower_median(vals)
    if roi_labels is not None:
        roi = np.asarray(roi_labels)
        if roi.shape != mean.shape:
            raise InvalidArgumentError("ROI labels must have one entry per voxel")
        rep.roi_labels = roi
        for r in np.unique(roi):
            sel = roi == r
            for name, vals in stats.items():
                rep.roi_medians[(int(r), name)] = lower_median(vals[sel])
    return rep


def classify_k1(k1_map) -> np.ndarray:
    """NOISE below 0.3, ABNORMAL in [0.3, 0.6), NORMAL from 0.6 up."""
    k1 = np.asarray(k1_map, dtype=float)
    if not np.all(np.isfinite(k1)):
        raise InvalidArgumentError("K1 map contains non-finite values")
    out = np.full(k1.shape, int(Region.NOISE), dtype=np.int64)
    out[k1 >= NOISE_UPPER] = int(Region.ABNORMAL)
    out[k1 >= ABNORMAL_UPPER] = int(Region.NORMAL)
    return out


@dataclass
class Confusion:
    matrix: np.ndarray  # [truth, predicted] counts
    rates: np.ndarray  # per truth class, fraction classified correctly (nan if class absent)


def misclassification_table(labels, truth_labels) -> Confusion:
    pred = np.asarray(labels).ravel()
    tr = np.asarray(truth_labels).ravel()
    if pred.shape != tr.shape:
        raise InvalidArgumentError("label maps differ in size")
    k = len(Region)
    if pred.size and (pred.min() < 0 or pred.max() >= k or tr.min() < 0 or tr.max() >= k):
        raise InvalidArgumentError("labels must be NOISE/ABNORMAL/NORMAL codes 0..2")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (tr, pred), 1)
    totals = m.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = np.where(totals > 0, np.diag(m) / np.maximum(totals, 1), np.nan)
    return Confusion(m, rates)


def truth_classes(truth_k1, noise_mask) -> np.ndarray:
    """Reference classes from phantom truth: noise region, else by the K1 thresholds."""
    cls = classify_k1(np.where(noise_mask, 0.0, truth_k1))
    cls[np.asarray(noise_mask, dtype=bool)] = int(Region.NOISE)
    return cls


def write_voxel_csv(path, report: BiasReport, nx: int, param: str = "K1"):
    with open(path, "w", newline="\n") as fh:
        fh.write("x,y,param,roi,mean_bias,mean_sq_bias,std_bias\n")
        for i in range(report.mean.size):
            roi = "" if report.roi_labels is None else int(report.roi_labels[i])
            s = "" if report.std is None else repr(float(report.std[i]))
            fh.write(f"{i % nx},{i // nx},{param},{roi},{float(report.mean[i])!r},"
                     f"{float(report.mean_sq[i])!r},{s}\n")


def write_roi_csv(path, reports: dict):
    """``reports`` maps parameter name to its BiasReport."""
    with open(path, "w", newline="\n") as fh:
        fh.write("param,roi,statistic,median\n")
        for param, rep in reports.items():
            for (roi, stat), val in sorted(rep.roi_medians.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
                fh.write(f"{param},{roi},{stat},{val!r}\n")


def text_summary(reports: dict, confusion: Confusion | None = None) -> str:
    lines = []
    for param, rep in reports.items():
        lines.append(f"{param}: N={rep.n_realizations}")
        for (roi, stat), val in sorted(rep.roi_medians.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            lines.append(f"  roi={roi:<4} median {stat:<8} {val:.6g}")
    if confusion is not None:
        names = [r.name for r in Region]
        lines.append("classification (rows truth, columns predicted): " + " ".join(names))
        for r, row in zip(names, confusion.matrix):
            lines.append(f"  {r:<9} " + " ".join(f"{int(c):6d}" for c in row))
        lines.append("  correct rate: " + ", ".join(f"{n}={v:.4f}" for n, v in zip(names, confusion.rates)))
    return "\n".join(lines) + "\n"
