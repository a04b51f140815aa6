"""ROC/AUC, background rejection at fixed signal efficiency, and run aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise MetricError("non-finite score")
    if not np.all((labels == 0) | (labels == 1)):
        raise MetricError("labels must be 0 or 1")
    sig, bkg = scores[labels == 1], scores[labels == 0]
    if sig.size == 0 or bkg.size == 0:
        raise MetricError("both classes must be present")
    return scores, labels, sig, bkg


def roc_auc(scores, labels) -> float:
    """P(random signal outscores random background), ties counted one half."""
    scores, labels, sig, bkg = _split(scores, labels)
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - sig.size * (sig.size + 1) / 2.0
    return float(u / (sig.size * bkg.size))


def roc_points(scores, labels):
    """(threshold, TPR, FPR) for every cut ``score >= threshold`` at a distinct score."""
    scores, labels, sig, bkg = _split(scores, labels)
    thr = np.unique(scores)[::-1]
    sig_s, bkg_s = np.sort(sig), np.sort(bkg)
    n_sig = sig.size - np.searchsorted(sig_s, thr, side="left")
    n_bkg = bkg.size - np.searchsorted(bkg_s, thr, side="left")
    return thr, n_sig / sig.size, n_bkg / bkg.size


def rejection_at_efficiency(scores, labels, eff: float) -> float:
    """1 / FPR at the tightest cut whose signal efficiency reaches ``eff``.

    Returns ``inf`` when no background passes that cut (the finite lower bound
    is then the number of background samples).
    """
    if not 0.0 < eff < 1.0:
        raise MetricError("efficiency must lie strictly between 0 and 1")
    thr, tpr, fpr = roc_points(scores, labels)
    k = int(np.argmax(tpr >= eff))     # tpr is non-decreasing as the cut loosens
    return float(np.inf) if fpr[k] == 0 else float(1.0 / fpr[k])


def median_iqr(values) -> tuple[float, float]:
    """Median and Q3 - Q1 with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise MetricError("median of empty input")
    q1, med, q3 = (_quantile(np.sort(v), p) for p in (0.25, 0.5, 0.75))
    return med, (0.0 if q3 == q1 else q3 - q1)


def _quantile(v: np.ndarray, p: float) -> float:
    """Linear interpolation between order statistics that keeps infinite rejections finite-safe."""
    h = (v.size - 1) * p
    lo, hi = int(np.floor(h)), int(np.ceil(h))
    if lo == hi or v[lo] == v[hi]:
        return float(v[lo])
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


@dataclass
class RocSummary:
    auc: float
    rejections: dict[float, float]
    curve: np.ndarray = field(repr=False)   # columns: efficiency, rejection

    def to_dict(self) -> dict:
        return {"auc": self.auc,
                **{f"R{int(round(100 * e))}": r for e, r in self.rejections.items()}}


def roc_summary(scores, labels, efficiencies=(0.7, 0.85)) -> RocSummary:
    thr, tpr, fpr = roc_points(scores, labels)
    keep = tpr > 0
    with np.errstate(divide="ignore"):
        rej = np.where(fpr[keep] > 0, 1.0 / np.where(fpr[keep] > 0, fpr[keep], 1.0), np.inf)
    curve = np.column_stack([tpr[keep], rej])
    return RocSummary(roc_auc(scores, labels),
                      {e: rejection_at_efficiency(scores, labels, e) for e in efficiencies}, curve)


def write_roc_curve(path, summary: RocSummary) -> None:
    """Two whitespace-separated columns: signal efficiency, background rejection."""
    with open(path, "w") as fh:
        fh.write("# efficiency rejection\n")
        for e, r in summary.curve:
            fh.write(f"{e:.10g} {r:.10g}\n")
