"""Segmentation and severity-agreement metrics plus their file emitters.

Binary masks are numpy bool arrays; counts are exact integers so every
metric here is oracle-checkable. Rates live in [0,1]; the report writer
scales to percent. Surface areas count exposed voxel faces (a face
between an in-mask voxel and an out-of-mask or out-of-bounds voxel),
weighted by the product of the two spacings orthogonal to the face.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .phantom import SUBTYPE_CONSOLIDATION, SUBTYPE_GGO, SUBTYPE_MIXED, score_from_fraction

NUM_SCORES = 6
SUBTYPE_NAMES = {SUBTYPE_GGO: "ggo", SUBTYPE_CONSOLIDATION: "consolidation", SUBTYPE_MIXED: "mixed"}

METRICS_HEADER = [
    "case_id", "dsc", "apd", "svrd", "fdr", "fdr_empty_pred",
    "tpr_ggo", "tpr_consolidation", "tpr_mixed",
]
SUMMARY_HEADER = ["metric", "mean", "sd", "n"]
KAPPA_HEADER = ["kappa", "ci_low", "ci_high", "n"]


def dsc(pred: np.ndarray, ref: np.ndarray) -> float:
    """Dice overlap 2|X∩Y|/(|X|+|Y|); two empty masks count as agreement."""
    x, y = pred.astype(bool), ref.astype(bool)
    denom = int(x.sum()) + int(y.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((x & y).sum()) / denom


def apd(pred: np.ndarray, ref: np.ndarray, lung_mask: np.ndarray) -> float:
    """Absolute lesion-percentage difference relative to the lung volume."""
    lung = int(lung_mask.astype(bool).sum())
    if lung == 0:
        raise ValueError("apd: empty lung mask")
    return abs(int(pred.astype(bool).sum()) - int(ref.astype(bool).sum())) / lung


def surface_area(mask: np.ndarray, spacing: tuple[float, float, float]) -> float:
    """Total exposed-face area in mm² of a binary mask."""
    m = mask.astype(bool)
    if not m.any():
        raise ValueError("surface_area: empty mask")
    total = 0.0
    for axis in range(3):
        face = spacing[(axis + 1) % 3] * spacing[(axis + 2) % 3]
        padded = np.pad(m, [(1, 1) if a == axis else (0, 0) for a in range(3)])
        diff = padded.astype(np.int8)
        exposed = np.abs(np.diff(diff, axis=axis)).sum()
        total += float(exposed) * face
    return total


def svr(mask: np.ndarray, spacing: tuple[float, float, float]) -> float:
    """Surface-to-volume ratio in mm⁻¹."""
    vol = int(mask.astype(bool).sum()) * float(np.prod(spacing))
    if vol == 0:
        raise ValueError("svr: empty mask")
    return surface_area(mask, spacing) / vol


def svrd(pred: np.ndarray, ref: np.ndarray, spacing: tuple[float, float, float]) -> float:
    """Absolute surface-to-volume ratio difference (shape compactness gap)."""
    return abs(svr(pred, spacing) - svr(ref, spacing))


def fdr(pred: np.ndarray, ref: np.ndarray) -> tuple[float, bool]:
    """False-discovery rate; an empty prediction scores 0.0 with a flag set."""
    x, y = pred.astype(bool), ref.astype(bool)
    n = int(x.sum())
    if n == 0:
        return 0.0, True
    return 1.0 - int((x & y).sum()) / n, False


def tpr_subtype(pred: np.ndarray, lesion_map: np.ndarray, subtype: int) -> float | None:
    """Recall over reference voxels of one subtype; None when absent."""
    sel = lesion_map == subtype
    n = int(sel.sum())
    if n == 0:
        return None
    return int((pred.astype(bool) & sel).sum()) / n


# ---------------------------------------------------------------------------
# severity agreement

@dataclass
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_SCORES, NUM_SCORES), dtype=np.int64))

    def add(self, predicted: int, target: int) -> None:
        self.counts[predicted, target] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.trace(self.counts)) / self.total


def severity_scores(pred_lesion: np.ndarray, lobe_map: np.ndarray) -> dict[int, int]:
    """Predicted severity per lobe from the predicted lesion fraction."""
    out = {}
    for lid in sorted(int(v) for v in np.unique(lobe_map) if v != 0):
        sel = lobe_map == lid
        frac = int((pred_lesion.astype(bool) & sel).sum()) / int(sel.sum())
        out[lid] = score_from_fraction(frac)
    return out


def linear_weights(k: int = NUM_SCORES) -> np.ndarray:
    idx = np.arange(k)
    return 1.0 - np.abs(idx[:, None] - idx[None, :]) / (k - 1)


def linear_weighted_kappa(counts: np.ndarray) -> float:
    """Chance-corrected ordinal agreement with linear distance weights."""
    cm = np.asarray(counts, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("kappa: empty confusion matrix")
    p = cm / total
    w = linear_weights(cm.shape[0])
    row = p.sum(axis=1)
    col = p.sum(axis=0)
    p_obs = float((w * p).sum())
    p_exp = float((w * np.outer(row, col)).sum())
    if abs(1.0 - p_exp) < 1e-15:
        raise ValueError("kappa undefined: degenerate marginals")
    return (p_obs - p_exp) / (1.0 - p_exp)


def kappa_bootstrap_ci(
    pairs: list[tuple[int, int]],
    num_resamples: int = 2000,
    seed: int = 0,
) -> tuple[float, float, float]:
    """Kappa point estimate with a percentile bootstrap 95% CI over lobes.

    Resamples whose kappa is undefined (degenerate marginals) are dropped
    from the percentile computation.
    """
    if not pairs:
        raise ValueError("kappa: no scored lobes")
    counts = np.zeros((NUM_SCORES, NUM_SCORES), dtype=np.int64)
    for pr, tg in pairs:
        counts[pr, tg] += 1
    point = linear_weighted_kappa(counts)
    rng = np.random.default_rng(seed)
    arr = np.asarray(pairs, dtype=np.int64)
    n = len(arr)
    samples = []
    for _ in range(num_resamples):
        take = arr[rng.integers(0, n, size=n)]
        cm = np.zeros((NUM_SCORES, NUM_SCORES), dtype=np.int64)
        np.add.at(cm, (take[:, 0], take[:, 1]), 1)
        try:
            samples.append(linear_weighted_kappa(cm))
        except ValueError:
            continue
    if not samples:
        raise ValueError("kappa CI: all bootstrap resamples degenerate")
    lo, hi = np.percentile(np.asarray(samples), [2.5, 97.5])
    return point, float(lo), float(hi)


# ---------------------------------------------------------------------------
# per-case evaluation + file emitters

@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    apd: float
    svrd: float | None           # None when either mask is empty
    fdr: float
    fdr_empty_pred: bool
    tpr: dict[str, float | None]


def evaluate_case(
    case_id: str,
    pred_lesion: np.ndarray,
    lesion_map: np.ndarray,
    lobe_map: np.ndarray,
    spacing: tuple[float, float, float],
) -> CaseMetrics:
    ref = lesion_map > 0
    pred = pred_lesion.astype(bool)
    svrd_val = None
    if pred.any() and ref.any():
        svrd_val = svrd(pred, ref, spacing)
    fdr_val, fdr_flag = fdr(pred, ref)
    return CaseMetrics(
        case_id=case_id,
        dsc=dsc(pred, ref),
        apd=apd(pred, ref, lobe_map > 0),
        svrd=svrd_val,
        fdr=fdr_val,
        fdr_empty_pred=fdr_flag,
        tpr={name: tpr_subtype(pred, lesion_map, st) for st, name in SUBTYPE_NAMES.items()},
    )


def write_metrics_csv(rows: list[CaseMetrics], out_dir: str | Path) -> Path:
    path = Path(out_dir) / "metrics.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([
                r.case_id, repr(r.dsc), repr(r.apd),
                "" if r.svrd is None else repr(r.svrd),
                repr(r.fdr), int(r.fdr_empty_pred),
                *( "" if r.tpr[k] is None else repr(r.tpr[k])
                   for k in ("ggo", "consolidation", "mixed")),
            ])
    return path


def _mean_sd(values: list[float]) -> tuple[float, float, int]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan"), 0
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd, int(arr.size)


def write_summary_csv(rows: list[CaseMetrics], accuracy: float | None, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "summary.csv"
    cols: dict[str, list[float]] = {
        "dsc": [r.dsc for r in rows],
        "apd": [r.apd for r in rows],
        "svrd": [r.svrd for r in rows if r.svrd is not None],
        "fdr": [r.fdr for r in rows],
        "tpr_ggo": [r.tpr["ggo"] for r in rows if r.tpr["ggo"] is not None],
        "tpr_consolidation": [r.tpr["consolidation"] for r in rows if r.tpr["consolidation"] is not None],
        "tpr_mixed": [r.tpr["mixed"] for r in rows if r.tpr["mixed"] is not None],
    }
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_HEADER)
        for name, vals in cols.items():
            mean, sd, n = _mean_sd(vals)
            w.writerow([name, repr(mean), repr(sd), n])
        if accuracy is not None:
            w.writerow(["severity_acc", repr(accuracy), "", ""])
    return path


def write_kappa_csv(kappa: float, ci_low: float, ci_high: float, n: int, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "kappa.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(KAPPA_HEADER)
        w.writerow([repr(kappa), repr(ci_low), repr(ci_high), n])
    return path


def write_report(
    method: str,
    rows: list[CaseMetrics],
    accuracy: float | None,
    kappa: tuple[float, float, float] | None,
    confusion: ConfusionMatrix | None,
    out_dir: str | Path,
) -> Path:
    """Plain-text table: rates ×100, mean ± sd over cases."""
    path = Path(out_dir) / "report.txt"

    def cell(vals):
        mean, sd, n = _mean_sd(vals)
        if n == 0:
            return "      --      "
        return f"{100*mean:6.2f} ± {100*sd:5.2f}"

    lines = []
    header = (
        f"{'method':<10} {'DSC[%]':>14} {'APD[%]':>14} {'SVRD[%]':>14} {'FDR[%]':>14} "
        f"{'TPR-GGO[%]':>14} {'TPR-CONS[%]':>14} {'TPR-MIX[%]':>14} {'ACC[%]':>8}"
    )
    lines.append(header)
    lines.append("-" * len(header))
    lines.append(
        f"{method:<10} "
        f"{cell([r.dsc for r in rows]):>14} "
        f"{cell([r.apd for r in rows]):>14} "
        f"{cell([r.svrd for r in rows if r.svrd is not None]):>14} "
        f"{cell([r.fdr for r in rows]):>14} "
        f"{cell([r.tpr['ggo'] for r in rows if r.tpr['ggo'] is not None]):>14} "
        f"{cell([r.tpr['consolidation'] for r in rows if r.tpr['consolidation'] is not None]):>14} "
        f"{cell([r.tpr['mixed'] for r in rows if r.tpr['mixed'] is not None]):>14} "
        + (f"{100*accuracy:8.2f}" if accuracy is not None else "      --")
    )
    if kappa is not None:
        k, lo, hi = kappa
        lines.append("")
        lines.append(f"linear weighted kappa x100: {100*k:.2f}  (95% CI {100*lo:.2f} .. {100*hi:.2f})")
    if confusion is not None:
        lines.append("")
        lines.append("confusion (rows=predicted, cols=target):")
        for i in range(NUM_SCORES):
            lines.append("  " + " ".join(f"{int(v):5d}" for v in confusion.counts[i]))
    text = "\n".join(lines) + "\n"
    with open(path, "w") as f:
        f.write(text)
    return path
