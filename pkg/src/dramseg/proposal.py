"""Candidate lesion proposals from intensity and tube-likeness.

Per lobe, a 256-bin Otsu threshold separates aerated parenchyma from
denser tissue; voxels at or above the threshold that the multi-scale
Hessian vesselness filter does not explain as vessels become lesion
candidates. The candidate fraction p* per lobe later calibrates the
severity intervals used as regression targets.

The vesselness filter follows the classic eigenvalue recipe for bright
tubes on a dark background: per scale, spacing-aware Gaussian second
derivatives (in mm^-2) scale-normalized by s^2, eigenvalues sorted by
magnitude, and a three-factor response gated to lambda_2 <= 0 and
lambda_3 <= 0, maximized over scales.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dvol import Volume, read_dvol, write_dvol
from .phantom import PhantomCase

OTSU_BINS = 256


@dataclass
class VesselnessConfig:
    scales_mm: tuple[float, ...] = (0.8, 1.0, 1.5, 2.0, 4.0)
    alpha: float = 0.5
    beta_blob: float = 0.5
    gamma: float = 15.0
    response_threshold: float = 0.05

    def validate(self) -> None:
        if len(self.scales_mm) == 0 or any(s <= 0 for s in self.scales_mm):
            raise ValueError("scales_mm must be positive")
        if min(self.alpha, self.beta_blob, self.gamma) <= 0:
            raise ValueError("alpha, beta_blob, gamma must be positive")
        if not 0.0 < self.response_threshold < 1.0:
            raise ValueError("response_threshold must be in (0, 1)")


@dataclass
class CandidateResult:
    candidate_map: np.ndarray                 # bool (D, W, H)
    vessel_map: np.ndarray                    # bool (D, W, H), filter detections
    p_star: dict[int, float] = field(default_factory=dict)       # lobe_id -> fraction
    thresholds: dict[int, float] = field(default_factory=dict)   # lobe_id -> Otsu HU, nan if degenerate
    degenerate: set[int] = field(default_factory=set)            # lobes that could not be thresholded


def otsu_threshold(values: np.ndarray, num_bins: int = OTSU_BINS) -> float:
    """Exhaustive histogram Otsu threshold of a value sample.

    Candidate thresholds are the num_bins lower bin edges of a histogram
    spanning [min, max]; the returned edge maximizes the between-class
    variance of the binned data (ties resolve to the lowest edge).
    Values >= the threshold belong to the upper class. Constant input
    has no split and raises.
    """
    if num_bins < 2:
        raise ValueError(f"otsu_threshold: need at least 2 bins, got {num_bins}")
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("otsu_threshold: empty input")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        raise ValueError("otsu_threshold: degenerate (constant) input")
    hist, edges = np.histogram(v, bins=num_bins, range=(lo, hi))
    hist = hist.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.concatenate([[0.0], np.cumsum(hist)])[:-1]          # mass below edge k
    m0 = np.concatenate([[0.0], np.cumsum(hist * centers)])[:-1]
    total, total_m = hist.sum(), float((hist * centers).sum())
    w1 = total - w0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = np.where(w0 > 0, m0 / w0, 0.0)
        mu1 = np.where(w1 > 0, (total_m - m0) / w1, 0.0)
    sigma_b = w0 * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(sigma_b))  # first maximum = lowest edge on ties
    return float(edges[k])


def _hessian_eigenvalues(image: np.ndarray, sigma_vox, spacing, scale: float) -> np.ndarray:
    """Signed Hessian eigenvalues sorted by |.| ascending, shape (*vol, 3)."""
    axes_pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    h = {}
    for a, b in axes_pairs:
        order = [0, 0, 0]
        order[a] += 1
        order[b] += 1
        d = ndimage.gaussian_filter(image, sigma=sigma_vox, order=order)
        h[(a, b)] = d / (spacing[a] * spacing[b]) * scale ** 2
    mat = np.empty(image.shape + (3, 3), dtype=np.float32)
    for a in range(3):
        for b in range(3):
            mat[..., a, b] = h[(min(a, b), max(a, b))]
    eig = np.linalg.eigvalsh(mat.reshape(-1, 3, 3))
    order = np.argsort(np.abs(eig), axis=1)
    eig = np.take_along_axis(eig, order, axis=1)
    return eig.reshape(image.shape + (3,))


def hessian_vesselness(image: np.ndarray, spacing: tuple[float, float, float], config: VesselnessConfig | None = None) -> np.ndarray:
    """Multi-scale tube-likeness in [0, 1] for bright curvilinear structures."""
    config = config or VesselnessConfig()
    config.validate()
    img = np.asarray(image, dtype=np.float64)
    # discrete derivative kernels at sub-voxel sigma do not annihilate a DC
    # level exactly; centering keeps the response shift-invariant and makes
    # a constant image respond identically zero
    img = img - img.mean()
    eps = 1e-10
    out = np.zeros(img.shape, dtype=np.float32)
    for s in config.scales_mm:
        sigma_vox = [s / sp for sp in spacing]
        eig = _hessian_eigenvalues(img, sigma_vox, spacing, s)
        l1, l2, l3 = eig[..., 0], eig[..., 1], eig[..., 2]
        a1, a2, a3 = np.abs(l1), np.abs(l2), np.abs(l3)
        ra2 = (a2 / np.maximum(a3, eps)) ** 2
        rb2 = a1 ** 2 / np.maximum(a2 * a3, eps)
        s2 = l1 ** 2 + l2 ** 2 + l3 ** 2
        resp = (
            (1.0 - np.exp(-ra2 / (2.0 * config.alpha ** 2)))
            * np.exp(-rb2 / (2.0 * config.beta_blob ** 2))
            * (1.0 - np.exp(-s2 / (2.0 * config.gamma ** 2)))
        )
        resp[(l2 > 0) | (l3 > 0)] = 0.0
        np.maximum(out, resp.astype(np.float32), out=out)
    return out


def estimate_fraction(candidate_map: np.ndarray, lobe_mask: np.ndarray) -> float:
    """Fraction of a lobe covered by candidates."""
    denom = int(np.count_nonzero(lobe_mask))
    if denom == 0:
        raise ValueError("empty lobe mask")
    return float(np.count_nonzero(candidate_map & lobe_mask)) / float(denom)


def propose(image: Volume, lobe_map: Volume, config: VesselnessConfig | None = None) -> CandidateResult:
    """Per-lobe candidate extraction: Otsu-dense voxels minus detected vessels.

    A lobe whose intensities are constant cannot be thresholded; it gets
    no candidates, p* = 0, and a degenerate flag instead of an error.
    """
    config = config or VesselnessConfig()
    img = image.data.astype(np.float64)
    lobes = lobe_map.data
    lung = lobes > 0
    vesselness = hessian_vesselness(img, image.spacing, config)
    vessel_mask = (vesselness > config.response_threshold) & lung
    result = CandidateResult(
        candidate_map=np.zeros(img.shape, dtype=bool), vessel_map=vessel_mask,
    )
    for lid in sorted(int(v) for v in np.unique(lobes) if v != 0):
        sel = lobes == lid
        vals = img[sel]
        if float(vals.min()) == float(vals.max()):
            result.p_star[lid] = 0.0
            result.thresholds[lid] = float("nan")
            result.degenerate.add(lid)
            continue
        thr = otsu_threshold(vals)
        cand = sel & (img >= thr) & ~vessel_mask
        result.candidate_map |= cand
        result.p_star[lid] = estimate_fraction(cand, sel)
        result.thresholds[lid] = thr
    return result


# ---------------------------------------------------------------------------
# proposal artifacts on disk

PROPOSAL_HEADER = ["case_id", "lobe_id", "p_star", "otsu_threshold"]


def write_proposal(result: CandidateResult, data_dir: str | Path, case_id: str, spacing) -> None:
    case_dir = Path(data_dir) / "cases" / case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    write_dvol(case_dir / "candidates.dvol", Volume(result.candidate_map.astype(np.uint8), spacing))
    write_dvol(case_dir / "vessels_detected.dvol", Volume(result.vessel_map.astype(np.uint8), spacing))


def read_proposal(data_dir: str | Path, case_id: str) -> CandidateResult:
    case_dir = Path(data_dir) / "cases" / case_id
    cand = read_dvol(case_dir / "candidates.dvol")
    ves = read_dvol(case_dir / "vessels_detected.dvol")
    result = CandidateResult(candidate_map=cand.data.astype(bool), vessel_map=ves.data.astype(bool))
    all_props = read_proposals_csv(Path(data_dir))
    for (cid, lid), (p_star, thr) in all_props.items():
        if cid == case_id:
            result.p_star[lid] = p_star
            result.thresholds[lid] = thr
            if np.isnan(thr):
                result.degenerate.add(lid)
    return result


def write_proposals_csv(rows: list[tuple[str, int, float, float]], data_dir: str | Path) -> Path:
    path = Path(data_dir) / "proposals.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PROPOSAL_HEADER)
        for case_id, lobe_id, p_star, thr in rows:
            writer.writerow([case_id, lobe_id, repr(float(p_star)), repr(float(thr))])
    return path


def read_proposals_csv(data_dir: str | Path) -> dict[tuple[str, int], tuple[float, float]]:
    """Map (case_id, lobe_id) -> (p_star, otsu_threshold)."""
    path = Path(data_dir) / "proposals.csv"
    out: dict[tuple[str, int], tuple[float, float]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != PROPOSAL_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            out[(row["case_id"], int(row["lobe_id"]))] = (
                float(row["p_star"]), float(row["otsu_threshold"]),
            )
    return out


def proposal_rows(case: PhantomCase, result: CandidateResult) -> list[tuple[str, int, float, float]]:
    return [(case.case_id, lid, result.p_star[lid], result.thresholds[lid]) for lid in sorted(result.p_star)]
