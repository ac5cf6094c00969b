"""Procedural chest phantoms with per-lobe severity labels.

Each case is a cubic HU volume holding two ellipsoidal lungs split into
lobes by oblique planes, tubular vessel trees grown by random walks, and
blobby lesions of three subtypes (ground-glass, consolidation, mixed)
placed with a peripheral bias. Severity scoring follows the standard
0-5 visual scale driven by the per-lobe involved fraction.

Generation is fully deterministic in (config.seed, case_index).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dvol import Volume, read_dvol, write_dvol
from .losses import Interval

HU_AIR = -990.0
HU_PARENCHYMA = -850.0
HU_GGO = -550.0
HU_CONSOLIDATION = -50.0
HU_VESSEL = 30.0

SUBTYPE_GGO = 1
SUBTYPE_CONSOLIDATION = 2
SUBTYPE_MIXED = 3
SUBTYPE_NAMES = {SUBTYPE_GGO: "ground_glass", SUBTYPE_CONSOLIDATION: "consolidation", SUBTYPE_MIXED: "mixed"}

# severity score -> target fraction interval
SCORE_INTERVALS: dict[int, tuple[float, float]] = {
    0: (0.0, 0.0),
    1: (0.01, 0.05),
    2: (0.05, 0.25),
    3: (0.25, 0.50),
    4: (0.50, 0.75),
    5: (0.75, 1.00),
}


def score_from_fraction(p: float) -> int:
    """Severity score for an involved fraction; upper bin edges inclusive."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"fraction out of range: {p}")
    if p == 0.0:
        return 0
    if p <= 0.05:
        return 1
    if p <= 0.25:
        return 2
    if p <= 0.50:
        return 3
    if p <= 0.75:
        return 4
    return 5


def interval_from_score(score: int) -> Interval:
    if score not in SCORE_INTERVALS:
        raise ValueError(f"score must be 0..5, got {score}")
    lo, hi = SCORE_INTERVALS[score]
    return Interval(lo, hi)


@dataclass(frozen=True)
class SeverityRecord:
    lobe_id: int
    true_fraction: float
    score: int
    interval: Interval


@dataclass
class PhantomConfig:
    grid_size: int = 64
    spacing_mm: float = 1.4
    num_lobes: int = 5
    lesion_burden: tuple[float, float] = (0.0, 0.6)
    subtype_mix: tuple[float, float, float] = (0.85, 0.04, 0.11)  # ggo, consolidation, mixed
    noise_sigma: float = 25.0
    label_noise_prob: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.grid_size < 32 or self.grid_size % 8 != 0:
            raise ValueError("grid_size must be >= 32 and divisible by 8")
        if self.spacing_mm <= 0:
            raise ValueError("spacing_mm must be positive")
        if not 1 <= self.num_lobes <= 8:
            raise ValueError("num_lobes must be in 1..8")
        lo, hi = self.lesion_burden
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"lesion_burden must satisfy 0 <= lo <= hi <= 1, got {self.lesion_burden}")
        mix = np.asarray(self.subtype_mix, dtype=float)
        if mix.shape != (3,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ValueError(f"subtype_mix must be 3 nonnegative weights summing to 1, got {self.subtype_mix}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not 0.0 <= self.label_noise_prob <= 1.0:
            raise ValueError("label_noise_prob must be in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass
class PhantomCase:
    case_id: str
    image: Volume          # float32 HU
    lobe_map: Volume       # uint8, 0 = outside, 1..num_lobes
    lesion_map: Volume     # uint8, 0 / subtype codes 1..3
    vessel_map: Volume     # uint8, 0 / 1
    severity: list[SeverityRecord]

    def lobe_ids(self) -> list[int]:
        return sorted(int(v) for v in np.unique(self.lobe_map.data) if v != 0)

    def validate(self, label_noise: bool = False) -> None:
        """Assert the structural invariants; cheap enough for tests."""
        img, lobes = self.image.data, self.lobe_map.data
        lesions, vessels = self.lesion_map.data, self.vessel_map.data
        assert img.shape == lobes.shape == lesions.shape == vessels.shape
        assert img.dtype == np.float32
        assert lobes.dtype == lesions.dtype == vessels.dtype == np.uint8
        assert np.all(np.isin(lesions, [0, 1, 2, 3]))
        assert np.all(vessels <= 1)
        lung = lobes > 0
        assert not np.any((lesions > 0) & ~lung), "lesion outside lobes"
        assert not np.any((vessels > 0) & ~lung), "vessel outside lobes"
        assert not np.any((lesions > 0) & (vessels > 0)), "lesion/vessel overlap"
        six = ndimage.generate_binary_structure(3, 1)
        by_id = {r.lobe_id: r for r in self.severity}
        assert sorted(by_id) == self.lobe_ids(), "severity records must cover each lobe once"
        for lid in self.lobe_ids():
            m = lobes == lid
            assert m.any(), f"lobe {lid} empty"
            _, n_comp = ndimage.label(m, structure=six)
            assert n_comp == 1, f"lobe {lid} disconnected ({n_comp} components)"
            rec = by_id[lid]
            frac = float(np.count_nonzero((lesions > 0) & m)) / float(np.count_nonzero(m))
            assert rec.true_fraction == frac, f"lobe {lid} fraction mismatch"
            if not label_noise:
                assert rec.score == score_from_fraction(frac)
            assert rec.interval == interval_from_score(rec.score)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return q <= 1.0


def _make_lungs(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    def one(side_w: float, radii_base):
        center = (
            n * (0.50 + rng.uniform(-0.02, 0.02)),
            n * (side_w + rng.uniform(-0.01, 0.01)),
            n * (0.50 + rng.uniform(-0.02, 0.02)),
        )
        radii = tuple(n * r * (1.0 + rng.uniform(-0.04, 0.04)) for r in radii_base)
        return _ellipsoid((n, n, n), center, radii)

    right = one(0.285, (0.42, 0.19, 0.34))
    left = one(0.715, (0.40, 0.18, 0.33))
    left &= ~right  # guarantee disjoint lungs even under extreme jitter
    return right, left


def _split_lung(lobe_map: np.ndarray, lung: np.ndarray, lobe_ids: list[int], rng: np.random.Generator) -> None:
    """Partition one lung into len(lobe_ids) slabs along a tilted axis."""
    k = len(lobe_ids)
    if k == 0:
        return
    if k == 1:
        lobe_map[lung] = lobe_ids[0]
        return
    v = np.array([1.0, rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25)])
    v /= np.linalg.norm(v)
    coords = np.argwhere(lung)
    t = coords @ v
    edges = np.quantile(t, [i / k for i in range(1, k)])
    piece = np.searchsorted(edges, t, side="right")
    flat = lobe_map.reshape(-1)
    flat_idx = np.ravel_multi_index(coords.T, lobe_map.shape)
    for i, lid in enumerate(lobe_ids):
        flat[flat_idx[piece == i]] = lid


def _enforce_connected(lobe_map: np.ndarray, lobe_ids: list[int]) -> None:
    """Keep each lobe's largest component, reabsorb strays into neighbors."""
    six = ndimage.generate_binary_structure(3, 1)
    stray = np.zeros(lobe_map.shape, dtype=bool)
    for lid in lobe_ids:
        m = lobe_map == lid
        labels, n_comp = ndimage.label(m, structure=six)
        if n_comp <= 1:
            continue
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n_comp + 1))
        keep = int(np.argmax(sizes)) + 1
        drop = m & (labels != keep)
        lobe_map[drop] = 0
        stray |= drop
    for _ in range(50):
        if not stray.any():
            return
        grew = False
        for lid in lobe_ids:
            grow = ndimage.binary_dilation(lobe_map == lid, structure=six) & stray
            if grow.any():
                lobe_map[grow] = lid
                stray &= ~grow
                grew = True
        if not grew:
            break
    # voxels unreachable from any lobe core fall out of the lung entirely
    lobe_map[stray] = 0


def _stamp_ball(alpha: np.ndarray, pos: np.ndarray, radius: float) -> None:
    """Accumulate partial-volume tube coverage: 1 deep inside, ramping to 0."""
    n = alpha.shape[0]
    r = int(np.ceil(radius)) + 1
    lo = np.maximum(np.floor(pos).astype(int) - r, 0)
    hi = np.minimum(np.floor(pos).astype(int) + r + 1, n)
    if np.any(lo >= hi):
        return
    grids = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    d = np.sqrt(sum((g - p) ** 2 for g, p in zip(grids, pos)))
    cov = np.clip(radius - d + 0.5, 0.0, 1.0)
    box = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
    np.maximum(alpha[box], cov, out=alpha[box])


def _unit(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            return v / norm


def _grow_vessels(alpha: np.ndarray, lobe_mask: np.ndarray, rng: np.random.Generator) -> None:
    centroid = np.argwhere(lobe_mask).mean(axis=0)
    n_walks = 2 + int(rng.integers(0, 2))
    queue = []
    for _ in range(n_walks):
        start = centroid + rng.uniform(-3, 3, size=3)
        queue.append((start, _unit(rng), 1.8 + rng.uniform(-0.2, 0.6), 8))
    segments = 0
    while queue and segments < 50:
        pos, direction, radius, remaining = queue.pop(0)
        if remaining == 0:
            continue
        segments += 1
        length = rng.uniform(4.0, 7.0)
        for _ in range(int(length / 0.5)):
            pos = pos + direction * 0.5
            _stamp_ball(alpha, pos, radius)
        direction = direction * 0.9 + _unit(rng) * 0.25
        direction /= np.linalg.norm(direction)
        radius = max(1.3, radius * 0.9)
        if rng.random() < 0.15 and radius > 1.4:
            queue.append((pos.copy(), _unit(rng), radius * 0.75, remaining - 1))
        queue.append((pos, direction, radius, remaining - 1))


def _blob_alpha(shape, center, radii):
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    ind = (q <= 1.0).astype(np.float32)
    a = ndimage.gaussian_filter(ind, sigma=0.6)
    return np.clip(a * 1.25, 0.0, 1.0)


def _add_lesions(image, lesion_map, lobe_sel, target_voxels, mix, rng, lung_centroid):
    """Drop blobs into one lobe until the involved count reaches target."""
    n = image.shape[0]
    coords = np.argwhere(lobe_sel)
    d = np.linalg.norm(coords - lung_centroid, axis=1)
    weights = 0.15 + (d / max(d.max(), 1e-6)) ** 2
    weights /= weights.sum()
    lobe_flat = np.ravel_multi_index(coords.T, image.shape)
    attempts = 0
    while np.count_nonzero((lesion_map.reshape(-1)[lobe_flat]) > 0) < target_voxels and attempts < 400:
        attempts += 1
        center = coords[rng.choice(len(coords), p=weights)].astype(float)
        radii = rng.uniform(2.2, 5.5, size=3)
        subtype = int(rng.choice([SUBTYPE_GGO, SUBTYPE_CONSOLIDATION, SUBTYPE_MIXED], p=mix))
        if subtype == SUBTYPE_CONSOLIDATION:
            radii = radii * 0.7  # consolidations run smaller than ground-glass patches
        pad = 4
        lo = np.maximum((center - radii - pad).astype(int), 0)
        hi = np.minimum((center + radii + pad).astype(int) + 1, n)
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        local_center = center - lo
        sel = lobe_sel[box]
        ggo_hu = HU_GGO + rng.uniform(-35.0, 35.0)
        cons_hu = HU_CONSOLIDATION + rng.uniform(-20.0, 20.0)
        if subtype == SUBTYPE_GGO:
            layers = [(ggo_hu, _blob_alpha(sel.shape, local_center, radii))]
        elif subtype == SUBTYPE_CONSOLIDATION:
            layers = [(cons_hu, _blob_alpha(sel.shape, local_center, radii))]
        else:  # ground-glass shell with a consolidated core
            layers = [
                (ggo_hu, _blob_alpha(sel.shape, local_center, radii)),
                (cons_hu, _blob_alpha(sel.shape, local_center, radii * 0.45)),
            ]
        support = None
        for hu, alpha in layers:
            alpha = alpha * sel
            image[box] = image[box] * (1.0 - alpha) + hu * alpha
            support = (alpha >= 0.5) if support is None else (support | (alpha >= 0.5))
        lesion_map[box][support] = subtype


def true_fraction(lesion_map: np.ndarray, lobe_map: np.ndarray, lobe_id: int) -> float:
    """Lesion voxel count over lobe voxel count for one lobe."""
    m = lobe_map == lobe_id
    denom = np.count_nonzero(m)
    if denom == 0:
        raise ValueError(f"lobe {lobe_id} not present in lobe_map")
    return float(np.count_nonzero((lesion_map > 0) & m)) / float(denom)


def generate_case(config: PhantomConfig, case_index: int) -> PhantomCase:
    """Build one deterministic phantom case for (config.seed, case_index)."""
    config.validate()
    if case_index < 0:
        raise ValueError("case_index must be nonnegative")
    rng = np.random.default_rng([config.seed, case_index])
    n = config.grid_size
    spacing = (config.spacing_mm,) * 3

    right, left = _make_lungs(n, rng)
    n_right = (config.num_lobes + 1) // 2
    n_left = config.num_lobes - n_right
    lobe_map = np.zeros((n, n, n), dtype=np.uint8)
    _split_lung(lobe_map, right, list(range(1, n_right + 1)), rng)
    _split_lung(lobe_map, left, list(range(n_right + 1, config.num_lobes + 1)), rng)
    _enforce_connected(lobe_map, list(range(1, config.num_lobes + 1)))
    for lid in range(1, config.num_lobes + 1):
        if not np.any(lobe_map == lid):
            raise ValueError(f"grid_size {n} too small to carve {config.num_lobes} lobes")

    lung = lobe_map > 0
    image = np.full((n, n, n), HU_AIR, dtype=np.float64)
    image[lung] = HU_PARENCHYMA

    lesion_map = np.zeros((n, n, n), dtype=np.uint8)
    lo_b, hi_b = config.lesion_burden
    mix = np.asarray(config.subtype_mix, dtype=float)
    lung_centroids = {}
    for lid in range(1, config.num_lobes + 1):
        side = right if lid <= n_right else left
        key = id(side)
        if key not in lung_centroids:
            lung_centroids[key] = np.argwhere(side).mean(axis=0)
        lobe_sel = lobe_map == lid
        target_frac = lo_b if rng.random() < 0.25 else rng.uniform(lo_b, hi_b)
        target_voxels = int(round(target_frac * np.count_nonzero(lobe_sel)))
        if target_voxels >= 8:
            _add_lesions(image, lesion_map, lobe_sel, target_voxels, mix, rng, lung_centroids[key])

    # vessels are thin relative to the grid, so render them with partial-volume
    # coverage: centerlines reach full vessel attenuation, rims blend into the
    # surrounding parenchyma exactly as a reconstructed CT would show them
    vessel_alpha = np.zeros((n, n, n), dtype=np.float32)
    for lid in range(1, config.num_lobes + 1):
        _grow_vessels(vessel_alpha, lobe_map == lid, rng)
    vessel_alpha[~lung] = 0.0
    vessel_alpha[lesion_map > 0] = 0.0
    vessel_map = vessel_alpha >= 0.5
    image = image * (1.0 - vessel_alpha) + HU_VESSEL * vessel_alpha

    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=image.shape)
    image = image.astype(np.float32)

    severity = []
    for lid in range(1, config.num_lobes + 1):
        frac = true_fraction(lesion_map, lobe_map, lid)
        score = score_from_fraction(frac)
        if config.label_noise_prob > 0 and rng.random() < config.label_noise_prob:
            score = int(np.clip(score + rng.choice([-1, 1]), 0, 5))
        severity.append(SeverityRecord(lid, frac, score, interval_from_score(score)))

    return PhantomCase(
        case_id=f"case_{case_index:04d}",
        image=Volume(image, spacing),
        lobe_map=Volume(lobe_map, spacing),
        lesion_map=Volume(lesion_map, spacing),
        vessel_map=Volume(vessel_map.astype(np.uint8), spacing),
        severity=severity,
    )


# ---------------------------------------------------------------------------
# on-disk case layout:  <data_dir>/cases/<case_id>/*.dvol  +  severity.csv

SEVERITY_HEADER = ["case_id", "lobe_id", "score", "true_fraction", "r_l", "r_u"]


def write_case(case: PhantomCase, data_dir: str | Path) -> Path:
    case_dir = Path(data_dir) / "cases" / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    write_dvol(case_dir / "image.dvol", case.image)
    write_dvol(case_dir / "lobe_map.dvol", case.lobe_map)
    write_dvol(case_dir / "lesion_map.dvol", case.lesion_map)
    write_dvol(case_dir / "vessel_map.dvol", case.vessel_map)
    return case_dir


def write_severity_csv(cases: list[PhantomCase], data_dir: str | Path) -> Path:
    path = Path(data_dir) / "severity.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SEVERITY_HEADER)
        for case in cases:
            for rec in case.severity:
                writer.writerow([
                    case.case_id, rec.lobe_id, rec.score,
                    repr(rec.true_fraction), repr(rec.interval.r_l), repr(rec.interval.r_u),
                ])
    return path


def read_severity_csv(data_dir: str | Path) -> dict[str, list[SeverityRecord]]:
    path = Path(data_dir) / "severity.csv"
    out: dict[str, list[SeverityRecord]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != SEVERITY_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            rec = SeverityRecord(
                lobe_id=int(row["lobe_id"]),
                true_fraction=float(row["true_fraction"]),
                score=int(row["score"]),
                interval=Interval(float(row["r_l"]), float(row["r_u"])),
            )
            out.setdefault(row["case_id"], []).append(rec)
    return out


def load_case(data_dir: str | Path, case_id: str, severity: dict[str, list[SeverityRecord]] | None = None) -> PhantomCase:
    case_dir = Path(data_dir) / "cases" / case_id
    if not case_dir.is_dir():
        raise FileNotFoundError(f"no such case directory: {case_dir}")
    if severity is None:
        severity = read_severity_csv(data_dir)
    return PhantomCase(
        case_id=case_id,
        image=read_dvol(case_dir / "image.dvol"),
        lobe_map=read_dvol(case_dir / "lobe_map.dvol"),
        lesion_map=read_dvol(case_dir / "lesion_map.dvol"),
        vessel_map=read_dvol(case_dir / "vessel_map.dvol"),
        severity=severity.get(case_id, []),
    )


def list_case_ids(data_dir: str | Path) -> list[str]:
    cases_dir = Path(data_dir) / "cases"
    if not cases_dir.is_dir():
        raise FileNotFoundError(f"no cases directory under {data_dir}")
    return sorted(p.name for p in cases_dir.iterdir() if p.is_dir())
