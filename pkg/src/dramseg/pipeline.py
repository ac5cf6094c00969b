"""Chunk geometry, augmentation, pseudo-labels, training loops, inference.

The unit of work everywhere is one lobe chunk: the lobe's bounding box
resized to the network's input dims with out-of-lobe voxels zeroed. A
GeometryRecord carries enough to map chunk-space activations back onto
scan voxels exactly (modulo interpolation).

Training writes a run directory:
    checkpoints/epoch_%04d.ckpt
    log.csv             step,epoch,loss_total,loss_reg,loss_er,loss_ref
    predictions/<case_id>.dvol (written later by inference)
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dvol import Volume, write_dvol
from .losses import (
    Interval,
    LossWeights,
    bootstrap_loss,
    calibrate_interval,
    equivariance_loss,
    interval_loss_torch,
    total_loss,
)
from .model import (
    AttentionModule,
    DCAMNetwork,
    LESION_CHANNEL,
    NetworkConfig,
    RegressionNetwork,
    SlimClassifier,
    VESSEL_CHANNEL,
    downsample_lobe_mask,
    lobe_mean_pool,
    save_checkpoint,
)
from .phantom import interval_from_score, load_case, read_severity_csv
from .proposal import read_proposal, read_proposals_csv

HU_CLIP_LO = -1000.0
HU_CLIP_HI = 400.0

LOG_HEADER = ["step", "epoch", "loss_total", "loss_reg", "loss_er", "loss_ref"]


class TrainingDivergence(RuntimeError):
    """Raised when a loss goes non-finite; the offending step is logged first."""


def normalize_intensity(values: np.ndarray) -> np.ndarray:
    """HU -> [0,1]: clip to [-1000, 400], shift, divide by the 1400 span."""
    v = np.clip(np.asarray(values, dtype=np.float32), HU_CLIP_LO, HU_CLIP_HI)
    return (v + 1000.0) / 1400.0


# ---------------------------------------------------------------------------
# chunk extraction and inversion

@dataclass(frozen=True)
class GeometryRecord:
    """Crop box + resize pair tying a chunk back to scan voxels."""

    lobe_id: int
    bbox: tuple[int, int, int, int, int, int]   # z0, z1, y0, y1, x0, x1 (exclusive)
    chunk_size: tuple[int, int, int]

    @property
    def bbox_shape(self) -> tuple[int, int, int]:
        z0, z1, y0, y1, x0, x1 = self.bbox
        return (z1 - z0, y1 - y0, x1 - x0)


def _resize(volume: torch.Tensor, size: tuple[int, int, int]) -> torch.Tensor:
    """Trilinear resize of a (C, D, W, H) tensor."""
    if tuple(volume.shape[1:]) == tuple(size):
        return volume
    return F.interpolate(volume.unsqueeze(0), size=size, mode="trilinear", align_corners=False).squeeze(0)


def extract_chunk(
    image: np.ndarray,
    lobe_map: np.ndarray,
    lobe_id: int,
    chunk_size: tuple[int, int, int],
) -> tuple[torch.Tensor, torch.Tensor, GeometryRecord]:
    """Crop the lobe's bbox, resize to chunk dims, zero out-of-lobe voxels.

    Returns (chunk (1, D, W, H), chunk-space lobe mask (D, W, H) bool,
    geometry record). The image is expected already normalized.
    """
    sel = lobe_map == lobe_id
    if not sel.any():
        raise ValueError(f"extract_chunk: lobe {lobe_id} is empty")
    idx = np.argwhere(sel)
    lo = idx.min(axis=0)
    hi = idx.max(axis=0) + 1
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    crop = torch.from_numpy(np.ascontiguousarray(image[box], dtype=np.float32))
    mask = torch.from_numpy(sel[box].astype(np.float32))
    chunk = _resize(crop.unsqueeze(0), chunk_size)
    mask_r = _resize(mask.unsqueeze(0), chunk_size).squeeze(0) >= 0.5
    chunk = chunk * mask_r
    geom = GeometryRecord(
        lobe_id=lobe_id,
        bbox=(int(lo[0]), int(hi[0]), int(lo[1]), int(hi[1]), int(lo[2]), int(hi[2])),
        chunk_size=tuple(chunk_size),
    )
    return chunk, mask_r, geom


def extract_mask_chunk(mask: np.ndarray, geom: GeometryRecord) -> torch.Tensor:
    """Carry a scan-space binary map into chunk space with the same geometry."""
    z0, z1, y0, y1, x0, x1 = geom.bbox
    crop = torch.from_numpy(mask[z0:z1, y0:y1, x0:x1].astype(np.float32))
    return _resize(crop.unsqueeze(0), geom.chunk_size).squeeze(0) >= 0.5


def insert_activations(activations: torch.Tensor, geom: GeometryRecord, scan_shape: tuple[int, int, int]) -> torch.Tensor:
    """Invert the chunk geometry: resize (C, chunk) back and paste at the bbox."""
    back = _resize(activations, geom.bbox_shape)
    out = torch.zeros((activations.shape[0],) + tuple(scan_shape), dtype=activations.dtype)
    z0, z1, y0, y1, x0, x1 = geom.bbox
    out[:, z0:z1, y0:y1, x0:x1] = back
    return out


# ---------------------------------------------------------------------------
# affine augmentation: per-axis rescale (resized back) + 90-degree rotation

@dataclass(frozen=True)
class AffineTransform:
    scale_factors: tuple[float, float, float]
    rotation_k: int                       # quarter turns, 1..3
    rotation_axes: tuple[int, int]        # ordered spatial axis pair

    def __post_init__(self):
        if self.rotation_k not in (1, 2, 3):
            raise ValueError("rotation_k must be 1, 2 or 3")
        a, b = self.rotation_axes
        if a == b or not (0 <= a < 3 and 0 <= b < 3):
            raise ValueError(f"bad rotation axes {self.rotation_axes}")
        for s in self.scale_factors:
            if not 0.8 <= s <= 1.2:
                raise ValueError(f"scale factor {s} outside [0.8, 1.2]")


def sample_affine(rng: np.random.Generator) -> AffineTransform:
    scales = tuple(float(s) for s in rng.uniform(0.8, 1.2, size=3))
    k = int(rng.integers(1, 4))
    pairs = [(0, 1), (0, 2), (1, 2)]
    a, b = pairs[int(rng.integers(0, 3))]
    if rng.random() < 0.5:
        a, b = b, a
    return AffineTransform(scale_factors=scales, rotation_k=k, rotation_axes=(a, b))


def apply_affine(volume: torch.Tensor, t: AffineTransform) -> torch.Tensor:
    """Apply T channelwise to a (C, D, W, H) tensor; output keeps input dims.

    The rescale step resizes to the scaled grid and immediately back, so T
    is an endomorphism on chunk-shaped tensors and usable on both the
    network input and its output map. Rotations need the two rotated axes
    equal in size (cubic chunks satisfy this trivially).
    """
    dims = volume.shape[1:]
    a, b = t.rotation_axes
    if t.rotation_k in (1, 3) and dims[a] != dims[b]:
        raise ValueError("quarter rotations need equal-size rotation axes")
    scaled = tuple(max(1, int(round(d * s))) for d, s in zip(dims, t.scale_factors))
    out = _resize(_resize(volume, scaled), tuple(dims))
    return torch.rot90(out, k=t.rotation_k, dims=(1 + a, 1 + b))


# ---------------------------------------------------------------------------
# pseudo-labels

def make_pseudo_labels(
    dram: torch.Tensor,
    candidates: torch.Tensor,
    vessels: torch.Tensor,
    lobe_mask: torch.Tensor,
) -> torch.Tensor:
    """One-hot training targets from the current map and the fixed proposals.

    lesion  <- (argmax channel == lesion) and candidate
    vessel  <- detected vessel, unless claimed as lesion
    background everywhere else, including outside the lobe.
    """
    labels = torch.zeros(dram.shape[1:], dtype=torch.long)
    seeds = dram.detach().argmax(dim=0) == LESION_CHANNEL
    lesion = seeds & candidates.bool() & lobe_mask.bool()
    vessel = vessels.bool() & lobe_mask.bool() & ~lesion
    labels[vessel] = VESSEL_CHANNEL
    labels[lesion] = LESION_CHANNEL
    return F.one_hot(labels, num_classes=dram.shape[0]).permute(3, 0, 1, 2).to(dram.dtype)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    momentum: float = 0.9
    epochs: int = 200
    chunk_size: tuple[int, int, int] | None = None   # None -> use the network's
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 10

    def validate(self) -> None:
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("bad optimizer hyperparameters")
        if self.epochs < 0 or self.checkpoint_every <= 0:
            raise ValueError("epochs must be >= 0, checkpoint_every > 0")


@dataclass
class TrainingCase:
    """Everything one case contributes to training, preloaded and normalized."""

    case_id: str
    image: np.ndarray                 # normalized [0,1] float32
    lobe_map: np.ndarray              # uint8
    candidates: np.ndarray            # bool
    vessels: np.ndarray               # bool
    intervals: dict[int, Interval]    # per lobe, already calibrated
    positive: dict[int, bool]         # per lobe presence labels (score > 0)


def load_training_cases(data_dir: str | Path, proposal_dir: str | Path, case_ids: list[str]) -> list[TrainingCase]:
    """Assemble cases from generated data + proposals; calibrates intervals."""
    severity = read_severity_csv(data_dir)
    p_star = read_proposals_csv(proposal_dir)
    out = []
    for cid in case_ids:
        case = load_case(data_dir, cid)
        prop = read_proposal(proposal_dir, cid)
        intervals, positive = {}, {}
        for rec in severity[cid]:
            base = interval_from_score(rec.score)
            intervals[rec.lobe_id] = calibrate_interval(base, p_star[(cid, rec.lobe_id)][0])
            positive[rec.lobe_id] = rec.score > 0
        out.append(TrainingCase(
            case_id=cid,
            image=normalize_intensity(case.image.data),
            lobe_map=case.lobe_map.data,
            candidates=prop.candidate_map,
            vessels=prop.vessel_map,
            intervals=intervals,
            positive=positive,
        ))
    return out


def _lobe_schedule(cases: list[TrainingCase], rng: np.random.Generator) -> list[tuple[int, int]]:
    """All (case index, lobe id) pairs, reshuffled each epoch."""
    pairs = [(i, lid) for i, case in enumerate(cases) for lid in sorted(case.intervals)]
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


class _StepLog:
    def __init__(self, run_dir: Path):
        run_dir.mkdir(parents=True, exist_ok=True)
        self.path = run_dir / "log.csv"
        self._f = open(self.path, "w", newline="")
        self._w = csv.writer(self._f)
        self._w.writerow(LOG_HEADER)

    def write(self, step: int, epoch: int, parts: dict[str, float]) -> None:
        self._w.writerow([
            step, epoch,
            repr(parts["loss_total"]), repr(parts["loss_reg"]),
            repr(parts["loss_er"]), repr(parts["loss_ref"]),
        ])

    def close(self) -> None:
        self._f.flush()
        self._f.close()


def train_regression(
    cases: list[TrainingCase],
    net_config: NetworkConfig,
    config: TrainConfig,
    run_dir: str | Path,
    use_er: bool = False,
    use_ref: bool = False,
    use_at: bool = False,
) -> RegressionNetwork:
    """Interval-supervised training; ER/REF/AT toggle the auxiliary losses.

    One lobe chunk per optimization step, lobes shuffled per epoch. The
    attention module (when enabled) trains jointly but is a train-time
    device only; inference uses the bare backbone map.
    """
    config.validate()
    net_config.validate()
    if config.chunk_size is not None and tuple(config.chunk_size) != tuple(net_config.chunk_size):
        raise ValueError("TrainConfig.chunk_size disagrees with the network chunk_size")
    run_dir = Path(run_dir)
    torch.manual_seed(config.seed)
    net = RegressionNetwork(net_config)
    attention = AttentionModule(net_config) if use_at else None
    params = list(net.parameters()) + (list(attention.parameters()) if attention else [])
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    chunk_size = tuple(net_config.chunk_size)

    log = _StepLog(run_dir)
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            for ci, lid in _lobe_schedule(cases, rng):
                case = cases[ci]
                chunk, lobe_mask, geom = extract_chunk(case.image, case.lobe_map, lid, chunk_size)
                opt.zero_grad()
                bundle, dram = net(chunk)
                if attention is not None:
                    dram = attention(chunk, bundle, dram)

                iv = case.intervals[lid]
                pooled = lobe_mean_pool(dram, lobe_mask, LESION_CHANNEL)
                r_l = torch.tensor(iv.r_l, dtype=pooled.dtype)
                r_u = torch.tensor(iv.r_u, dtype=pooled.dtype)
                loss_reg = interval_loss_torch(pooled, r_l, r_u)

                loss_er = None
                if use_er:
                    t = sample_affine(rng)
                    t_chunk = apply_affine(chunk.detach(), t)
                    t_bundle, t_dram = net(t_chunk)
                    if attention is not None:
                        t_dram = attention(t_chunk, t_bundle, t_dram)
                    loss_er = equivariance_loss(t_dram, apply_affine(dram, t))

                loss_ref = None
                if use_ref:
                    cand = extract_mask_chunk(case.candidates, geom)
                    ves = extract_mask_chunk(case.vessels, geom)
                    t_star = make_pseudo_labels(dram, cand, ves, lobe_mask)
                    loss_ref = bootstrap_loss(dram, t_star, beta=config.weights.bootstrap_beta)

                loss, parts = total_loss(loss_reg, loss_er, loss_ref, config.weights)
                step += 1
                log.write(step, epoch, parts)
                if not np.isfinite(parts["loss_total"]):
                    raise TrainingDivergence(f"non-finite loss at step {step} (epoch {epoch}): {parts}")
                loss.backward()
                opt.step()
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                save_checkpoint(
                    run_dir / "checkpoints" / f"epoch_{epoch:04d}.ckpt",
                    net, net_config, {"epoch": epoch, "step": step},
                )
        if config.epochs == 0:
            save_checkpoint(run_dir / "checkpoints" / "epoch_0000.ckpt", net, net_config, {"epoch": 0, "step": 0})
    finally:
        log.close()
    return net


def train_classifier(
    cases: list[TrainingCase],
    net_config: NetworkConfig,
    config: TrainConfig,
    run_dir: str | Path,
    slim: bool = False,
) -> torch.nn.Module:
    """Presence-label training for the activation-map baselines.

    slim=False trains the full encoder-decoder with a dense-feature head;
    slim=True drops the decoder (classic low-resolution variant). The
    cross-entropy lands in both loss_total and loss_reg columns of the
    step log; er/ref stay 0 (no such terms here).
    """
    config.validate()
    net_config.validate()
    if config.chunk_size is not None and tuple(config.chunk_size) != tuple(net_config.chunk_size):
        raise ValueError("TrainConfig.chunk_size disagrees with the network chunk_size")
    run_dir = Path(run_dir)
    torch.manual_seed(config.seed)
    net = SlimClassifier(net_config) if slim else DCAMNetwork(net_config)
    opt = torch.optim.SGD(net.parameters(), lr=config.learning_rate, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    chunk_size = tuple(net_config.chunk_size)
    factor = 2 ** net_config.depth

    log = _StepLog(run_dir)
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            for ci, lid in _lobe_schedule(cases, rng):
                case = cases[ci]
                chunk, lobe_mask, _ = extract_chunk(case.image, case.lobe_map, lid, chunk_size)
                label = torch.tensor([1 if case.positive[lid] else 0])
                opt.zero_grad()
                if slim:
                    feats = net.features(chunk)
                    logits = net.logits(feats, downsample_lobe_mask(lobe_mask, factor))
                else:
                    logits, _ = net(chunk, lobe_mask)
                loss = F.cross_entropy(logits.unsqueeze(0), label)
                val = float(loss.detach())
                parts = {"loss_total": val, "loss_reg": val, "loss_er": 0.0, "loss_ref": 0.0}
                step += 1
                log.write(step, epoch, parts)
                if not np.isfinite(val):
                    raise TrainingDivergence(f"non-finite loss at step {step} (epoch {epoch})")
                loss.backward()
                opt.step()
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                save_checkpoint(
                    run_dir / "checkpoints" / f"epoch_{epoch:04d}.ckpt",
                    net, net_config, {"epoch": epoch, "step": step},
                )
        if config.epochs == 0:
            save_checkpoint(run_dir / "checkpoints" / "epoch_0000.ckpt", net, net_config, {"epoch": 0, "step": 0})
    finally:
        log.close()
    return net


# ---------------------------------------------------------------------------
# inference

def infer_scan(net: RegressionNetwork, image_hu: np.ndarray, lobe_map: np.ndarray) -> np.ndarray:
    """Tile per-lobe chunks into a scan-level label map (uint8, 0/1/2).

    Attention never runs here: the refinement module regularizes training
    only. Each lobe's activations are mapped back through the chunk
    geometry and argmaxed on the lobe's own voxels; empty lobes are
    skipped with a warning.
    """
    image = normalize_intensity(image_hu)
    chunk_size = tuple(net.config.chunk_size)
    out = np.zeros(image.shape, dtype=np.uint8)
    lobe_ids = sorted(int(v) for v in np.unique(lobe_map) if v != 0)
    with torch.no_grad():
        for lid in lobe_ids:
            sel = lobe_map == lid
            if not sel.any():
                warnings.warn(f"lobe {lid} empty; skipped")
                continue
            chunk, _, geom = extract_chunk(image, lobe_map, lid, chunk_size)
            _, dram = net(chunk)
            acts = insert_activations(dram, geom, image.shape)
            labels = acts.argmax(dim=0).numpy().astype(np.uint8)
            out[sel] = labels[sel]
    return out


def infer_cam_scan(net: torch.nn.Module, image_hu: np.ndarray, lobe_map: np.ndarray, slim: bool) -> np.ndarray:
    """Scan-level raw activation map for the classification baselines."""
    image = normalize_intensity(image_hu)
    chunk_size = tuple(net.config.chunk_size)
    out = np.zeros(image.shape, dtype=np.float32)
    lobe_ids = sorted(int(v) for v in np.unique(lobe_map) if v != 0)
    with torch.no_grad():
        for lid in lobe_ids:
            sel = lobe_map == lid
            if not sel.any():
                warnings.warn(f"lobe {lid} empty; skipped")
                continue
            chunk, lobe_mask, geom = extract_chunk(image, lobe_map, lid, chunk_size)
            if slim:
                _, cam = net(chunk)
            else:
                _, cam = net(chunk, lobe_mask)
            acts = insert_activations(cam.unsqueeze(0), geom, image.shape)
            cam_full = acts[0].numpy()
            out[sel] = cam_full[sel]
    return out


def postprocess_cam(cam: np.ndarray, lobe_map: np.ndarray, candidates: np.ndarray | None) -> np.ndarray:
    """Rectify, rescale, and Otsu-binarize an activation map lobe by lobe.

    Candidates, when given, clip the prediction (the \"-p\" variants).
    A lobe whose rectified map is constant yields no prediction there.
    """
    from .proposal import otsu_threshold

    pred = np.zeros(cam.shape, dtype=bool)
    for lid in sorted(int(v) for v in np.unique(lobe_map) if v != 0):
        sel = lobe_map == lid
        vals = np.maximum(cam[sel].astype(np.float64), 0.0)
        vmin, vmax = float(vals.min()), float(vals.max())
        if vmax <= vmin:
            continue
        scaled = (vals - vmin) / (vmax - vmin)
        thr = otsu_threshold(scaled)
        mask = np.zeros(cam.shape, dtype=bool)
        mask[sel] = scaled >= thr
        pred |= mask
    if candidates is not None:
        pred &= candidates.astype(bool)
    return pred


def write_prediction(pred_labels: np.ndarray, spacing: tuple[float, float, float], run_dir: str | Path, case_id: str) -> Path:
    out_dir = Path(run_dir) / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{case_id}.dvol"
    write_dvol(path, Volume(pred_labels.astype(np.uint8), spacing))
    return path
