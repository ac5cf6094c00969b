"""3D encoder-decoder backbone, CAM heads, and local-affinity refinement.

All public entry points take unbatched channel-first tensors (C, D, W, H);
the batch dimension torch wants internally is added and stripped on the
spot. Shapes follow the chunk contract: spatial dims divisible by
2**depth.

Channel order of the dense map is fixed: background < vessel < lesion.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BACKGROUND_CHANNEL = 0
VESSEL_CHANNEL = 1
LESION_CHANNEL = 2

CKPT_MAGIC = "DRAMCKPT1"


@dataclass
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 3
    base_width: int = 16
    depth: int = 3
    attention_dim: int = 8
    chunk_size: tuple[int, int, int] = (80, 80, 80)

    def validate(self) -> None:
        if self.in_channels != 1:
            raise ValueError("single-channel input only")
        if self.num_classes != 3:
            raise ValueError("channel order background/vessel/lesion is fixed (3 classes)")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.attention_dim < 1:
            raise ValueError("attention_dim must be >= 1")
        div = 2 ** self.depth
        if len(self.chunk_size) != 3 or any(s <= 0 or s % div for s in self.chunk_size):
            raise ValueError(f"chunk dims {self.chunk_size} must be positive and divisible by {div}")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "base_width": self.base_width,
            "depth": self.depth,
            "attention_dim": self.attention_dim,
            "chunk_size": list(self.chunk_size),
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        cfg = NetworkConfig(
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            base_width=int(d["base_width"]),
            depth=int(d["depth"]),
            attention_dim=int(d["attention_dim"]),
            chunk_size=tuple(int(v) for v in d["chunk_size"]),
        )
        cfg.validate()
        return cfg


@dataclass
class DenseFeatureBundle:
    """Dense features exposed for the CAM head and the attention input."""

    final_dense: torch.Tensor   # (F0, D, W, H), full resolution, pre-head
    enc1: torch.Tensor          # (F0, D, W, H)
    enc2: torch.Tensor          # (2*F0, D/2, W/2, H/2)


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    # two zero-padded 3x3x3 convs, stride 1, relu after each; no norm layers
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv3d(c_out, c_out, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Symmetric encoder-decoder producing full-resolution dense features."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        f0, depth = config.base_width, config.depth
        widths = [f0 * 2 ** i for i in range(depth)]           # F0, 2F0, 4F0
        self.encoders = nn.ModuleList()
        c_in = config.in_channels
        for w in widths:
            self.encoders.append(_conv_block(c_in, w))
            c_in = w
        self.bottleneck = _conv_block(widths[-1], widths[-1] * 2)
        self.decoders = nn.ModuleList()
        c_in = widths[-1] * 2
        for w in reversed(widths):
            self.decoders.append(_conv_block(c_in + w, w))
            c_in = w

    def encode(self, chunk: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Pre-pool activations of each stage plus the bottleneck output."""
        if chunk.dim() != 4 or chunk.shape[0] != self.config.in_channels:
            raise ValueError(f"expected ({self.config.in_channels}, D, W, H) chunk, got {tuple(chunk.shape)}")
        div = 2 ** self.config.depth
        if any(s % div for s in chunk.shape[1:]):
            raise ValueError(f"chunk dims {tuple(chunk.shape[1:])} not divisible by {div}")
        x = chunk.unsqueeze(0)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool3d(x, 2)
        x = self.bottleneck(x)
        return skips, x

    def forward(self, chunk: torch.Tensor) -> DenseFeatureBundle:
        skips, x = self.encode(chunk)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
        return DenseFeatureBundle(
            final_dense=x.squeeze(0),
            enc1=skips[0].squeeze(0),
            enc2=skips[1].squeeze(0),
        )


class RegressionNetwork(nn.Module):
    """Backbone plus the 1x1x1 regression head with per-voxel softmax."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.head = nn.Conv3d(config.base_width, config.num_classes, 1)
        # over-activated start: argmax == lesion at (nearly) every voxel of
        # the first map, so the pseudo-label rule (argmax ∧ candidate) seeds
        # the whole candidate region. Refinement can prune an over-active
        # channel but cannot resurrect one the argmax never selects: from a
        # neutral start the background majority erases the seeds before the
        # head learns to tell candidates apart. The bias margin (~2 sigma of
        # the initial logit noise) buys the default-initialized weights that
        # time; the seeds it protects are label-coherent, so the readout they
        # teach keeps candidate voxels on the lesion channel after the bias
        # advantage has decayed.
        with torch.no_grad():
            self.head.bias.zero_()
            self.head.bias[LESION_CHANNEL] = 2.0

    def forward(self, chunk: torch.Tensor) -> tuple[DenseFeatureBundle, torch.Tensor]:
        """Return the feature bundle and the dense softmax map (C, D, W, H)."""
        bundle = self.backbone(chunk)
        logits = self.head(bundle.final_dense.unsqueeze(0)).squeeze(0)
        return bundle, torch.softmax(logits, dim=0)


def lobe_mean_pool(dram: torch.Tensor, lobe_mask: torch.Tensor, channel: int = LESION_CHANNEL) -> torch.Tensor:
    """Mean of one channel over the in-lobe voxels; differentiable scalar."""
    if lobe_mask.shape != dram.shape[1:]:
        raise ValueError(f"mask shape {tuple(lobe_mask.shape)} != map spatial dims {tuple(dram.shape[1:])}")
    mask = lobe_mask.bool()
    n = int(mask.sum())
    if n == 0:
        raise ValueError("lobe_mean_pool: empty lobe mask")
    return dram[channel][mask].sum() / n


# ---------------------------------------------------------------------------
# local-affinity attention over the 18-neighborhood

# all offsets in {-1,0,1}^3 with one or two nonzero coordinates, in
# lexicographic order; this ordering is part of the AttentionMap contract
NEIGHBOR_OFFSETS: tuple[tuple[int, int, int], ...] = tuple(
    off for off in product((-1, 0, 1), repeat=3) if 1 <= sum(c != 0 for c in off) <= 2
)
assert len(NEIGHBOR_OFFSETS) == 18


@dataclass
class AttentionMap:
    weights: torch.Tensor       # (D, W, H, 18), rows sum to 1 over valid entries
    validity: torch.Tensor      # (D, W, H, 18) bool
    neighbor_offsets: tuple[tuple[int, int, int], ...] = field(default=NEIGHBOR_OFFSETS)


def _shift(t: torch.Tensor, off: tuple[int, int, int]) -> torch.Tensor:
    """t[..., i + off] with zero fill outside the volume; t is (C, D, W, H)."""
    # F.pad takes (left, right) pairs from the LAST spatial dim backwards
    pads = []
    for d in reversed(off):
        pads.extend([max(-d, 0), max(d, 0)])
    padded = F.pad(t, pads)
    slices = [slice(None)]
    for d, size in zip(off, t.shape[1:]):
        start = d + max(-d, 0)  # index of source voxel i=0 inside the padded axis
        slices.append(slice(start, start + size))
    return padded[tuple(slices)]


def neighbor_validity(shape: tuple[int, int, int], device=None) -> torch.Tensor:
    """(D, W, H, 18) bool mask of in-bounds neighbors per voxel."""
    d, w, h = shape
    out = torch.zeros((d, w, h, 18), dtype=torch.bool, device=device)
    idx = [torch.arange(s, device=device) for s in shape]
    for k, (dz, dy, dx) in enumerate(NEIGHBOR_OFFSETS):
        okz = (idx[0] + dz >= 0) & (idx[0] + dz < d)
        oky = (idx[1] + dy >= 0) & (idx[1] + dy < w)
        okx = (idx[2] + dx >= 0) & (idx[2] + dx < h)
        out[..., k] = okz[:, None, None] & oky[None, :, None] & okx[None, None, :]
    return out


def gated_affinity(dots: torch.Tensor) -> torch.Tensor:
    """exp(max(dot, 0)): 1 whenever the projected dot is <= 0, else > 1."""
    return torch.exp(torch.relu(dots))


def compute_affinities(x: torch.Tensor, w_theta, w_phi) -> AttentionMap:
    """Normalized gated affinities of every voxel to its 18 neighbors.

    w_theta / w_phi are callables projecting (1+2l, D, W, H) -> (l, D, W, H)
    (1x1x1 convolutions in the trained module). Invalid (out-of-bounds)
    entries carry weight exactly 0; valid entries sum to 1 per voxel.
    """
    theta = w_theta(x)
    phi = w_phi(x)
    validity = neighbor_validity(tuple(x.shape[1:]), device=x.device)
    raws = []
    for k, off in enumerate(NEIGHBOR_OFFSETS):
        dots = (theta * _shift(phi, off)).sum(dim=0)
        raw = gated_affinity(dots)
        raws.append(raw * validity[..., k])
    stack = torch.stack(raws, dim=-1)
    weights = stack / stack.sum(dim=-1, keepdim=True)
    return AttentionMap(weights=weights, validity=validity)


def build_attention_input(chunk: torch.Tensor, bundle: DenseFeatureBundle, squeeze1, squeeze2) -> torch.Tensor:
    """Concatenate chunk with l-channel squeezes of the detached encoder features.

    enc2 is brought back to chunk resolution by trilinear interpolation.
    Detaching blocks refinement gradients from reaching the encoder; the
    squeeze convolutions themselves still train.
    """
    e1 = squeeze1(bundle.enc1.detach())
    e2 = squeeze2(bundle.enc2.detach())
    e2 = F.interpolate(e2.unsqueeze(0), size=chunk.shape[1:], mode="trilinear", align_corners=False).squeeze(0)
    return torch.cat([chunk, e1, e2], dim=0)


def attention_refine(y: torch.Tensor, attn: AttentionMap, g, r, renormalize: bool = True) -> torch.Tensor:
    """Replace each voxel by the affinity-weighted mix of its projected neighbors.

    y is (C, D, W, H); g projects C -> l per voxel, r maps back l -> C.
    With renormalize the output is clamped to the per-voxel simplex
    (relu then divide by the channel sum; a degenerate all-nonpositive
    voxel falls back to uniform), preserving fraction semantics for the
    pooling that follows.
    """
    p = g(y)
    agg = torch.zeros_like(p)
    for k, off in enumerate(NEIGHBOR_OFFSETS):
        agg = agg + attn.weights[..., k].unsqueeze(0) * _shift(p, off)
    out = r(agg)
    if not renormalize:
        return out
    out = torch.relu(out)
    s = out.sum(dim=0, keepdim=True)
    uniform = torch.full_like(out, 1.0 / out.shape[0])
    return torch.where(s > 0, out / s.clamp(min=1e-12), uniform)


class AttentionModule(nn.Module):
    """Trainable wrapper tying the squeeze, projection, and mixing maps together."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        f0, l, c = config.base_width, config.attention_dim, config.num_classes
        self.squeeze1 = nn.Conv3d(f0, l, 1, bias=False)
        self.squeeze2 = nn.Conv3d(2 * f0, l, 1, bias=False)
        self.w_theta = nn.Conv3d(1 + 2 * l, l, 1, bias=False)
        self.w_phi = nn.Conv3d(1 + 2 * l, l, 1, bias=False)
        self.g = nn.Conv3d(c, l, 1, bias=False)
        self.r = nn.Conv3d(l, c, 1, bias=False)
        # start r as the left inverse of g, so the initial refined map is the
        # affinity-weighted neighbor mean of the dram itself: nonnegative,
        # already on the simplex, and with live gradients everywhere. A
        # default random r maps most voxels to all-nonpositive values, whose
        # renormalization fallback is constant and silently kills training.
        with torch.no_grad():
            gw = self.g.weight.view(l, c)
            self.r.weight.copy_(torch.linalg.pinv(gw).view(c, l, 1, 1, 1))

    def forward(self, chunk: torch.Tensor, bundle: DenseFeatureBundle, dram: torch.Tensor) -> torch.Tensor:
        x = build_attention_input(chunk, bundle, self.squeeze1, self.squeeze2)
        attn = compute_affinities(x, self.w_theta, self.w_phi)
        return attention_refine(dram, attn, self.g, self.r)


# ---------------------------------------------------------------------------
# classification heads for the CAM baselines

def classification_head_forward(bundle: DenseFeatureBundle, lobe_mask: torch.Tensor, cls_head: nn.Linear) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-lobe binary logits plus the full-resolution class activation map.

    Logits come from the lobe-mean-pooled final dense features; the map is
    the per-voxel dot product with the positive-class weight row.
    """
    mask = lobe_mask.bool()
    if mask.shape != bundle.final_dense.shape[1:]:
        raise ValueError("lobe mask misaligned with dense features")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("classification_head_forward: empty lobe mask")
    pooled = bundle.final_dense[:, mask].sum(dim=1) / n
    logits = cls_head(pooled)
    w_pos = cls_head.weight[1]                      # class 1 = lesion present
    dcam = torch.einsum("c,cdwh->dwh", w_pos, bundle.final_dense)
    return logits, dcam


class DCAMNetwork(nn.Module):
    """Full backbone trained with per-lobe presence labels (dense CAM baseline)."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.cls_head = nn.Linear(config.base_width, 2)

    def forward(self, chunk: torch.Tensor, lobe_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        bundle = self.backbone(chunk)
        return classification_head_forward(bundle, lobe_mask, self.cls_head)


class SlimClassifier(nn.Module):
    """Encoder + bottleneck only; the classic low-resolution CAM baseline."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        f0, depth = config.base_width, config.depth
        widths = [f0 * 2 ** i for i in range(depth)]
        self.encoders = nn.ModuleList()
        c_in = config.in_channels
        for w in widths:
            self.encoders.append(_conv_block(c_in, w))
            c_in = w
        self.bottleneck = _conv_block(widths[-1], widths[-1] * 2)
        self.cls_head = nn.Linear(widths[-1] * 2, 2)

    def features(self, chunk: torch.Tensor) -> torch.Tensor:
        if chunk.dim() != 4 or chunk.shape[0] != self.config.in_channels:
            raise ValueError(f"expected ({self.config.in_channels}, D, W, H) chunk, got {tuple(chunk.shape)}")
        div = 2 ** self.config.depth
        if any(s % div for s in chunk.shape[1:]):
            raise ValueError(f"chunk dims {tuple(chunk.shape[1:])} not divisible by {div}")
        x = chunk.unsqueeze(0)
        for enc in self.encoders:
            x = F.max_pool3d(enc(x), 2)
        return self.bottleneck(x).squeeze(0)

    def logits(self, feats: torch.Tensor, lobe_mask_low: torch.Tensor) -> torch.Tensor:
        mask = lobe_mask_low.bool()
        n = int(mask.sum())
        if n == 0:
            raise ValueError("SlimClassifier.logits: empty low-resolution lobe mask")
        pooled = feats[:, mask].sum(dim=1) / n
        return self.cls_head(pooled)

    def forward(self, chunk: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Low-resolution CAM and its trilinear upsampling to chunk dims."""
        feats = self.features(chunk)
        w_pos = self.cls_head.weight[1]
        cam_low = torch.einsum("c,cdwh->dwh", w_pos, feats)
        cam_up = F.interpolate(
            cam_low[None, None], size=chunk.shape[1:], mode="trilinear", align_corners=False
        )[0, 0]
        return cam_low, cam_up


def downsample_lobe_mask(lobe_mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Max-pool a binary mask so any touched low-res cell stays inside the lobe."""
    m = lobe_mask.float()[None, None]
    return F.max_pool3d(m, factor)[0, 0] > 0


# ---------------------------------------------------------------------------
# checkpoint format: json header line + packed float32 little-endian blocks

def save_checkpoint(path: str | Path, module: nn.Module, config: NetworkConfig, extra: dict | None = None) -> Path:
    """Write parameters byte-deterministically (sorted names, fixed header)."""
    path = Path(path)
    state = module.state_dict()
    names = sorted(state.keys())
    header = {
        "format": CKPT_MAGIC,
        "config": config.to_dict(),
        "params": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            arr = state[n].detach().cpu().numpy().astype("<f4")
            f.write(arr.tobytes(order="C"))
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as f:
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n).decode())
    if header.get("format") != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    return header


def load_checkpoint(path: str | Path, module: nn.Module) -> dict:
    """Restore parameters saved by save_checkpoint; returns the extra dict."""
    path = Path(path)
    with open(path, "rb") as f:
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n).decode())
        if header.get("format") != CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        state = module.state_dict()
        expect = sorted(state.keys())
        got = [p["name"] for p in header["params"]]
        if got != expect:
            raise ValueError(f"{path}: parameter names do not match the module")
        new_state = {}
        for p in header["params"]:
            shape = tuple(p["shape"])
            if shape != tuple(state[p["name"]].shape):
                raise ValueError(f"{path}: shape mismatch for {p['name']}")
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError(f"{path}: truncated parameter data")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            new_state[p["name"]] = torch.from_numpy(arr.copy())
    module.load_state_dict(new_state)
    return header.get("extra", {})
