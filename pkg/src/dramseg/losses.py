"""Training losses for interval-supervised dense regression.

Three terms drive training, combined by :func:`total_loss`:

* interval regression on the lobe-pooled lesion fraction, zero anywhere
  inside the target interval and quadratic outside it;
* an equivariance penalty between maps of transformed inputs and
  transformed maps of the original input;
* a soft-bootstrapping cross entropy against candidate-derived pseudo
  labels.

``interval_regression_loss`` and ``calibrate_interval`` are exact scalar
forms used both by tests and by the severity protocol; the torch variant
``interval_loss_torch`` is the differentiable twin used in training.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

LOG_CLAMP = 1e-8


@dataclass(frozen=True)
class Interval:
    """A closed target range [r_l, r_u] for a lesion fraction."""

    r_l: float
    r_u: float

    def __post_init__(self):
        if not (0.0 <= self.r_l <= self.r_u <= 1.0):
            raise ValueError(f"invalid interval [{self.r_l}, {self.r_u}]")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.r_l + self.r_u)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.r_u - self.r_l)


@dataclass(frozen=True)
class LossWeights:
    w_regression: float = 2.0
    w_equivariance: float = 1.0
    w_refinement: float = 1.0
    bootstrap_beta: float = 0.9


def interval_regression_loss(p: float, interval: Interval) -> tuple[float, float]:
    """Hinged squared distance of p from an interval, with its gradient.

    Returns ``(value, d value / d p)``. The loss is
    ``max(0, (p - mid)^2 - K)`` with ``K = half_width^2``: identically zero
    for p inside the interval (boundary included, where the gradient is
    also zero) and ``2 (p - mid)`` outside.
    """
    # factored form of (p - mid)^2 - half_width^2: identical algebra, but
    # exactly zero when p sits on an interval edge, where the midpoint form
    # can leave a one-ulp positive residue
    gap = (p - interval.r_l) * (p - interval.r_u)
    if gap <= 0.0:
        return 0.0, 0.0
    return gap, 2.0 * (p - interval.midpoint)


def interval_loss_torch(pooled: torch.Tensor, r_l: torch.Tensor, r_u: torch.Tensor) -> torch.Tensor:
    """Differentiable interval regression loss, elementwise then mean.

    relu'(0) = 0 in torch, so the gradient vanishes exactly at the
    interval boundary, matching the scalar form (same factored gap).
    """
    return torch.relu((pooled - r_l) * (pooled - r_u)).mean()


def calibrate_interval(interval: Interval, p_star: float) -> Interval:
    """Tighten a score interval around a candidate fraction estimate.

    The lower edge drops to p* - 0.05 when the estimate sits below the
    interval (floored at 0), the upper edge to p* + 0.05 when it sits
    above. An estimate inside the interval leaves it unchanged apart
    from the +-0.05 tightening.
    """
    if not 0.0 <= p_star <= 1.0:
        raise ValueError(f"p_star out of range: {p_star}")
    r_l = max(min(interval.r_l, p_star - 0.05), 0.0)
    r_u = min(interval.r_u, p_star + 0.05)
    if r_l > r_u:  # unreachable for valid inputs; kept as a guard
        r_l = r_u
    return Interval(r_l, r_u)


def equivariance_loss(map_of_transformed: torch.Tensor, transformed_map: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between two aligned activation maps."""
    if map_of_transformed.shape != transformed_map.shape:
        raise ValueError(
            f"shape mismatch {tuple(map_of_transformed.shape)} vs {tuple(transformed_map.shape)}"
        )
    return (map_of_transformed - transformed_map).abs().mean()


def bootstrap_loss(softmax_map: torch.Tensor, t_star: torch.Tensor, beta: float = 0.9) -> torch.Tensor:
    """Soft-bootstrapping cross entropy against one-hot pseudo labels.

    ``softmax_map`` is (C, ...) probabilities, ``t_star`` a one-hot
    tensor of the same shape. The per-voxel target mixes the pseudo
    label (weight beta) with the prediction's own argmax one-hot
    (weight 1 - beta); argmax ties resolve to the lowest channel.
    beta = 1 reduces to plain cross entropy.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta out of range: {beta}")
    if t_star.shape != softmax_map.shape:
        raise ValueError(f"t_star shape {tuple(t_star.shape)} != map shape {tuple(softmax_map.shape)}")
    t_star = t_star.to(softmax_map.dtype)
    if not bool(((t_star == 0.0) | (t_star == 1.0)).all()) or not bool((t_star.sum(dim=0) == 1.0).all()):
        raise ValueError("t_star must be one-hot along the channel dimension")
    logq = torch.log(softmax_map.clamp(min=LOG_CLAMP))
    # torch argmax picks the first maximal index, i.e. the lowest channel
    own = softmax_map.detach().argmax(dim=0, keepdim=True)
    z = torch.zeros_like(t_star).scatter_(0, own, 1.0)
    target = beta * t_star + (1.0 - beta) * z
    return -(target * logq).sum(dim=0).mean()


def total_loss(
    loss_reg: torch.Tensor,
    loss_er: torch.Tensor | None,
    loss_ref: torch.Tensor | None,
    weights: LossWeights = LossWeights(),
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the enabled loss terms plus a log-friendly breakdown."""
    total = weights.w_regression * loss_reg
    parts = {"loss_reg": float(loss_reg.detach())}
    if loss_er is not None:
        total = total + weights.w_equivariance * loss_er
        parts["loss_er"] = float(loss_er.detach())
    else:
        parts["loss_er"] = 0.0
    if loss_ref is not None:
        total = total + weights.w_refinement * loss_ref
        parts["loss_ref"] = float(loss_ref.detach())
    else:
        parts["loss_ref"] = 0.0
    parts["loss_total"] = float(total.detach())
    return total, parts
