"""Differentiable loss terms: mutual information, Dice overlap, bending energy.

Every loss returns ``(value, gradient)`` with the gradient taken with
respect to the quantity the optimizer can move: warped intensities for MI,
warped soft masks for Dice, field components for bending energy. Gradients
never flow into the fixed image; its histogram marginal is a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import (
    ContractError,
    GridMismatchError,
    InvalidRangeError,
    TooSmallGridError,
    UndefinedOverlapError,
)
from .fields import DisplacementField
from .volume import Volume

DEFAULT_MI_BINS = 32
_LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite loss: alpha * MI + lam * Dice + beta * BE."""

    alpha: float = 1.0
    lam: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name, v in (("alpha", self.alpha), ("lam", self.lam), ("beta", self.beta)):
            if not np.isfinite(v) or v < 0:
                raise InvalidRangeError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class JointHistogram:
    """Parzen-window joint intensity distribution of a fixed/warped pair."""

    bins: int
    joint: np.ndarray    # (bins, bins), sums to 1
    p_fixed: np.ndarray  # row marginal
    p_moving: np.ndarray  # column marginal
    kernel: str = "linear-parzen"


@dataclass(frozen=True)
class LossReport:
    """Per-term loss values; ``total`` is the weighted sum of the terms."""

    total: float
    mi_term: float
    dice_term: float
    be_term: float | None
    per_organ_dice: dict[str, float] = dc_field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "mi": self.mi_term,
            "dice": self.dice_term,
            "be": self.be_term,
            "per_organ": dict(self.per_organ_dice),
        }


@dataclass(frozen=True)
class LossGradients:
    """Raw per-term gradients, unweighted, for the training module to chain."""

    d_warped: np.ndarray
    d_warped_masks: dict[str, np.ndarray]
    d_field: np.ndarray | None


def _parzen_assign(values: np.ndarray, bins: int):
    """Linear (hat) window bin assignment on [0, 1].

    Returns (lower bin index, upper-bin weight, derivative mask). Each value
    spreads over two adjacent bins with weights (1-f, f); weight pairs always
    sum to one, including at the range edges where the window saturates.
    """
    t = values.astype(np.float64, copy=False) * bins - 0.5
    i = np.clip(np.floor(t), 0, bins - 2).astype(np.intp)
    raw = t - i
    f = np.clip(raw, 0.0, 1.0)
    active = (raw > 0.0) & (raw < 1.0)
    return i, f, active


def joint_histogram(fixed: Volume, warped: Volume, bins: int = DEFAULT_MI_BINS) -> JointHistogram:
    """Joint Parzen histogram of two normalized volumes on one grid."""
    _check_mi_inputs(fixed, warped, bins)
    iF, fF, _ = _parzen_assign(fixed.samples.ravel(), bins)
    iW, fW, _ = _parzen_assign(warped.samples.ravel(), bins)
    n = fixed.grid.voxel_count
    flat = np.zeros(bins * bins, dtype=np.float64)
    for dF, wF in ((0, 1.0 - fF), (1, fF)):
        for dW, wW in ((0, 1.0 - fW), (1, fW)):
            idx = (iF + dF) * bins + (iW + dW)
            flat += np.bincount(idx, weights=wF * wW, minlength=bins * bins)
    joint = flat.reshape(bins, bins) / n
    return JointHistogram(bins, joint, joint.sum(axis=1), joint.sum(axis=0))


def _check_mi_inputs(fixed: Volume, warped: Volume, bins: int) -> None:
    if fixed.grid != warped.grid:
        raise GridMismatchError("MI inputs must share one grid")
    if not (fixed.normalized and warped.normalized):
        raise ContractError("MI requires volumes normalized to [0, 1]")
    if bins < 2:
        raise InvalidRangeError(f"MI needs at least 2 bins, got {bins}")


def mi_value(hist: JointHistogram) -> float:
    """Mutual information in bits of a joint histogram."""
    p = hist.joint
    outer = hist.p_fixed[:, None] * hist.p_moving[None, :]
    nz = p > 0.0
    return float(np.sum(p[nz] * np.log2(p[nz] / outer[nz])))


def mi_loss(fixed: Volume, warped: Volume, bins: int = DEFAULT_MI_BINS):
    """Negative mutual information and its gradient w.r.t. warped samples.

    Minimizing the returned value maximizes MI. The gradient accounts for
    the dependence of both the joint and the moving marginal on the warped
    intensities; the fixed marginal is constant.
    """
    hist = joint_histogram(fixed, warped, bins)
    value = -mi_value(hist)

    p = hist.joint
    outer = hist.p_fixed[:, None] * hist.p_moving[None, :]
    logterm = np.zeros_like(p)
    nz = p > 0.0
    logterm[nz] = np.log(p[nz] / outer[nz])

    iF, fF, _ = _parzen_assign(fixed.samples.ravel(), bins)
    iW, fW, activeW = _parzen_assign(warped.samples.ravel(), bins)
    n = fixed.grid.voxel_count
    flatlog = logterm.ravel()

    def lt(dF, dW):
        return flatlog[(iF + dF) * bins + (iW + dW)]

    bracket = (1.0 - fF) * (lt(0, 1) - lt(0, 0)) + fF * (lt(1, 1) - lt(1, 0))
    grad = (-(bins / (n * _LN2)) * activeW * bracket).reshape(fixed.grid.dims)
    return value, grad.astype(warped.samples.dtype, copy=False)


def dice_loss(fixed_soft: np.ndarray, warped_soft: np.ndarray):
    """Soft Dice loss 1 - 2|F.W| / (|F| + |W|) and gradient w.r.t. warped."""
    if fixed_soft.shape != warped_soft.shape:
        raise GridMismatchError("dice masks must share one shape")
    a = fixed_soft.astype(np.float64, copy=False)
    b = warped_soft.astype(np.float64, copy=False)
    inter = float((a * b).sum())
    denom = float(a.sum() + b.sum())
    if denom == 0.0:
        raise UndefinedOverlapError("dice undefined: both masks are empty")
    value = 1.0 - 2.0 * inter / denom
    grad = (2.0 * inter / denom ** 2) - (2.0 / denom) * a
    return value, grad.astype(warped_soft.dtype, copy=False)


_DIAG_STENCIL = ((1, 1.0), (0, -2.0), (-1, 1.0))
_MIXED_STENCIL = ((1, 1, 0.25), (1, -1, -0.25), (-1, 1, -0.25), (-1, -1, 0.25))


def _shift_view(arr: np.ndarray, offset: tuple[int, int, int]) -> np.ndarray:
    sl = tuple(slice(1 + o, n - 1 + o) for o, n in zip(offset, arr.shape))
    return arr[sl]


def bending_energy(f: DisplacementField):
    """Mean squared Frobenius norm of each component's Hessian.

    Second-order central differences; mixed partials by nested central
    differences. Boundary voxels are excluded from the sum but the
    normalizer stays the full voxel count. Gradient via the adjoint stencil.
    """
    dims = f.grid.dims
    if any(d < 3 for d in dims):
        raise TooSmallGridError(f"bending energy needs dims >= 3 per axis, got {dims}")
    n_total = f.grid.voxel_count
    u = f.u.astype(np.float64, copy=False)
    value = 0.0
    grad = np.zeros_like(u)

    axes_offsets = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
    for k in range(3):
        c = u[k]
        gk = grad[k]
        # diagonal entries d2/da2
        for a in range(3):
            off = axes_offsets[a]
            h = np.zeros(tuple(d - 2 for d in dims))
            for s, coef in _DIAG_STENCIL:
                h += coef * _shift_view(c, tuple(s * o for o in off))
            value += float((h * h).sum())
            t = (2.0 / n_total) * h
            for s, coef in _DIAG_STENCIL:
                _shift_view(gk, tuple(s * o for o in off))[...] += coef * t
        # mixed entries d2/dadb, each counted twice in the Frobenius norm
        for a in range(3):
            for b in range(a + 1, 3):
                oa, ob = axes_offsets[a], axes_offsets[b]
                h = np.zeros(tuple(d - 2 for d in dims))
                for sa, sb, coef in _MIXED_STENCIL:
                    o = tuple(sa * x + sb * y for x, y in zip(oa, ob))
                    h += coef * _shift_view(c, o)
                value += 2.0 * float((h * h).sum())
                t = (4.0 / n_total) * h
                for sa, sb, coef in _MIXED_STENCIL:
                    o = tuple(sa * x + sb * y for x, y in zip(oa, ob))
                    _shift_view(gk, o)[...] += coef * t
    value /= n_total
    return value, grad.astype(f.u.dtype, copy=False)


def _aggregate_dice(fixed_masks: dict[str, np.ndarray], warped_masks: dict[str, np.ndarray]):
    """Unweighted mean Dice loss over organs present in the fixed masks."""
    per_organ: dict[str, float] = {}
    grads: dict[str, np.ndarray] = {}
    present = [name for name, m in fixed_masks.items() if float(m.sum()) > 0.0]
    for name in present:
        v, g = dice_loss(fixed_masks[name], warped_masks[name])
        per_organ[name] = v
        grads[name] = g
    if not present:
        return 0.0, per_organ, grads
    k = len(present)
    mean = sum(per_organ.values()) / k
    for name in grads:
        grads[name] = grads[name] / k
    return mean, per_organ, grads


def deformable_loss(
    fixed: Volume,
    warped: Volume,
    fixed_masks: dict[str, np.ndarray],
    warped_masks: dict[str, np.ndarray],
    f: DisplacementField,
    w: LossWeights,
    bins: int = DEFAULT_MI_BINS,
):
    """Composite loss alpha*MI + lam*Dice + beta*BE with per-term gradients."""
    mi_v, mi_g = mi_loss(fixed, warped, bins)
    dice_v, per_organ, dice_g = _aggregate_dice(fixed_masks, warped_masks)
    be_v, be_g = bending_energy(f)
    total = w.alpha * mi_v + w.lam * dice_v + w.beta * be_v
    report = LossReport(total, mi_v, dice_v, be_v, per_organ)
    return report, LossGradients(mi_g, dice_g, be_g)


def affine_loss(
    fixed: Volume,
    warped: Volume,
    fixed_masks: dict[str, np.ndarray],
    warped_masks: dict[str, np.ndarray],
    w: LossWeights,
    bins: int = DEFAULT_MI_BINS,
):
    """Composite loss for the affine stage: the smoothness term is omitted."""
    mi_v, mi_g = mi_loss(fixed, warped, bins)
    dice_v, per_organ, dice_g = _aggregate_dice(fixed_masks, warped_masks)
    total = w.alpha * mi_v + w.lam * dice_v
    report = LossReport(total, mi_v, dice_v, None, per_organ)
    return report, LossGradients(mi_g, dice_g, None)
