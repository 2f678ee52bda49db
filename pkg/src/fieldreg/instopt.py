"""Instance optimization: fit a raw displacement field to one image pair.

Runs Adam directly on the field values under the same composite loss the
learned blocks train with. Serves as the feasibility oracle for phantom
experiments (what alignment the losses support, independent of any
network) and as a reference registration method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import DisplacementField
from .losses import DEFAULT_MI_BINS, LossWeights
from .training import AdamState, adam_step, field_loss_gradient
from .volume import Volume


@dataclass(frozen=True)
class InstOptConfig:
    iterations: int = 300
    lr: float = 0.5
    weights: LossWeights = LossWeights(alpha=1.0, lam=1.0, beta=1.0)
    mi_bins: int = DEFAULT_MI_BINS
    log_every: int = 0


def optimize_field(
    fixed: Volume,
    moving: Volume,
    fixed_soft: dict[str, np.ndarray],
    moving_soft: dict[str, np.ndarray],
    cfg: InstOptConfig = InstOptConfig(),
    init: DisplacementField | None = None,
):
    """Optimize a dense field for one pair; returns (field, loss history)."""
    grid = fixed.grid
    u = (init.u.astype(np.float32).copy() if init is not None
         else np.zeros((3, *grid.dims), dtype=np.float32))
    state = AdamState.for_weights([u], lr=cfg.lr)
    history: list[float] = []
    for it in range(cfg.iterations):
        field = DisplacementField(grid, u)
        report, g = field_loss_gradient(
            fixed, moving, moving_soft, fixed_soft, field, cfg.weights, cfg.mi_bins)
        history.append(report.total)
        adam_step(state, [u], [g])
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            print(f"  instopt iter {it + 1}: total {report.total:+.4f} "
                  f"mi {report.mi_term:+.4f} dice {report.dice_term:.4f} be {report.be_term:.5f}")
    return DisplacementField(grid, u), history
