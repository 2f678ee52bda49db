"""Evaluation metrics and table-style reporting.

Overlap is measured on hard labels (nearest-neighbor warping), keeping the
Dice coefficient strictly binary; folding is the percentage of voxels with
non-positive transform Jacobian determinant (det <= 0, counting local
collapse as folded). Aggregates report mean and population standard
deviation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ContractError, GridMismatchError, UndefinedOverlapError
from .fields import folding_fraction, jacobian, warp_mask_nearest
from .pipeline import PipelineModel, register_partial
from .regions import BLOCK_ORDER
from .training import LoadedPair, organ_labels
from .volume import LabelMask, Volume


def dsc(fixed_mask: np.ndarray, warped_mask: np.ndarray) -> float:
    """Dice coefficient of two binary masks, in [0, 1].

    Undefined (error) when both masks are empty; zero when only the fixed
    mask is empty.
    """
    if fixed_mask.shape != warped_mask.shape:
        raise GridMismatchError("dsc masks must share one shape")
    a = fixed_mask.astype(bool)
    b = warped_mask.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        raise UndefinedOverlapError("dsc undefined: both masks are empty")
    return 2.0 * int((a & b).sum()) / denom


@dataclass(frozen=True)
class PairEval:
    """One evaluated pair: per-organ Dice (fractions), folding, wall time."""

    per_organ: dict[str, float]
    folding: float
    seconds: float

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(list(self.per_organ.values()))) if self.per_organ else 0.0


@dataclass(frozen=True)
class EvalReport:
    """Aggregated column: percentages as (mean, population std) pairs."""

    per_organ: dict[str, tuple[float, float]]
    mean_dsc: tuple[float, float]
    folding_pct: tuple[float, float]
    runtime_s: tuple[float, float]
    cases: int
    std_convention: str = "population"

    def to_json(self) -> dict:
        return {
            "cases": self.cases,
            "std": self.std_convention,
            "per_organ_dsc_pct": {k: list(v) for k, v in self.per_organ.items()},
            "mean_dsc_pct": list(self.mean_dsc),
            "folding_pct": list(self.folding_pct),
            "runtime_s": list(self.runtime_s),
        }


def evaluate_pair(
    model: PipelineModel,
    pair: LoadedPair,
    organs: list[str],
    upto: str = BLOCK_ORDER[-1],
) -> PairEval:
    """Register one pair and score per-organ overlap plus field folding."""
    t0 = time.perf_counter()
    result = register_partial(model, pair.fixed, pair.moving, upto)
    seconds = time.perf_counter() - t0
    return score_field(result.total, pair, organs, seconds)


def score_field(total, pair: LoadedPair, organs: list[str], seconds: float = 0.0) -> PairEval:
    """Score an externally produced total field (e.g. truth injection)."""
    warped_mask = warp_mask_nearest(pair.moving_mask, total)
    fixed_labels = organ_labels(pair.fixed_mask, organs)
    moving_labels = organ_labels(pair.moving_mask, organs)
    per_organ = {}
    for name in organs:
        per_organ[name] = dsc(pair.fixed_mask.labels == fixed_labels[name],
                              warped_mask.labels == moving_labels[name])
    fold = folding_fraction(jacobian(total))
    return PairEval(per_organ, fold, seconds)


def unregistered_pair(pair: LoadedPair, organs: list[str]) -> PairEval:
    """The no-alignment baseline row."""
    fixed_labels = organ_labels(pair.fixed_mask, organs)
    moving_labels = organ_labels(pair.moving_mask, organs)
    per_organ = {
        name: dsc(pair.fixed_mask.labels == fixed_labels[name],
                  pair.moving_mask.labels == moving_labels[name])
        for name in organs
    }
    return PairEval(per_organ, 0.0, 0.0)


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate(rows: list[PairEval]) -> EvalReport:
    """Unweighted mean and population std over cases, as percentages."""
    if not rows:
        raise ContractError("aggregate needs at least one row")
    organs = list(rows[0].per_organ)
    per_organ = {}
    for name in organs:
        per_organ[name] = _mean_std([100.0 * r.per_organ[name] for r in rows])
    mean_dsc = _mean_std([100.0 * r.mean_dsc for r in rows])
    folding = _mean_std([100.0 * r.folding for r in rows])
    runtime = _mean_std([r.seconds for r in rows])
    return EvalReport(per_organ, mean_dsc, folding, runtime, len(rows))


def format_table(columns: dict[str, EvalReport]) -> str:
    """Aligned text table: organ rows, one method per column."""
    methods = list(columns)
    organs: list[str] = []
    for rep in columns.values():
        for o in rep.per_organ:
            if o not in organs:
                organs.append(o)
    width = max([len(o) for o in organs + ["Avg. DSC", "Avg. %Folding"]] or [8]) + 2
    colw = max(max((len(m) for m in methods), default=12) + 2, 16)

    def cell(ms: tuple[float, float]) -> str:
        return f"{ms[0]:.1f} ± {ms[1]:.1f}".rjust(colw)

    lines = ["".ljust(width) + "".join(m.rjust(colw) for m in methods)]
    for organ in organs:
        row = organ.ljust(width)
        for m in methods:
            ms = columns[m].per_organ.get(organ)
            row += cell(ms) if ms else "-".rjust(colw)
        lines.append(row)
    lines.append("Avg. DSC".ljust(width) + "".join(cell(columns[m].mean_dsc) for m in methods))
    lines.append("Avg. %Folding".ljust(width) + "".join(cell(columns[m].folding_pct) for m in methods))
    lines.append("Runtime [s]".ljust(width) + "".join(cell(columns[m].runtime_s) for m in methods))
    lines.append(f"(values: DSC percent, mean ± population std over "
                 f"{max(r.cases for r in columns.values())} cases)")
    return "\n".join(lines)


def to_csv(columns: dict[str, EvalReport]) -> str:
    lines = ["method,metric,mean,std"]
    for method, rep in columns.items():
        for organ, (m, s) in rep.per_organ.items():
            lines.append(f"{method},dsc_{organ},{m:.6g},{s:.6g}")
        lines.append(f"{method},dsc_mean,{rep.mean_dsc[0]:.6g},{rep.mean_dsc[1]:.6g}")
        lines.append(f"{method},folding_pct,{rep.folding_pct[0]:.6g},{rep.folding_pct[1]:.6g}")
        lines.append(f"{method},runtime_s,{rep.runtime_s[0]:.6g},{rep.runtime_s[1]:.6g}")
    return "\n".join(lines) + "\n"
