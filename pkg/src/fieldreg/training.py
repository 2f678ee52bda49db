"""Unsupervised per-block training: Adam updates, per-organ backward passes,
frozen-predecessor whole-body training, and gradient-check tooling.

One loss evaluation is split into sequential backward passes so only a
single activation tape is alive at a time: pass 0 carries the similarity
and smoothness terms, then one pass per organ carries its share of the
overlap term. The accumulated gradient equals the joint backward of the
full loss because the loss is additive.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, GridMismatchError
from .fields import (
    DisplacementField,
    accumulate,
    affine_to_field,
    warp,
    warp_array_with_grad,
    warp_with_grad,
)
from .losses import (
    DEFAULT_MI_BINS,
    LossReport,
    LossWeights,
    bending_energy,
    dice_loss,
    mi_loss,
)
from .regions import RegionSpec, canonical_regions
from .volume import Grid, LabelMask, Volume


@dataclass
class AdamState:
    """First/second moments per weight tensor plus the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_weights(cls, weights: list[np.ndarray], lr: float = 1e-4) -> "AdamState":
        return cls(m=[np.zeros_like(w) for w in weights],
                   v=[np.zeros_like(w) for w in weights], lr=lr)

    def save_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.asarray([self.step], dtype=np.int64),
               "hyper": np.asarray([self.lr, self.beta1, self.beta2, self.eps])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        n = sum(1 for k in arrays if k.startswith("m") and k != "m")
        hyper = arrays["hyper"]
        return cls(m=[arrays[f"m{i}"] for i in range(n)],
                   v=[arrays[f"v{i}"] for i in range(n)],
                   step=int(arrays["step"][0]),
                   lr=float(hyper[0]), beta1=float(hyper[1]),
                   beta2=float(hyper[2]), eps=float(hyper[3]))


def adam_step(state: AdamState, weights: list[np.ndarray], grads: list[np.ndarray]):
    """Bias-corrected Adam update, in place on the weight arrays."""
    if len(weights) != len(grads) or len(weights) != len(state.m):
        raise ContractError("adam_step: weights/grads/state lengths differ")
    for w, g, m in zip(weights, grads, state.m):
        if w.shape != g.shape or w.shape != m.shape:
            raise ContractError("adam_step: tensor shape mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for w, g, m, v in zip(weights, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return weights, state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    pairs_per_epoch: int = 400
    batch_size: int = 1
    weights: LossWeights = dc_field(default_factory=LossWeights)
    lr: float = 1e-4
    mi_bins: int = DEFAULT_MI_BINS
    seed: int = 0
    regions: RegionSpec = dc_field(default_factory=canonical_regions)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.pairs_per_epoch < 1:
            raise ContractError("epochs and pairs_per_epoch must be positive")
        if self.batch_size != 1:
            raise ContractError("batch size is fixed at 1")


@dataclass(frozen=True)
class PairEntry:
    fixed: str
    moving: str
    fixed_mask: str | None = None
    moving_mask: str | None = None

    def reversed(self) -> "PairEntry":
        return PairEntry(self.moving, self.fixed, self.moving_mask, self.fixed_mask)


@dataclass(frozen=True)
class PairManifest:
    """List of training/evaluation pairs; masks are required to train but
    not to register."""

    entries: tuple[PairEntry, ...]
    both_directions: bool = False

    def expanded(self) -> list[PairEntry]:
        out = list(self.entries)
        if self.both_directions:
            out.extend(e.reversed() for e in self.entries)
        return out

    def require_masks(self) -> None:
        for e in self.entries:
            if e.fixed_mask is None or e.moving_mask is None:
                raise ContractError(f"training needs masks for pair {e.fixed} / {e.moving}")

    def validate_files(self, base: Path | None = None) -> None:
        base = base or Path(".")
        for e in self.entries:
            for p in (e.fixed, e.moving, e.fixed_mask, e.moving_mask):
                if p is not None and not (base / p).exists():
                    raise ContractError(f"manifest file missing: {p}")

    def to_json(self) -> dict:
        return {
            "both_directions": self.both_directions,
            "pairs": [
                {k: v for k, v in (("fixed", e.fixed), ("moving", e.moving),
                                   ("fixed_mask", e.fixed_mask), ("moving_mask", e.moving_mask))
                 if v is not None}
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PairManifest":
        entries = tuple(
            PairEntry(p["fixed"], p["moving"], p.get("fixed_mask"), p.get("moving_mask"))
            for p in obj["pairs"])
        return cls(entries, bool(obj.get("both_directions", False)))

    @classmethod
    def load(cls, path) -> "PairManifest":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n",
                              encoding="utf-8")


def soft_masks(mask: LabelMask, organs: dict[str, int], dtype=np.float32) -> dict[str, np.ndarray]:
    """One binary {0,1} float channel per named organ label."""
    return {name: mask.indicator(lab, dtype=dtype) for name, lab in organs.items()}


def organ_labels(mask: LabelMask, organ_names) -> dict[str, int]:
    """Resolve organ names against a mask's label table."""
    out = {}
    for name in organ_names:
        out[name] = mask.label_for_name(name)
    return out


def field_loss_gradient(
    fixed: Volume,
    moving: Volume,
    moving_soft: dict[str, np.ndarray],
    fixed_soft: dict[str, np.ndarray],
    total_field: DisplacementField,
    w: LossWeights,
    bins: int = DEFAULT_MI_BINS,
    include_be: bool = True,
):
    """Full composite loss and its gradient w.r.t. the total field.

    Chains the MI and Dice gradients through the warp (sampled image
    gradients at the displaced positions) and adds the bending-energy
    gradient, which acts on the field directly.
    """
    if fixed.grid != total_field.grid:
        raise GridMismatchError("fixed volume and field must share one grid")
    warped, wgrad = warp_with_grad(moving, total_field)
    mi_v, mi_g = mi_loss(fixed, warped, bins)
    g_field = (w.alpha * mi_g) * wgrad

    per_organ: dict[str, float] = {}
    present = [n for n, m in fixed_soft.items() if float(m.sum()) > 0.0]
    dice_mean = 0.0
    if present:
        k = len(present)
        for name in present:
            sw, sgrad = warp_array_with_grad(moving_soft[name], total_field)
            dv, dg = dice_loss(fixed_soft[name], sw)
            per_organ[name] = dv
            dice_mean += dv / k
            g_field += (w.lam / k) * dg * sgrad
    be_v = None
    if include_be:
        be_v, be_g = bending_energy(total_field)
        g_field += w.beta * be_g
    total = w.alpha * mi_v + w.lam * dice_mean + (w.beta * be_v if include_be else 0.0)
    report = LossReport(total, mi_v, dice_mean, be_v, per_organ)
    return report, g_field.astype(total_field.u.dtype, copy=False)


# --- per-block training -------------------------------------------------------


@dataclass(frozen=True)
class LoadedPair:
    """One training pair resident in memory, preprocessed to one grid."""

    fixed: Volume
    moving: Volume
    fixed_mask: LabelMask
    moving_mask: LabelMask

    def __post_init__(self):
        grids = {self.fixed.grid, self.moving.grid, self.fixed_mask.grid, self.moving_mask.grid}
        if len(grids) != 1:
            raise GridMismatchError("pair images and masks must share one grid")
        if not (self.fixed.normalized and self.moving.normalized):
            raise ContractError("training pairs must be normalized (preprocess first)")


def load_manifest_pairs(manifest: PairManifest, base=None) -> list[LoadedPair]:
    """Materialize manifest entries; masks are mandatory for training."""
    from . import frv

    manifest.require_masks()
    base = Path(base) if base is not None else Path(".")
    out = []
    for e in manifest.expanded():
        out.append(LoadedPair(
            frv.load_volume(base / e.fixed), frv.load_volume(base / e.moving),
            frv.load_mask(base / e.fixed_mask), frv.load_mask(base / e.moving_mask)))
    return out


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed & (2 ** 64 - 1)),
                                                     np.uint64(epoch)]))


def _epoch_indices(n_pairs: int, count: int, seed: int, epoch: int) -> list[int]:
    """Uniform sampling without replacement, cycling through fresh
    permutations when the manifest is smaller than pairs_per_epoch."""
    rng = _epoch_rng(seed, epoch)
    out: list[int] = []
    while len(out) < count:
        out.extend(rng.permutation(n_pairs).tolist())
    return out[:count]


def _affine_upstream(g_field: np.ndarray) -> np.ndarray:
    """Project a field gradient onto the 12 affine parameters.

    The densified field is u_k(x) = sum_j dA[k, j] * x_j + dt[k], so the
    parameter gradients are coordinate-weighted sums of the field gradient.
    """
    _, nx, ny, nz = g_field.shape
    coords = (np.arange(nx), np.arange(ny), np.arange(nz))
    ga = np.empty((3, 3))
    gt = np.empty(3)
    for k in range(3):
        g = g_field[k].astype(np.float64, copy=False)
        ga[k, 0] = float((g.sum(axis=(1, 2)) * coords[0]).sum())
        ga[k, 1] = float((g.sum(axis=(0, 2)) * coords[1]).sum())
        ga[k, 2] = float((g.sum(axis=(0, 1)) * coords[2]).sum())
        gt[k] = float(g.sum())
    return np.concatenate([ga.ravel(), gt]).astype(g_field.dtype)


@dataclass
class _PairState:
    """Per-pair precomputation that stays valid while the prefix is frozen."""

    prefix: DisplacementField | None
    current: Volume
    fixed_soft: dict[str, np.ndarray]
    moving_soft: dict[str, np.ndarray]
    present: list[str]


def _prepare_pair(pair: LoadedPair, organs: Sequence[str], prefix_fn) -> _PairState:
    try:
        labels = organ_labels(pair.fixed_mask, organs)
    except KeyError as e:
        raise ContractError(f"organ missing from mask label table: {e}") from e
    organ_labels(pair.moving_mask, organs)
    prefix = prefix_fn(pair.fixed, pair.moving) if prefix_fn is not None else None
    current = warp(pair.moving, prefix) if prefix is not None else pair.moving
    fixed_soft = soft_masks(pair.fixed_mask, labels)
    moving_soft = soft_masks(pair.moving_mask, labels)
    present = [n for n in organs if float(fixed_soft[n].sum()) > 0.0]
    return _PairState(prefix, current, fixed_soft, moving_soft, present)


def _block_forward(bw, fixed: Volume, current: Volume):
    from .net import affine_forward, deformable_forward

    if bw.arch == "affine":
        params, tape = affine_forward(bw, fixed, current)
        field = affine_to_field(params, fixed.grid, dtype=np.float32)
        return field, tape
    return deformable_forward(bw, fixed, current)


def _pair_step(bw, state, ps: _PairState, pair: LoadedPair, cfg: TrainConfig):
    """One training step: a similarity/smoothness pass plus one backward
    pass per present organ, gradients accumulated, then one Adam update.

    Exactly one activation tape is alive at any moment; the accumulated
    gradient equals the joint backward of the full composite loss.
    """
    from .net import backward

    w = cfg.weights
    affine = bw.arch == "affine"
    grid = pair.fixed.grid

    def total_of(field: DisplacementField) -> DisplacementField:
        if ps.prefix is None:
            return field
        return DisplacementField(grid, ps.prefix.u + field.u)

    # pass 0: image similarity, plus smoothness when deformable
    field, tape = _block_forward(bw, pair.fixed, ps.current)
    total = total_of(field)
    warped, wgrad = warp_with_grad(pair.moving, total)
    mi_v, mi_g = mi_loss(pair.fixed, warped, cfg.mi_bins)
    g_field = (w.alpha * mi_g) * wgrad
    be_v = None
    if not affine:
        be_v, be_g = bending_energy(total)
        g_field += w.beta * be_g
    upstream = _affine_upstream(g_field) if affine else g_field
    grads = backward(tape, upstream)

    # passes 1..K: one organ's share of the overlap term each
    present = ps.present
    k = len(present)
    dice_mean = 0.0
    per_organ: dict[str, float] = {}
    for name in present:
        field_k, tape_k = _block_forward(bw, pair.fixed, ps.current)
        total_k = total_of(field_k)
        sw, sgrad = warp_array_with_grad(ps.moving_soft[name], total_k)
        dv, dg = dice_loss(ps.fixed_soft[name], np.clip(sw, 0.0, 1.0))
        per_organ[name] = dv
        dice_mean += dv / k
        g_field_k = (w.lam / k) * dg * sgrad
        upstream_k = _affine_upstream(g_field_k) if affine else g_field_k
        for g, gk in zip(grads, backward(tape_k, upstream_k)):
            g += gk

    flat = bw.flat()
    adam_step(state, flat, grads)
    total_loss = w.alpha * mi_v + w.lam * dice_mean + (w.beta * be_v if be_v is not None else 0.0)
    return LossReport(total_loss, mi_v, dice_mean, be_v, per_organ)


def train_block(
    bw,
    organs: Sequence[str],
    pairs: list[LoadedPair],
    cfg: TrainConfig,
    prefix_fn: Callable[[Volume, Volume], DisplacementField] | None = None,
    log_fn: Callable[[dict], None] | None = None,
    checkpoint_dir=None,
):
    """Train one block on preloaded pairs; returns (weights, log records).

    ``prefix_fn`` supplies the frozen accumulated field of earlier blocks;
    it is evaluated once per pair and cached, since frozen weights cannot
    change it during this run.
    """
    if not pairs:
        raise ContractError("training needs at least one pair")
    state = AdamState.for_weights(bw.flat(), lr=cfg.lr)
    cache: dict[int, _PairState] = {}
    log: list[dict] = []
    for epoch in range(cfg.epochs):
        for idx in _epoch_indices(len(pairs), cfg.pairs_per_epoch, cfg.seed, epoch):
            pair = pairs[idx]
            ps = cache.get(idx)
            if ps is None:
                ps = cache[idx] = _prepare_pair(pair, organs, prefix_fn)
            t0 = time.perf_counter()
            report = _pair_step(bw, state, ps, pair, cfg)
            rec = {
                "epoch": epoch, "pair_index": idx,
                "loss_total": report.total, "mi": report.mi_term,
                "dice": report.dice_term, "be": report.be_term,
                "seconds": round(time.perf_counter() - t0, 4),
            }
            log.append(rec)
            if log_fn is not None:
                log_fn(rec)
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            from .net import save_block

            ckpt = Path(checkpoint_dir)
            ckpt.mkdir(parents=True, exist_ok=True)
            save_block(bw, ckpt / f"epoch{epoch + 1:04d}.trw")
            np.savez(ckpt / f"epoch{epoch + 1:04d}.adam.npz", **state.save_arrays())
    return bw, log


def train_region_block(
    bw,
    region_organs: Sequence[str],
    pairs: list[LoadedPair],
    cfg: TrainConfig,
    frozen_prefix: Callable[[Volume, Volume], DisplacementField] | None = None,
    log_fn=None,
    checkpoint_dir=None,
):
    """Train a region block on its organs only; the prefix stays frozen."""
    return train_block(bw, region_organs, pairs, cfg, frozen_prefix, log_fn, checkpoint_dir)


def train_wholebody(model, pairs: list[LoadedPair], cfg: TrainConfig,
                    log_fn=None, checkpoint_dir=None):
    """Train the whole-body block on all organs, with the affine and the
    three region blocks frozen as its prefix."""
    from .pipeline import FrozenPrefix

    prefix = FrozenPrefix.from_model(model, "wholebody")
    organs = cfg.regions.all_organs
    bw = model.blocks["wholebody"]
    return train_block(bw, organs, pairs, cfg, prefix, log_fn, checkpoint_dir)


# --- gradient checking ---------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    results: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.results.values())


def _rel_err(fd: float, an: float) -> float:
    return abs(fd - an) / max(abs(fd), abs(an), 1e-9)


def _fd_probe(f, arr, analytic, rng, samples: int, step: float) -> float:
    worst = 0.0
    for _ in range(samples):
        idx = tuple(rng.integers(0, s) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        fp = f()
        arr[idx] = orig - step
        fm = f()
        arr[idx] = orig
        worst = max(worst, _rel_err((fp - fm) / (2 * step), analytic[idx]))
    return worst


def _check_mi(rng, trials, step):
    worst = 0.0
    for _ in range(trials):
        g = Grid((5, 5, 5))
        fixed = Volume(g, rng.random(g.dims), normalized=True)
        warped = rng.random(g.dims)
        _, grad = mi_loss(fixed, Volume(g, warped, normalized=True), bins=8)
        f = lambda: mi_loss(fixed, Volume(g, np.clip(warped, 0, 1), normalized=True), bins=8)[0]
        worst = max(worst, _fd_probe(f, warped, grad, rng, 20, step))
    return worst


def _check_dice(rng, trials, step):
    worst = 0.0
    for _ in range(trials):
        a = (rng.random((5, 5, 5)) > 0.5).astype(np.float64)
        b = rng.random((5, 5, 5))
        _, grad = dice_loss(a, b)
        worst = max(worst, _fd_probe(lambda: dice_loss(a, b)[0], b, grad, rng, 20, step))
    return worst


def _check_be(rng, trials, step):
    worst = 0.0
    for _ in range(trials):
        g = Grid((5, 6, 7))
        u = rng.standard_normal((3, *g.dims))
        _, grad = bending_energy(DisplacementField(g, u))
        f = lambda: bending_energy(DisplacementField(g, u))[0]
        worst = max(worst, _fd_probe(f, u, grad, rng, 20, step))
    return worst


def _check_warp_chain(rng, trials, step):
    worst = 0.0
    for _ in range(trials):
        g = Grid((5, 5, 5))
        fixed = Volume(g, rng.random(g.dims), normalized=True)
        moving = Volume(g, rng.random(g.dims), normalized=True)
        fs = {"o": (rng.random(g.dims) > 0.5).astype(np.float64)}
        ms = {"o": (rng.random(g.dims) > 0.5).astype(np.float64)}
        u = rng.standard_normal((3, *g.dims)) * 0.3
        _, grad = field_loss_gradient(fixed, moving, ms, fs,
                                      DisplacementField(g, u), LossWeights(), bins=8)
        f = lambda: field_loss_gradient(fixed, moving, ms, fs,
                                        DisplacementField(g, u.copy()),
                                        LossWeights(), bins=8)[0].total
        worst = max(worst, _fd_probe(f, u, grad, rng, 20, step))
    return worst


def _check_conv(rng, trials, step):
    from .net.convops import conv3d_backward, conv3d_forward

    worst = 0.0
    for t in range(trials):
        for stride, dims in ((1, (5, 4, 6)), (2, (6, 4, 8))):
            ci, co = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            x = rng.standard_normal((ci, *dims))
            w = rng.standard_normal((co, ci, 3, 3, 3)) * 0.3
            b = rng.standard_normal(co) * 0.1
            gy = rng.standard_normal(conv3d_forward(x, w, b, stride).shape)
            gx, gw, gb = conv3d_backward(x, w, stride, gy)
            probe = lambda: float((conv3d_forward(x, w, b, stride) * gy).sum())
            worst = max(worst,
                        _fd_probe(probe, x, gx, rng, 6, step),
                        _fd_probe(probe, w, gw, rng, 6, step),
                        _fd_probe(probe, b, gb, rng, 3, step))
    return worst


def _check_tconv(rng, trials, step):
    from .net.convops import tconv3d_backward, tconv3d_forward

    worst = 0.0
    for t in range(trials):
        ci, co = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        x = rng.standard_normal((ci, 3, 4, 5))
        w = rng.standard_normal((ci, co, 3, 3, 3)) * 0.3
        b = rng.standard_normal(co) * 0.1
        gy = rng.standard_normal(tconv3d_forward(x, w, b).shape)
        gx, gw, gb = tconv3d_backward(x, w, gy)
        probe = lambda: float((tconv3d_forward(x, w, b) * gy).sum())
        worst = max(worst,
                    _fd_probe(probe, x, gx, rng, 6, step),
                    _fd_probe(probe, w, gw, rng, 6, step),
                    _fd_probe(probe, b, gb, rng, 3, step))
    return worst


def _check_leaky_relu(rng, trials, step):
    from .net.convops import leaky_relu_backward, leaky_relu_forward

    worst = 0.0
    for _ in range(trials):
        # keep inputs off the kink so central differences are exact
        x = rng.uniform(0.05, 1.0, size=(4, 5, 6, 7)) * rng.choice([-1.0, 1.0], size=(4, 5, 6, 7))
        gy = rng.standard_normal(x.shape)
        _, mask = leaky_relu_forward(x)
        gx = leaky_relu_backward(mask, 0.2, gy)
        probe = lambda: float((leaky_relu_forward(x)[0] * gy).sum())
        worst = max(worst, _fd_probe(probe, x, gx, rng, 20, step))
    return worst


def checking_weights(arch: str, seed: int):
    """Weights for finite-difference checks of whole blocks: unit-gain
    uniform weights so gradients survive the depth, with alternating bias
    offsets that thin out pre-activations near the leaky-relu kink."""
    from .net import init_weights

    rng = np.random.default_rng(seed)
    bw = init_weights(arch, seed, dtype=np.float64)
    for spec, tensors in zip(bw.layers, bw.params):
        if not tensors:
            continue
        w, b = tensors
        fan_in = spec.in_channels * (27 if spec.kind != "global_head" else 1)
        w[...] = rng.uniform(-1.0, 1.0, w.shape) * np.sqrt(3.0 / fan_in)
        if spec.kind == "global_head":
            b[...] = rng.uniform(-0.01, 0.01, b.shape)
        else:
            b[...] = np.where(np.arange(b.size) % 2 == 0, 0.3, -0.3)
    return bw


_FD_STEP_LADDER = (1e-4, 1e-5, 1e-6, 1e-7)


def _masks_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _check_block(arch: str, rng, trials, step):
    """Probe every weight tensor of a full block against central FD.

    The blocks are piecewise linear in each weight (leaky-relu kinks), so
    a probe is only meaningful when both FD evaluations stay on the base
    point's linear piece. Each probe verifies that the activation sign
    pattern is unchanged at +-h, shrinking h from the requested step until
    it is; on a fixed pattern the map is exactly linear in the weight, so
    the comparison checks the true analytic derivative.
    """
    from .net import affine_forward, backward, deformable_forward

    worst = 0.0
    g = Grid((16, 16, 16))
    for t in range(trials):
        bw = checking_weights(arch, 100 + t)
        fixed = Volume(g, rng.random(g.dims), normalized=True)
        moving = Volume(g, rng.random(g.dims), normalized=True)

        def run():
            if arch == "deformable":
                out, tape = deformable_forward(bw, fixed, moving)
                value = out.u
            else:
                params, tape = affine_forward(bw, fixed, moving)
                value = np.concatenate([(params.linear - np.eye(3)).ravel(),
                                        params.translation])
            masks = [saved for (li, saved) in tape.entries
                     if bw.layers[li].kind == "leaky_relu"]
            tape.release()
            return value, masks

        if arch == "deformable":
            out, tape = deformable_forward(bw, fixed, moving)
            gy = rng.standard_normal(out.u.shape)
        else:
            out, tape = affine_forward(bw, fixed, moving)
            gy = rng.standard_normal(12)
        grads = backward(tape, gy)
        _, masks0 = run()

        for wt, gt_ in zip(bw.flat(), grads):
            probes = 0
            attempts = 0
            while probes < 3 and attempts < 30:
                attempts += 1
                idx = tuple(rng.integers(0, s) for s in wt.shape)
                orig = wt[idx]
                fd = None
                for h in _FD_STEP_LADDER:
                    if h > step:
                        continue
                    wt[idx] = orig + h
                    vp, mp = run()
                    wt[idx] = orig - h
                    vm, mm = run()
                    wt[idx] = orig
                    if _masks_equal(mp, masks0) and _masks_equal(mm, masks0):
                        fd = float(((vp - vm) * gy).sum()) / (2 * h)
                        break
                if fd is None:
                    continue
                probes += 1
                worst = max(worst, _rel_err(fd, gt_[idx]))
    return worst


_GRAD_CHECKS: dict[str, Callable] = {
    "mi_loss": _check_mi,
    "dice_loss": _check_dice,
    "bending_energy": _check_be,
    "warp_chain": _check_warp_chain,
    "conv": _check_conv,
    "tconv": _check_tconv,
    "leaky_relu": _check_leaky_relu,
    "affine_block": lambda rng, trials, step: _check_block("affine", rng, trials, step),
    "deformable_block": lambda rng, trials, step: _check_block("deformable", rng, trials, step),
}


def grad_check(component: str = "all", trials: int = 2, tolerance: float = 1e-4,
               step: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against float64 central differences.

    Block checks probe every weight tensor at sampled entries; losses and
    layer kinds are probed on small random instances.
    """
    names = list(_GRAD_CHECKS) if component == "all" else [component]
    unknown = [n for n in names if n not in _GRAD_CHECKS]
    if unknown:
        raise ContractError(f"unknown grad-check components {unknown}; "
                            f"known: {sorted(_GRAD_CHECKS)}")
    results = {}
    for name in names:
        rng = np.random.default_rng(seed + 17)
        results[name] = float(_GRAD_CHECKS[name](rng, trials, step))
    return GradCheckReport(results, tolerance)
