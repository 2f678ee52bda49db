"""Acceptance gate: every criterion prints one pass/fail line.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines as they
complete. Criteria 6 and 7 train the scaled five-block pipeline on a
ten-pair phantom suite and take a few hours on a small CPU; everything
else finishes in minutes.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from fieldreg.errors import ChecksumError
from fieldreg.evaluate import aggregate, evaluate_pair, score_field, unregistered_pair
from fieldreg.fields import (
    AffineParams,
    DisplacementField,
    affine_to_field,
    folding_fraction,
    jacobian,
    warp_array_with_grad,
    warp_with_grad,
)
from fieldreg.instopt import InstOptConfig, optimize_field
from fieldreg.losses import (
    LossWeights,
    bending_energy,
    dice_loss,
    joint_histogram,
    mi_loss,
    mi_value,
)
from fieldreg.net import (
    TapeContext,
    affine_forward,
    backward,
    deformable_forward,
    init_weights,
)
from fieldreg.phantom import (
    DeformationSpec,
    default_phantom_spec,
    make_pair,
    regions_of_spec,
)
from fieldreg.pipeline import FrozenPrefix, PipelineModel, export_model, import_model, register
from fieldreg.regions import REGION_BLOCKS
from fieldreg.training import (
    LoadedPair,
    TrainConfig,
    field_loss_gradient,
    grad_check,
    organ_labels,
    soft_masks,
    train_block,
    train_wholebody,
)
from fieldreg.volume import Grid, Volume

from conftest import random_volume

SUITE_GRID = Grid((64, 48, 80))
SUITE_AMPLITUDE = 22.0
SUITE_SIGMA = 14.0
SUITE_PAIRS = 10

# Scaled training protocol: epochs/pairs are fixed by the criterion; the
# optimizer step and loss weights were calibrated with the instance-
# optimization oracle and pilot runs (the paper's lr targets a 160k-step
# full-scale schedule, not 500 steps).
TRAIN_EPOCHS = 50
TRAIN_PAIRS_PER_EPOCH = 10
TRAIN_LR = 2e-3
TRAIN_WEIGHTS = LossWeights(alpha=1.0, lam=1.0, beta=0.5)
ORACLE = InstOptConfig(iterations=200, lr=0.5, weights=TRAIN_WEIGHTS)


def criterion(num, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}", flush=True)
    return ok


@pytest.fixture(scope="session")
def suite():
    spec = default_phantom_spec(SUITE_GRID, organs_per_region=1)
    organs = [o.name for o in spec.organs]
    pairs = []
    for seed in range(SUITE_PAIRS):
        p = make_pair(spec, DeformationSpec(SUITE_AMPLITUDE, SUITE_SIGMA), seed=seed)
        pairs.append(LoadedPair(p.fixed, p.moving, p.fixed_mask, p.moving_mask))
    return spec, regions_of_spec(spec), organs, pairs


@pytest.fixture(scope="session")
def trained(suite):
    """The full scaled training protocol; shared by criteria 6 and 7."""
    spec, regions, organs, pairs = suite
    model = PipelineModel.zero_init(SUITE_GRID, regions, seed=42)
    cfg = lambda seed: TrainConfig(
        epochs=TRAIN_EPOCHS, pairs_per_epoch=TRAIN_PAIRS_PER_EPOCH,
        weights=TRAIN_WEIGHTS, lr=TRAIN_LR, seed=seed, regions=regions)
    t0 = time.time()
    train_block(model.blocks["affine"], organs, pairs, cfg(7))
    for block in REGION_BLOCKS:
        prefix = FrozenPrefix([("affine", model.blocks["affine"])], model.grid)
        train_block(model.blocks[block], regions.organs_for_block(block),
                    pairs, cfg(8), prefix_fn=prefix)
    train_wholebody(model, pairs, cfg(9))
    return model, (time.time() - t0) / 3600.0


def test_criterion_1_gradient_suite():
    t0 = time.time()
    report = grad_check("all", trials=2, tolerance=1e-4, step=1e-4, seed=0)
    elapsed = time.time() - t0
    worst = max(report.results.values())
    ok = report.passed and elapsed < 300
    assert criterion(1, ok,
                     f"losses, every layer kind, and full blocks vs central FD: "
                     f"max rel err {worst:.2e} (< 1e-4) in {elapsed:.0f}s (< 300s)")


def test_criterion_2_per_organ_backward_equivalence():
    spec = default_phantom_spec(Grid((16, 16, 32)), organs_per_region=1)
    p = make_pair(spec, DeformationSpec(1.5, 4.0), seed=0)
    organs = [o.name for o in spec.organs]
    assert len(organs) == 3
    labels = organ_labels(p.fixed_mask, organs)
    fs = soft_masks(p.fixed_mask, labels, dtype=np.float64)
    ms = soft_masks(p.moving_mask, labels, dtype=np.float64)
    fixed = p.fixed.with_samples(p.fixed.samples.astype(np.float64))
    moving = p.moving.with_samples(p.moving.samples.astype(np.float64))
    w = LossWeights(1.0, 1.0, 0.5)
    rng = np.random.default_rng(0)
    bw = init_weights("deformable", seed=2, dtype=np.float64)
    for t in bw.params[-1]:
        t += rng.uniform(-0.01, 0.01, t.shape)
    k = len(organs)

    TapeContext.reset_peak()
    field, tape = deformable_forward(bw, fixed, moving)
    warped, wgrad = warp_with_grad(moving, field)
    _, mi_g = mi_loss(fixed, warped, bins=16)
    _, be_g = bending_energy(field)
    acc = backward(tape, w.alpha * mi_g * wgrad + w.beta * be_g)
    for name in organs:
        field_k, tape_k = deformable_forward(bw, fixed, moving)
        sw, sgrad = warp_array_with_grad(ms[name], field_k)
        _, dg = dice_loss(fs[name], sw)
        for a, b in zip(acc, backward(tape_k, (w.lam / k) * dg * sgrad)):
            a += b
    peak = TapeContext.peak_live()

    field_j, tape_j = deformable_forward(bw, fixed, moving)
    _, g_total = field_loss_gradient(fixed, moving, ms, fs, field_j, w, bins=16)
    joint = backward(tape_j, g_total)
    worst = 0.0
    for a, b in zip(acc, joint):
        denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
        worst = max(worst, float(np.abs(a - b).max() / denom))
    ok = worst < 1e-6 and peak <= 1
    assert criterion(2, ok,
                     f"accumulated per-organ grads vs joint backward on 16x16x32, "
                     f"3 organs: max rel diff {worst:.2e} (< 1e-6), peak live tapes {peak} (<= 1)")


def test_criterion_3_identity_pipeline(suite):
    spec, regions, organs, pairs = suite
    model = PipelineModel.zero_init(SUITE_GRID, regions, seed=0)
    pair = pairs[0]
    result = register(model, pair.fixed, pair.moving)
    zero_field = not result.total.u.any()
    warped_identical = np.array_equal(result.warped.samples, pair.moving.samples)
    fold = folding_fraction(jacobian(result.total))
    row = evaluate_pair(model, pair, organs)
    base = unregistered_pair(pair, organs)
    dsc_match = row.per_organ == base.per_organ
    ok = zero_field and warped_identical and fold == 0.0 and dsc_match
    assert criterion(3, ok,
                     f"zero-init model: field bitwise zero {zero_field}, warped==moving "
                     f"{warped_identical}, folding {fold}, DSC equals unregistered {dsc_match}")


def test_criterion_4_jacobian_anchors(rng):
    g = Grid((9, 7, 7))
    u = np.zeros((3, *g.dims))
    u[0] = 0.5 * np.arange(9)[:, None, None]
    det = jacobian(DisplacementField(g, u)).det
    expand_err = float(np.abs(det[1:-1] - 1.5).max())

    u2 = np.zeros((3, *g.dims))
    u2[0] = -2.0 * np.arange(9)[:, None, None]
    det2 = jacobian(DisplacementField(g, u2)).det
    reverse_err = float(np.abs(det2[1:-1] + 1.0).max())
    interior_fold = float(np.mean(det2[1:-1, 1:-1, 1:-1] <= 0.0))

    be_worst = 0.0
    for seed in range(5):
        r = np.random.default_rng(seed)
        a = AffineParams(np.eye(3) + r.standard_normal((3, 3)) * 0.2,
                         r.standard_normal(3) * 3)
        value, _ = bending_energy(affine_to_field(a, Grid((8, 8, 8)), dtype=np.float64))
        be_worst = max(be_worst, abs(value))

    ok = expand_err < 1e-6 and reverse_err < 1e-6 and interior_fold == 1.0 and be_worst < 1e-9
    assert criterion(4, ok,
                     f"linear-field det errs {expand_err:.1e}/{reverse_err:.1e} (< 1e-6), "
                     f"interior folding {interior_fold}, affine bending energy {be_worst:.1e} (< 1e-9)")


def test_criterion_5_mi_anchors():
    g = Grid((8, 8, 8))
    rng = np.random.default_rng(3)
    const = Volume(g, np.full(g.dims, 0.5), normalized=True)
    any_img = Volume(g, rng.random(g.dims), normalized=True)
    v0, g0 = mi_loss(const, any_img, bins=16)
    const_ok = abs(v0) < 1e-9 and not g0.any()

    h = np.zeros((4, 4, 4))
    h[:2] = 1.0
    vh = Volume(Grid((4, 4, 4)), h, normalized=True)
    bit, _ = mi_loss(vh, vh, bins=2)
    bit_ok = abs(bit + 1.0) < 1e-9

    perm_ok = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        data = r.random(g.dims)
        v = Volume(g, data, normalized=True)
        p = Volume(g, r.permutation(data.ravel()).reshape(g.dims), normalized=True)
        perm_ok &= (mi_value(joint_histogram(v, v, 16))
                    >= mi_value(joint_histogram(v, p, 16)))

    ok = const_ok and bit_ok and perm_ok
    assert criterion(5, ok,
                     f"constant-fixed MI {v0:.1e} (0), half/half 2-bin loss {bit:.9f} (-1), "
                     f"self >= permuted on 20 seeded volumes: {perm_ok}")


@pytest.mark.slow
def test_criterion_6_phantom_end_to_end(suite, trained):
    spec, regions, organs, pairs = suite
    t0 = time.time()

    unreg = aggregate([unregistered_pair(p, organs) for p in pairs])
    band_ok = 55.0 <= unreg.mean_dsc[0] <= 70.0

    # feasibility oracle: direct field optimization with the same losses
    oracle_scores = []
    for p in pairs:
        labels = organ_labels(p.fixed_mask, organs)
        fs = soft_masks(p.fixed_mask, labels)
        ms = soft_masks(p.moving_mask, labels)
        field, _ = optimize_field(p.fixed, p.moving, fs, ms, ORACLE)
        oracle_scores.append(score_field(field, p, organs).mean_dsc)
    oracle_mean = float(np.mean(oracle_scores))
    oracle_ok = oracle_mean > 0.9

    model, train_hours = trained
    rows = [evaluate_pair(model, p, organs) for p in pairs]
    rep = aggregate(rows)
    good = sum(1 for r in rows if r.mean_dsc > 0.85 and r.folding < 0.01)
    hours = train_hours + (time.time() - t0) / 3600.0
    ok = band_ok and oracle_ok and good >= 8 and hours <= 4.0
    assert criterion(6, ok,
                     f"unregistered {unreg.mean_dsc[0]:.1f}% (in [55, 70]), oracle "
                     f"{100 * oracle_mean:.1f}% (> 90), trained mean {rep.mean_dsc[0]:.1f}% "
                     f"folding {rep.folding_pct[0]:.2f}%, pairs with DSC>0.85 & folding<1%: "
                     f"{good}/10 (>= 8), runtime {hours:.2f} h (<= 4)")


@pytest.mark.slow
def test_criterion_7_ablation_regions(suite, trained):
    spec, regions, organs, pairs = suite
    model, _ = trained
    organ_region = {o.name: o.region for o in spec.organs}

    def region_means(m):
        rows = [evaluate_pair(m, p, organs) for p in pairs]
        out = {}
        for organ in organs:
            out[organ_region[organ]] = float(np.mean([r.per_organ[organ] for r in rows]))
        return out

    def with_blocks(names):
        blocks = {}
        for i, n in enumerate(("affine",) + REGION_BLOCKS + ("wholebody",)):
            if n in names:
                blocks[n] = model.blocks[n]
            else:
                arch = "affine" if n == "affine" else "deformable"
                blocks[n] = init_weights(arch, seed=900 + i)
        return PipelineModel(blocks, SUITE_GRID, regions)

    base = region_means(with_blocks(["affine"]))
    ok = True
    details = []
    for block in REGION_BLOCKS:
        gains = {r: v - base[r] for r, v in region_means(with_blocks(["affine", block])).items()}
        own = gains.pop(block)
        best_other = max(gains.values())
        ok &= own > best_other
        details.append(f"{block}: own {100 * own:+.1f}% vs best other {100 * best_other:+.1f}%")
    assert criterion(7, ok, "each region block helps its own region most (" + "; ".join(details) + ")")


def test_criterion_8_shape_anchors(rng):
    g = Grid((128, 96, 160))
    fixed = random_volume(rng, g, dtype=np.float32)
    moving = random_volume(rng, g, dtype=np.float32)
    bw = init_weights("deformable", seed=1)
    field, tape = deformable_forward(bw, fixed, moving, record=False)
    field_ok = field.u.shape == (3, 128, 96, 160)
    coarse = tape.meta["encoder_dims"][-1]
    coarse_ok = coarse == (8, 6, 10)
    ba = init_weights("affine", seed=1)
    params, tape_a = affine_forward(ba, fixed, moving, record=False)
    count = tape_a.meta["param_count"]
    affine_ok = count == 12 and params.params12().shape == (12,)
    ok = field_ok and coarse_ok and affine_ok
    assert criterion(8, ok,
                     f"field {field.u.shape} on 128x96x160, coarsest encoder {coarse} "
                     f"(8, 6, 10), affine head emits {count} params (12)")


_RUNTIME_SCRIPT = """
import time
import numpy as np
from fieldreg.phantom import default_phantom_spec, make_pair, DeformationSpec, regions_of_spec
from fieldreg.pipeline import PipelineModel, register
from fieldreg.volume import Grid

grid = Grid((128, 96, 160))
spec = default_phantom_spec(grid, organs_per_region=1)
pair = make_pair(spec, DeformationSpec(10.0, 20.0), seed=0)
model = PipelineModel.zero_init(grid, regions_of_spec(spec), seed=1)
register(model, pair.fixed, pair.moving)  # warm scratch buffers
t0 = time.perf_counter()
register(model, pair.fixed, pair.moving)
print(f"ELAPSED {time.perf_counter() - t0:.2f}")
"""


def test_criterion_9_single_thread_runtime():
    env = dict(os.environ, OPENBLAS_NUM_THREADS="1", OMP_NUM_THREADS="1",
               MKL_NUM_THREADS="1")
    out = subprocess.run([sys.executable, "-c", _RUNTIME_SCRIPT], env=env,
                         capture_output=True, text=True, timeout=900)
    assert out.returncode == 0, out.stderr
    line = [l for l in out.stdout.splitlines() if l.startswith("ELAPSED")][0]
    seconds = float(line.split()[1])
    ok = seconds < 60.0
    assert criterion(9, ok,
                     f"full 5-block register on 128x96x160, single thread: "
                     f"{seconds:.1f} s (< 60 s)")


def test_criterion_10_roundtrips(tmp_path, rng, suite):
    from fieldreg import frv

    spec, regions, organs, pairs = suite
    pair = pairs[0]

    frv.write_volume(pair.fixed, tmp_path / "a.frv")
    frv.write_volume(frv.read_volume(tmp_path / "a.frv"), tmp_path / "b.frv")
    vol_ok = ((tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()
              and (tmp_path / "a.frv").read_bytes().replace(b"a.raw", b"b.raw")
              == (tmp_path / "b.frv").read_bytes())

    model = PipelineModel.zero_init(SUITE_GRID, regions, seed=5)
    export_model(model, tmp_path / "m1")
    export_model(import_model(tmp_path / "m1"), tmp_path / "m2")
    bundle_ok = all((tmp_path / "m1" / f.name).read_bytes() == (tmp_path / "m2" / f.name).read_bytes()
                    for f in (tmp_path / "m1").iterdir())

    raw = bytearray((tmp_path / "a.raw").read_bytes())
    raw[3] ^= 0x10
    (tmp_path / "a.raw").write_bytes(bytes(raw))
    try:
        frv.read(tmp_path / "a.frv")
        frv_reject = False
    except ChecksumError:
        frv_reject = True

    blob = bytearray((tmp_path / "m1" / "bone.bin").read_bytes())
    blob[3] ^= 0x10
    (tmp_path / "m1" / "bone.bin").write_bytes(bytes(blob))
    try:
        import_model(tmp_path / "m1")
        bundle_reject = False
    except ChecksumError:
        bundle_reject = True

    ok = vol_ok and bundle_ok and frv_reject and bundle_reject
    assert criterion(10, ok,
                     f"FRV bitwise-stable {vol_ok}, bundle bitwise-stable {bundle_ok}, "
                     f"tampered checksums rejected {frv_reject}/{bundle_reject}")
