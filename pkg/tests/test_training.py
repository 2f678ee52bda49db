import numpy as np
import pytest

from fieldreg.errors import ContractError
from fieldreg.fields import DisplacementField, warp_array_with_grad, warp_with_grad
from fieldreg.losses import LossWeights, bending_energy, dice_loss, mi_loss
from fieldreg.net import TapeContext, backward, deformable_forward, init_weights
from fieldreg.phantom import DeformationSpec, default_phantom_spec, make_pair, regions_of_spec
from fieldreg.training import (
    AdamState,
    LoadedPair,
    PairEntry,
    PairManifest,
    TrainConfig,
    adam_step,
    field_loss_gradient,
    grad_check,
    organ_labels,
    soft_masks,
    train_block,
    train_wholebody,
)
from fieldreg.volume import Grid


def phantom_pairs(n, dims=(16, 16, 32), amplitude=1.5, organs_per_region=1):
    spec = default_phantom_spec(Grid(dims), organs_per_region=organs_per_region)
    pairs = []
    for seed in range(n):
        p = make_pair(spec, DeformationSpec(amplitude, 4.0), seed=seed)
        pairs.append(LoadedPair(p.fixed, p.moving, p.fixed_mask, p.moving_mask))
    return spec, pairs


class TestAdam:
    def test_zero_grads_leave_weights(self, rng):
        w = [rng.standard_normal((3, 4)), rng.standard_normal(5)]
        keep = [t.copy() for t in w]
        state = AdamState.for_weights(w, lr=0.1)
        adam_step(state, w, [np.zeros_like(t) for t in w])
        assert state.step == 1
        for a, b in zip(w, keep):
            assert np.array_equal(a, b)

    def test_first_step_is_signed_lr(self, rng):
        # with constant gradient g, the bias-corrected first update is
        # lr * g / (|g| + eps) which is lr * sign(g) up to eps
        w = [np.zeros(6)]
        g = np.array([1.0, -2.0, 0.5, -0.1, 3.0, -4.0])
        state = AdamState.for_weights(w, lr=1e-2)
        adam_step(state, w, [g.copy()])
        assert np.allclose(w[0], -1e-2 * np.sign(g), rtol=1e-6)

    def test_tensors_updated_independently(self, rng):
        w = [np.zeros(3), np.zeros(3)]
        state = AdamState.for_weights(w, lr=1e-3)
        adam_step(state, w, [np.array([1.0, 1.0, 1.0]), np.zeros(3)])
        assert w[0].any() and not w[1].any()

    def test_shape_mismatch_rejected(self):
        w = [np.zeros(3)]
        state = AdamState.for_weights(w)
        with pytest.raises(ContractError):
            adam_step(state, w, [np.zeros(4)])

    def test_state_roundtrip(self, rng):
        w = [rng.standard_normal((2, 2))]
        state = AdamState.for_weights(w, lr=0.05)
        adam_step(state, w, [rng.standard_normal((2, 2))])
        back = AdamState.from_arrays(state.save_arrays())
        assert back.step == state.step
        assert back.lr == state.lr
        assert np.array_equal(back.m[0], state.m[0])
        assert np.array_equal(back.v[0], state.v[0])


class TestManifest:
    def test_expansion_both_directions(self):
        m = PairManifest((PairEntry("f", "m", "fm", "mm"),), both_directions=True)
        ex = m.expanded()
        assert len(ex) == 2
        assert ex[1].fixed == "m" and ex[1].fixed_mask == "mm"

    def test_masks_required_for_training(self):
        m = PairManifest((PairEntry("f", "m"),))
        with pytest.raises(ContractError):
            m.require_masks()

    def test_json_roundtrip(self, tmp_path):
        m = PairManifest((PairEntry("a", "b", "c", "d"), PairEntry("e", "f")),
                         both_directions=True)
        m.save(tmp_path / "m.json")
        back = PairManifest.load(tmp_path / "m.json")
        assert back == m

    def test_missing_files_detected(self, tmp_path):
        m = PairManifest((PairEntry("nope.frv", "alsono.frv"),))
        with pytest.raises(ContractError):
            m.validate_files(tmp_path)


class TestPerOrganEquivalence:
    def test_accumulated_equals_joint_backward(self):
        # the split backward must reproduce the joint gradient of the full
        # composite loss; single tape alive throughout
        rng = np.random.default_rng(0)
        spec, pairs = phantom_pairs(1, dims=(16, 16, 32), amplitude=1.5,
                                    organs_per_region=1)
        pair = pairs[0]
        organs = [o.name for o in spec.organs]
        labels = organ_labels(pair.fixed_mask, organs)
        fs = soft_masks(pair.fixed_mask, labels, dtype=np.float64)
        ms = soft_masks(pair.moving_mask, labels, dtype=np.float64)
        w = LossWeights(1.0, 1.0, 0.5)
        bw = init_weights("deformable", seed=2, dtype=np.float64)
        for t in bw.params[-1]:
            t += rng.uniform(-0.01, 0.01, t.shape)
        fixed = pair.fixed.with_samples(pair.fixed.samples.astype(np.float64))
        moving = pair.moving.with_samples(pair.moving.samples.astype(np.float64))
        k = len(organs)

        TapeContext.reset_peak()
        # pass 0: similarity + smoothness
        field, tape = deformable_forward(bw, fixed, moving)
        warped, wgrad = warp_with_grad(moving, field)
        _, mi_g = mi_loss(fixed, warped, bins=16)
        _, be_g = bending_energy(field)
        acc = backward(tape, w.alpha * mi_g * wgrad + w.beta * be_g)
        # organ passes
        for name in organs:
            field_k, tape_k = deformable_forward(bw, fixed, moving)
            sw, sgrad = warp_array_with_grad(ms[name], field_k)
            _, dg = dice_loss(fs[name], sw)
            gk = backward(tape_k, (w.lam / k) * dg * sgrad)
            for a, b in zip(acc, gk):
                a += b
        assert TapeContext.peak_live() <= 1

        # joint oracle: one forward, all upstream terms summed, one backward
        field_j, tape_j = deformable_forward(bw, fixed, moving)
        _, g_total = field_loss_gradient(fixed, moving, ms, fs, field_j, w, bins=16)
        joint = backward(tape_j, g_total)

        for a, b in zip(acc, joint):
            denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
            assert np.abs(a - b).max() / denom < 1e-6


class TestTrainBlock:
    def test_epoch_bookkeeping(self):
        _, pairs = phantom_pairs(2)
        bw = init_weights("affine", seed=1)
        spec = default_phantom_spec(Grid((16, 16, 32)), organs_per_region=1)
        cfg = TrainConfig(epochs=3, pairs_per_epoch=2, lr=1e-4,
                          regions=regions_of_spec(spec))
        _, log = train_block(bw, ["liver"], pairs, cfg)
        assert len(log) == 6
        assert [r["epoch"] for r in log] == [0, 0, 1, 1, 2, 2]
        assert all(set(r) == {"epoch", "pair_index", "loss_total", "mi", "dice",
                              "be", "seconds"} for r in log)

    def test_reproducible_same_seed(self):
        _, pairs = phantom_pairs(2)
        results = []
        for _ in range(2):
            bw = init_weights("deformable", seed=3)
            cfg = TrainConfig(epochs=1, pairs_per_epoch=2, lr=1e-3, seed=5)
            train_block(bw, ["liver"], pairs, cfg)
            results.append([t.copy() for t in bw.flat()])
        for a, b in zip(*results):
            assert np.array_equal(a, b)

    def test_missing_organ_rejected(self):
        _, pairs = phantom_pairs(1)
        bw = init_weights("deformable", seed=3)
        cfg = TrainConfig(epochs=1, pairs_per_epoch=1)
        with pytest.raises(ContractError):
            train_block(bw, ["gallbladder"], pairs, cfg)

    def test_self_pair_dice_starts_at_zero(self):
        # fixed == moving with identity-initialized block: perfect overlap
        spec, pairs = phantom_pairs(1, amplitude=0.0)
        bw = init_weights("deformable", seed=3)
        cfg = TrainConfig(epochs=1, pairs_per_epoch=1, lr=1e-4)
        _, log = train_block(bw, ["liver"], pairs, cfg)
        assert log[0]["dice"] == pytest.approx(0.0, abs=1e-12)

    def test_checkpointing(self, tmp_path):
        _, pairs = phantom_pairs(1)
        bw = init_weights("affine", seed=1)
        cfg = TrainConfig(epochs=2, pairs_per_epoch=1, checkpoint_every=1)
        train_block(bw, ["liver"], pairs, cfg, checkpoint_dir=tmp_path)
        assert (tmp_path / "epoch0001.trw").exists()
        assert (tmp_path / "epoch0002.adam.npz").exists()


class TestWholebody:
    def test_predecessors_bitwise_frozen_and_loss_decreases(self):
        from fieldreg.pipeline import PipelineModel

        spec, pairs = phantom_pairs(1, dims=(16, 16, 32), amplitude=2.0)
        regions = regions_of_spec(spec)
        model = PipelineModel.zero_init(Grid((16, 16, 32)), regions, seed=1)
        before = {name: [t.copy() for t in model.blocks[name].flat()]
                  for name in ("affine", "bone", "thorax", "abdomen")}
        decreasing = 0
        for seed in range(10):
            model.blocks["wholebody"] = init_weights("deformable", seed=100 + seed)
            cfg = TrainConfig(epochs=1, pairs_per_epoch=10, lr=2e-3, seed=seed,
                              weights=LossWeights(1.0, 1.0, 0.5), regions=regions)
            _, log = train_wholebody(model, pairs, cfg)
            assert len(log) == 10
            if log[-1]["loss_total"] <= log[0]["loss_total"]:
                decreasing += 1
        assert decreasing >= 8
        for name, tensors in before.items():
            for a, b in zip(tensors, model.blocks[name].flat()):
                assert np.array_equal(a, b)


class TestGradCheckTooling:
    def test_components_pass(self):
        report = grad_check("all", trials=1)
        assert report.passed, report.results

    def test_unknown_component_rejected(self):
        with pytest.raises(ContractError):
            grad_check("warp_speed")

    def test_single_component(self):
        report = grad_check("dice_loss", trials=1)
        assert set(report.results) == {"dice_loss"}
