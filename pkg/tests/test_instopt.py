import numpy as np

from fieldreg.evaluate import score_field, unregistered_pair
from fieldreg.instopt import InstOptConfig, optimize_field
from fieldreg.losses import LossWeights
from fieldreg.phantom import DeformationSpec, default_phantom_spec, make_pair
from fieldreg.training import LoadedPair, organ_labels, soft_masks
from fieldreg.volume import Grid


def test_direct_field_optimization_improves_alignment():
    spec = default_phantom_spec(Grid((16, 16, 32)), organs_per_region=1)
    p = make_pair(spec, DeformationSpec(3.0, 5.0), seed=1)
    pair = LoadedPair(p.fixed, p.moving, p.fixed_mask, p.moving_mask)
    organs = [o.name for o in spec.organs]
    labels = organ_labels(pair.fixed_mask, organs)
    fs = soft_masks(pair.fixed_mask, labels)
    ms = soft_masks(pair.moving_mask, labels)

    cfg = InstOptConfig(iterations=60, lr=0.5, weights=LossWeights(1.0, 1.0, 0.5),
                        mi_bins=16)
    field, history = optimize_field(pair.fixed, pair.moving, fs, ms, cfg)

    base = unregistered_pair(pair, organs).mean_dsc
    tuned = score_field(field, pair, organs).mean_dsc
    assert tuned > base + 0.05
    assert history[-1] < history[0]
    assert field.u.shape == (3, 16, 16, 32)


def test_zero_iterations_returns_zero_field():
    spec = default_phantom_spec(Grid((16, 16, 32)), organs_per_region=1)
    p = make_pair(spec, DeformationSpec(1.0, 5.0), seed=2)
    pair = LoadedPair(p.fixed, p.moving, p.fixed_mask, p.moving_mask)
    labels = organ_labels(pair.fixed_mask, ["liver"])
    fs = soft_masks(pair.fixed_mask, labels)
    ms = soft_masks(pair.moving_mask, labels)
    field, history = optimize_field(pair.fixed, pair.moving, fs, ms,
                                    InstOptConfig(iterations=0))
    assert not field.u.any()
    assert history == []
