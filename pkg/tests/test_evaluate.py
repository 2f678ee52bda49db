import numpy as np
import pytest

from fieldreg.errors import ContractError, UndefinedOverlapError
from fieldreg.evaluate import (
    EvalReport,
    PairEval,
    aggregate,
    dsc,
    evaluate_pair,
    format_table,
    score_field,
    to_csv,
    unregistered_pair,
)
from fieldreg.phantom import DeformationSpec, default_phantom_spec, make_pair, regions_of_spec
from fieldreg.pipeline import PipelineModel
from fieldreg.training import LoadedPair
from fieldreg.volume import Grid

GRID = Grid((16, 16, 32))


def suite_pair(amplitude=1.5, seed=0):
    spec = default_phantom_spec(GRID, organs_per_region=1)
    p = make_pair(spec, DeformationSpec(amplitude, 4.0), seed=seed)
    organs = [o.name for o in spec.organs]
    return LoadedPair(p.fixed, p.moving, p.fixed_mask, p.moving_mask), organs, p, spec


class TestDsc:
    def test_identical(self, rng):
        m = rng.random((5, 5, 5)) > 0.5
        assert dsc(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0], b[1] = True, True
        assert dsc(a, b) == 0.0

    def test_counted(self):
        a = np.zeros(8, bool)
        b = np.zeros(8, bool)
        a[:4] = True
        b[2:6] = True
        assert dsc(a.reshape(2, 2, 2), b.reshape(2, 2, 2)) == 0.5

    def test_symmetry(self, rng):
        a = rng.random((5, 5, 5)) > 0.4
        b = rng.random((5, 5, 5)) > 0.6
        assert dsc(a, b) == dsc(b, a)

    def test_monotone_in_intersection(self):
        # growing the overlap with set sizes fixed can only raise the score
        a = np.zeros(10, bool)
        a[:5] = True
        prev = -1.0
        for k in range(6):
            b = np.zeros(10, bool)
            b[5 - k:10 - k] = True
            val = dsc(a.reshape(2, 5, 1), b.reshape(2, 5, 1))
            assert val >= prev
            prev = val

    def test_both_empty_undefined(self):
        z = np.zeros((3, 3, 3), bool)
        with pytest.raises(UndefinedOverlapError):
            dsc(z, z)

    def test_fixed_empty_gives_zero(self):
        a = np.zeros((3, 3, 3), bool)
        b = np.ones((3, 3, 3), bool)
        assert dsc(a, b) == 0.0


class TestEvaluatePair:
    def test_zero_model_matches_unregistered(self):
        pair, organs, _, spec = suite_pair()
        model = PipelineModel.zero_init(GRID, regions_of_spec(spec), seed=0)
        row = evaluate_pair(model, pair, organs)
        base = unregistered_pair(pair, organs)
        assert row.per_organ == base.per_organ
        assert row.folding == 0.0
        assert row.seconds > 0.0

    def test_truth_injection_recovers_alignment(self):
        pair, organs, raw, _ = suite_pair(amplitude=1.0)
        row = score_field(raw.truth, pair, organs)
        assert row.mean_dsc > 0.95


class TestAggregate:
    def test_single_row_zero_std(self):
        rows = [PairEval({"a": 0.5}, 0.0, 1.0)]
        rep = aggregate(rows)
        assert rep.per_organ["a"] == (50.0, 0.0)
        assert rep.cases == 1

    def test_two_equal_rows_zero_std(self):
        rows = [PairEval({"a": 0.7}, 0.01, 1.0)] * 2
        rep = aggregate(rows)
        assert rep.per_organ["a"][1] == 0.0
        assert rep.folding_pct == (1.0, 0.0)

    def test_population_std(self):
        rows = [PairEval({"a": 0.4}, 0.0, 1.0), PairEval({"a": 0.6}, 0.0, 3.0)]
        rep = aggregate(rows)
        assert rep.per_organ["a"] == (pytest.approx(50.0), pytest.approx(10.0))
        assert rep.runtime_s == (pytest.approx(2.0), pytest.approx(1.0))
        assert rep.std_convention == "population"

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            aggregate([])


class TestReporting:
    def _columns(self):
        rows = [PairEval({"lung": 0.6, "liver": 0.5}, 0.002, 1.0),
                PairEval({"lung": 0.8, "liver": 0.7}, 0.004, 2.0)]
        return {"Unregistered": aggregate(rows), "Registered": aggregate(rows)}

    def test_table_shape(self):
        text = format_table(self._columns())
        lines = text.splitlines()
        assert "Unregistered" in lines[0] and "Registered" in lines[0]
        assert any(l.startswith("lung") for l in lines)
        assert any(l.startswith("Avg. DSC") for l in lines)
        assert any(l.startswith("Avg. %Folding") for l in lines)
        assert "population" in lines[-1]

    def test_csv(self):
        csv = to_csv(self._columns())
        assert csv.splitlines()[0] == "method,metric,mean,std"
        assert "Registered,dsc_lung," in csv
        assert "Unregistered,folding_pct," in csv

    def test_json(self):
        rep = aggregate([PairEval({"a": 0.5}, 0.0, 1.0)])
        obj = rep.to_json()
        assert obj["cases"] == 1
        assert obj["std"] == "population"
        assert obj["per_organ_dsc_pct"]["a"] == [50.0, 0.0]
