import logging
import math

import numpy as np
import pytest

from conftest import small_phantom
from liverseg import metrics, phantom, preprocess
from liverseg.errors import EmptyMaskError
from liverseg.tuner import (
    PARAM_ORDER,
    SearchSpace,
    TunerCase,
    default_objective_class,
    random_search,
    write_trace_csv,
)
from liverseg.volume import LabelVolume


def make_case(seed=3, err=0.05):
    spec = phantom.PhantomSpec(
        dims=(18, 18, 12), spacing=(2.0, 2.0, 3.0),
        liver_center_mm=(18, 17, 16), liver_axes_mm=(13, 11, 12),
        lesions=(phantom.LesionSpec((15, 15, 14), 5.0, 40.0),),
        noise_sigma=6.0, seed=seed,
    )
    ct, gt = phantom.generate(spec)
    wct = preprocess.hu_window(ct)
    un = phantom.oracle_unary(gt, blur_sigma_mm=0.0, error_rate=err, seed=seed + 100)
    return TunerCase(un, wct, gt, default_objective_class(gt))


def tight_space(trials=4, seed=0):
    return SearchSpace(
        ranges={
            "w_pos": (0.2, 3.0), "w_bil": (0.2, 3.0),
            "sigma_pos": (1.5, 6.0), "sigma_bil": (6.0, 20.0), "sigma_int": (15.0, 60.0),
        },
        trials=trials, seed=seed,
    )


class TestSearchSpace:
    def test_validation(self):
        with pytest.raises(ValueError, match="low"):
            SearchSpace(ranges={**tight_space().ranges, "w_pos": (3.0, 1.0)})
        with pytest.raises(ValueError, match="log"):
            SearchSpace(ranges={**tight_space().ranges, "w_pos": (0.0, 1.0)})
        with pytest.raises(ValueError, match="trials"):
            SearchSpace(trials=0)

    def test_default_objective_class(self):
        _, _, gt = small_phantom()
        assert default_objective_class(gt) == 2
        liver_only = LabelVolume((gt.labels >= 1).astype(np.uint8), gt.spacing)
        assert default_objective_class(liver_only) == 1


class TestRandomSearch:
    def test_single_trial_returned(self):
        case = make_case()
        best, trace = random_search(tight_space(trials=1), [case], iterations=2)
        assert len(trace) == 1
        assert best == trace[0].params

    def test_collapsed_space_returns_point(self):
        case = make_case()
        point = {
            "w_pos": (1.0, 1.0), "w_bil": (0.5, 0.5),
            "sigma_pos": (3.0, 3.0), "sigma_bil": (12.0, 12.0), "sigma_int": (30.0, 30.0),
        }
        space = SearchSpace(ranges=point, trials=3, seed=5)
        best, trace = random_search(space, [case], iterations=2)
        assert (best.w_pos, best.w_bil) == (1.0, 0.5)
        assert (best.sigma_pos, best.sigma_bil, best.sigma_int) == (3.0, 12.0, 30.0)

    def test_deterministic(self):
        case = make_case()
        space = tight_space(trials=3, seed=9)
        best1, trace1 = random_search(space, [case], iterations=2)
        best2, trace2 = random_search(space, [case], iterations=2)
        assert best1 == best2
        assert [t.params for t in trace1] == [t.params for t in trace2]
        assert [t.mean_score for t in trace1] == [t.mean_score for t in trace2]

    def test_best_is_max_of_trace(self):
        case = make_case()
        best, trace = random_search(tight_space(trials=5, seed=2), [case], iterations=2)
        best_score = max(t.mean_score for t in trace)
        winner = next(t for t in trace if t.mean_score == best_score)
        assert winner.params == best

    def test_prefix_property(self):
        case = make_case()
        s4 = tight_space(trials=4, seed=11)
        s7 = SearchSpace(s4.ranges, s4.scales, trials=7, seed=11)
        _, t4 = random_search(s4, [case], iterations=2)
        _, t7 = random_search(s7, [case], iterations=2)
        assert [t.params for t in t7[:4]] == [t.params for t in t4]
        assert max(t.mean_score for t in t7) >= max(t.mean_score for t in t4)

    def test_ties_go_to_earlier_trial(self):
        case = make_case()
        point = {
            "w_pos": (1.0, 1.0), "w_bil": (0.5, 0.5),
            "sigma_pos": (3.0, 3.0), "sigma_bil": (12.0, 12.0), "sigma_int": (30.0, 30.0),
        }
        space = SearchSpace(ranges=point, trials=3, seed=5)
        _, trace = random_search(space, [case], iterations=2)
        scores = [t.mean_score for t in trace]
        assert scores[0] == scores[1] == scores[2]
        best, _ = random_search(space, [case], iterations=2)
        assert best == trace[0].params

    def test_case_with_empty_gt_skipped_with_warning(self, caplog):
        good = make_case()
        no_lesion_gt = LabelVolume(
            (good.gt.labels >= 1).astype(np.uint8), good.gt.spacing
        )
        bad = TunerCase(good.unary, good.intensity, no_lesion_gt, cls=2)
        with caplog.at_level(logging.WARNING, logger="liverseg.tuner"):
            best, trace = random_search(tight_space(trials=2), [good, bad], iterations=2)
        assert any("skipped" in rec.message for rec in caplog.records)
        for t in trace:
            assert math.isnan(t.case_scores[1])
            assert not math.isnan(t.mean_score)

    def test_all_cases_undefined_raises(self):
        good = make_case()
        empty_gt = LabelVolume(np.zeros(good.gt.labels.shape, dtype=np.uint8),
                               good.gt.spacing)
        bad = TunerCase(good.unary, good.intensity, empty_gt, cls=2)
        with pytest.raises(EmptyMaskError):
            random_search(tight_space(trials=1), [bad], iterations=1)

    def test_no_cases_rejected(self):
        with pytest.raises(ValueError, match="case"):
            random_search(tight_space(), [], iterations=1)


class TestTraceCsv:
    def test_layout(self, tmp_path):
        case = make_case()
        _, trace = random_search(tight_space(trials=2, seed=1), [case], iterations=1)
        write_trace_csv(tmp_path / "trace.csv", trace)
        lines = (tmp_path / "trace.csv").read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header[:6] == ["trial", "w_pos", "w_bil", "sigma_pos", "sigma_bil", "sigma_int"]
        assert header[-1] == "mean_score"
        assert len(lines) == 3
