import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cellstream import multiview as mv
from cellstream.multiview import ViewPrediction as VP


def test_view_prediction_examples():
    assert mv.view_prediction([0.9, 0.1]) == VP(0, 0.9)
    assert mv.view_prediction([0.5, 0.5]) == VP(0, 0.5)


def test_view_prediction_random_matches_scan():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        h = rng.dirichlet(np.ones(10))
        v = mv.view_prediction(h)
        assert v.class_id == oracles.argmax_first(list(h)) and v.confidence == h[v.class_id]


@pytest.mark.parametrize("h", [[0.6, 0.6], [1.2, -0.2], [0.3], [0.5, float("nan")], [[0.5, 0.5]]])
def test_view_prediction_rejects(h):
    with pytest.raises(ValueError):
        mv.view_prediction(h)


def test_saturated_confidence_clamped():
    v = mv.view_prediction([1 - 1e-13, 1e-13])
    assert v.confidence == 1 - 1e-9


def test_mvm_examples():
    assert mv.aggregate_mvm([VP(1, .6), VP(1, .7), VP(0, .9)]).final_class == 1
    assert mv.aggregate_mvm([VP(0, .6), VP(1, .9)]).final_class == 0
    with pytest.raises(ValueError):
        mv.aggregate_mvm([])


def test_mvwcos_worked_example():
    r = mv.aggregate_mvwcos([VP(0, 0.9), VP(1, 0.5), VP(1, 0.5)])
    assert r.weights == (0.9, 1.0) and r.final_class == 1 and r.views_used == 3
    assert mv.aggregate_mvwcos([VP(3, 0.6)]).final_class == 3


@pytest.mark.parametrize("c", [0.0, 1.0, 1.5])
def test_mvwcos_rejects_confidence(c):
    with pytest.raises(ValueError):
        mv.aggregate_mvwcos([VP(0, c)])


def test_against_counting_oracles():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        cls = rng.integers(0, 4, 10).tolist()
        conf = rng.uniform(0.26, 0.99, 10).tolist()
        views = [VP(c, w) for c, w in zip(cls, conf)]
        assert mv.aggregate_mvm(views, 4).final_class == oracles.mode_class(cls, 4)
        assert mv.aggregate_mvwcos(views, 4).final_class == oracles.weighted_class(cls, conf, 4)


def test_binary_mvm_exhaustive():
    for m in range(1, 9):
        for votes in itertools.product([0, 1], repeat=m):
            ones = sum(votes)
            want = 1 if ones > m / 2 else 0  # exact tie goes to class 0
            assert mv.aggregate_mvm([VP(v, 0.7) for v in votes]).final_class == want


# dyadic confidences keep every partial sum exact, so order cannot matter
views_st = st.lists(st.tuples(st.integers(0, 5), st.integers(1, 63).map(lambda k: k / 64)), min_size=1, max_size=30)


@given(views_st, st.randoms(use_true_random=False))
def test_permutation_invariance(pairs, rnd):
    views = [VP(c, w) for c, w in pairs]
    shuffled = list(views)
    rnd.shuffle(shuffled)
    assert mv.aggregate_mvm(views).final_class == mv.aggregate_mvm(shuffled).final_class
    assert mv.aggregate_mvwcos(views).final_class == mv.aggregate_mvwcos(shuffled).final_class


@given(st.integers(0, 5), st.lists(st.floats(0.01, 0.99), min_size=1, max_size=20))
def test_unanimity(k, confs):
    views = [VP(k, c) for c in confs]
    assert mv.aggregate_mvm(views).final_class == k == mv.aggregate_mvwcos(views).final_class


@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.floats(0.05, 0.95))
def test_equal_confidence_reduces_to_mode(classes, c):
    views = [VP(k, c) for k in classes]
    assert mv.aggregate_mvwcos(views).final_class == mv.aggregate_mvm(views).final_class


@given(views_st, st.sampled_from([1.0, 0.5, 0.25, 0.125]))
def test_scale_free(pairs, lam):
    # power-of-two scaling is exact in floating point
    views = [VP(c, w) for c, w in pairs]
    scaled = [VP(v.class_id, v.confidence * lam) for v in views]
    assert mv.aggregate_mvwcos(views).final_class == mv.aggregate_mvwcos(scaled).final_class


def test_to_json():
    r = json.loads(mv.aggregate_mvm([VP(1, 0.8)]).to_json())
    assert r == {"final_class": 1, "weights": [0.0, 1.0], "views_used": 1, "method": "mvm"}


# -- multiview_predict --------------------------------------------------------

def _identity_aug(sample, rng):
    return sample


@pytest.mark.parametrize("method", ["mvm", "mvwcos", "baseline"])
@pytest.mark.parametrize("m", [1, 5, 12])
def test_constant_predictor(method, m):
    r = mv.multiview_predict(lambda x: [0.8, 0.2], None, m, _identity_aug, method, np.random.default_rng(0))
    assert r.final_class == 0


def test_single_view_methods_agree():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        h = rng.dirichlet(np.ones(3))
        res = [mv.multiview_predict(lambda x: h, None, 1, _identity_aug, meth, np.random.default_rng(0)).final_class
               for meth in ("baseline", "mvm", "mvwcos")]
        assert len(set(res)) == 1


def test_scripted_predictor():
    script = [[0.6, 0.4], [0.3, 0.7], [0.45, 0.55], [0.9, 0.1], [0.2, 0.8],
              [0.51, 0.49], [0.52, 0.48], [0.4, 0.6], [0.8, 0.2], [0.35, 0.65]]
    it = iter(script)

    def aug(sample, rng):
        return next(it)

    # votes: class 0 x5 (0.6, 0.9, 0.51, 0.52, 0.8), class 1 x5 (0.7, 0.55, 0.8, 0.6, 0.65)
    r = mv.multiview_predict(lambda v: v, None, 10, aug, "mvm", np.random.default_rng(0))
    assert r.weights == (5.0, 5.0) and r.final_class == 0
    it = iter(script)
    r = mv.multiview_predict(lambda v: v, None, 10, aug, "mvwcos", np.random.default_rng(0))
    assert r.weights == pytest.approx((3.33, 3.30)) and r.final_class == 0


def test_views_drawn_from_rng_deterministically():
    def aug(sample, rng):
        return rng.dirichlet([1, 1, 1])

    a = mv.multiview_predict(lambda v: v, None, 7, aug, "mvwcos", np.random.default_rng(3))
    b = mv.multiview_predict(lambda v: v, None, 7, aug, "mvwcos", np.random.default_rng(3))
    assert a == b


def test_predictor_failure_reports_view():
    calls = iter(range(100))

    def bad(v):
        if next(calls) == 3:
            raise RuntimeError("boom")
        return [0.5, 0.5]

    with pytest.raises(mv.PredictorError) as ei:
        mv.multiview_predict(bad, None, 6, _identity_aug, "mvm", np.random.default_rng(0))
    assert ei.value.view_index == 3


def test_unknown_method():
    with pytest.raises(ValueError):
        mv.Method.parse("vote")
    assert mv.Method.parse("MVWCo-S") is mv.Method.MVWCOS


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.integers(2, 6), st.integers(0, 10_000))
def test_batch_matches_per_sample(n, m, k, seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(k), size=(n, m))
    for meth, agg in mv.AGGREGATORS.items():
        got = mv.aggregate_batch(probs, meth)
        for i in range(n):
            assert got[i] == agg([mv.view_prediction(p) for p in probs[i]], k).final_class
    assert np.array_equal(mv.aggregate_batch(probs, "baseline"), probs[:, 0].argmax(axis=1))
