import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poltwin.dataset import TARGET_EPS, Scaler
from poltwin.metrics import classification_report
from poltwin.nn import (
    COMPONENT,
    MDN_WEIBULL3,
    PAPER_WEIGHTED_SUM,
    SOFTMAX_CLASSIFIER,
    init_net,
    mdn_sample,
    mixture,
    softmax,
    weibull_logpdf,
)
from poltwin.surrogate import (
    ARGMAX,
    MIN_STAY_S,
    SAMPLE,
    NextDestinationModel,
    StayDurationModel,
    SurrogateError,
    WeibullBaseline,
    WeibullFitError,
    choose_tag,
    fit_weibull,
    predict_next,
    predict_next_batch,
    predict_stay,
    stay_from_normalized,
    uniform_baseline,
)
from poltwin.vocab import N_TAGS, Tag, UserClass

SCALER = Scaler(0.0, 30_000.0, 60.0, 7200.0)


def _flat_classifier(bias=None):
    net = init_net(SOFTMAX_CLASSIFIER, np.random.default_rng(0))
    net.weights[-1][...] = 0
    net.biases[-1][...] = 0 if bias is None else bias
    return net


def _point_mass_mdn(scale_raw=-40.0, conc_raw=60.0):
    net = init_net(MDN_WEIBULL3, np.random.default_rng(0))
    net.weights[-1][...] = 0
    net.biases[-1][...] = [40, 0, 0, scale_raw, 0, 0, conc_raw, 1, 1]
    return net


# -- next destination ---------------------------------------------------------------

def test_uniform_logits_argmax_is_office():
    model = NextDestinationModel(_flat_classifier(), SCALER, ARGMAX)
    for cls in UserClass:
        assert predict_next(model, Tag.LAB, cls, 1200) is Tag.OFFICE


def test_argmax_repeatable():
    model = NextDestinationModel(init_net(SOFTMAX_CLASSIFIER, np.random.default_rng(3)), SCALER, ARGMAX)
    assert predict_next(model, Tag.ENTRY, UserClass.FACILITY_USER, 0) == \
        predict_next(model, Tag.ENTRY, UserClass.FACILITY_USER, 0)


def test_sample_frequencies_match_probabilities():
    p = softmax(np.array([0.5, -1.0, 2.0, 0.0, 1.0, -0.5]))
    rng = np.random.default_rng(0)
    draws = np.array([choose_tag(p, SAMPLE, rng) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=N_TAGS) / len(draws)
    assert np.max(np.abs(freq - p)) <= 0.01


def test_predict_next_sample_mode_uses_model_probabilities():
    bias = np.array([0.0, 1.0, 2.0, -1.0, 0.5, 0.0])
    model = NextDestinationModel(_flat_classifier(bias), SCALER, SAMPLE)
    rng = np.random.default_rng(1)
    draws = np.array([predict_next(model, Tag.OFFICE, UserClass.RAD_WORKER, 500, rng)
                      for _ in range(20_000)])
    freq = np.bincount(draws, minlength=N_TAGS) / len(draws)
    assert np.max(np.abs(freq - softmax(bias))) <= 0.015


def test_allowed_mask():
    p = softmax(np.array([5.0, 0, 0, 0, 0, 0]))
    rng = np.random.default_rng(0)
    allowed = {Tag.LAB, Tag.END}
    assert {choose_tag(p, SAMPLE, rng, allowed) for _ in range(500)} <= allowed
    assert choose_tag(p, ARGMAX, None, allowed) in allowed


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=6, max_size=6), st.floats(-100, 100))
def test_argmax_shift_invariant(logits, c):
    z = np.array(logits)
    assert choose_tag(softmax(z), ARGMAX, None) == choose_tag(softmax(z + c), ARGMAX, None)


def test_batch_matches_single():
    model = NextDestinationModel(init_net(SOFTMAX_CLASSIFIER, np.random.default_rng(4)), SCALER, ARGMAX)
    src, cls, t = [0, 4, 2], [1, 3, 0], [0, 9000, 25_000]
    batch = predict_next_batch(model, src, cls, t)
    assert [int(predict_next(model, *row)) for row in zip(src, cls, t)] == batch.tolist()


def test_model_head_checks():
    with pytest.raises(SurrogateError):
        NextDestinationModel(init_net(MDN_WEIBULL3, np.random.default_rng(0)), SCALER)
    with pytest.raises(SurrogateError):
        StayDurationModel(init_net(SOFTMAX_CLASSIFIER, np.random.default_rng(0)), SCALER)
    with pytest.raises(SurrogateError, match="not loaded"):
        predict_next(None, Tag.OFFICE, UserClass.RAD_WORKER, 0)


# -- stay duration --------------------------------------------------------------

def test_point_mass_near_minimum_clamps_to_a_minute():
    model = StayDurationModel(_point_mass_mdn(), Scaler(0.0, 30_000.0, 1.0, 100.0))
    assert predict_stay(model, Tag.OFFICE, UserClass.RAD_WORKER, 100,
                        np.random.default_rng(0)) == MIN_STAY_S


def test_top_of_range_maps_to_stay_max():
    assert stay_from_normalized(SCALER, 1 + TARGET_EPS) == pytest.approx(SCALER.stay_max, rel=1e-12)


def test_end_is_rejected():
    model = StayDurationModel(init_net(MDN_WEIBULL3, np.random.default_rng(0)), SCALER)
    with pytest.raises(SurrogateError):
        predict_stay(model, Tag.END, UserClass.RAD_WORKER, 0, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 50), st.sampled_from([t for t in Tag if t != Tag.END]),
       st.sampled_from(list(UserClass)), st.integers(0, 60_000),
       st.sampled_from([PAPER_WEIGHTED_SUM, COMPONENT]))
def test_stays_are_finite_and_at_least_a_minute(seed, tag, cls, t, scheme):
    model = StayDurationModel(init_net(MDN_WEIBULL3, np.random.default_rng(seed)), SCALER, scheme)
    s = predict_stay(model, tag, cls, t, np.random.default_rng(seed))
    assert math.isfinite(s) and s >= MIN_STAY_S


def test_schemes_agree_for_single_component():
    n = 5000
    p = mixture(np.tile([1.0, 0, 0], (n, 1)), np.tile([0.3, 1, 2], (n, 1)),
                np.tile([1.7, 1, 1], (n, 1)))
    a = mdn_sample(p, np.random.default_rng(9), scheme=PAPER_WEIGHTED_SUM)
    b = mdn_sample(p, np.random.default_rng(9), scheme=COMPONENT)
    assert np.array_equal(a, b)


# -- baselines --------------------------------------------------------------------

def test_uniform_baseline_frequencies():
    draws = uniform_baseline(np.random.default_rng(0), 600_000)
    freq = np.bincount(draws, minlength=N_TAGS) / len(draws)
    assert np.max(np.abs(freq - 1 / 6)) <= 0.005
    assert isinstance(uniform_baseline(np.random.default_rng(0)), Tag)


def test_uniform_baseline_scores_on_balanced_labels():
    labels = np.repeat(np.arange(N_TAGS), 10_000)
    rep = classification_report(uniform_baseline(np.random.default_rng(1), labels.size), labels)
    assert rep.accuracy == pytest.approx(1 / 6, abs=0.005)
    assert 1.6 <= rep.class_index_mae <= 2.1
    assert rep.class_index_mae == pytest.approx(35 / 18, abs=0.02)


def test_weibull_fit_recovers_exponential():
    x = np.random.default_rng(0).exponential(1.0, 100_000)
    fit = fit_weibull(x)
    assert fit.concentration == pytest.approx(1.0, abs=0.02)
    assert fit.scale == pytest.approx(1.0, abs=0.02)


@pytest.mark.parametrize("scale, conc", [(0.05, 0.6), (2.0, 3.5), (300.0, 1.3)])
def test_weibull_fit_is_grid_optimal(scale, conc):
    x = WeibullBaseline(scale, conc).sample(np.random.default_rng(1), 3000)
    fit = fit_weibull(x)
    best = fit.nll(x)
    for s in np.linspace(0.8, 1.2, 20) * fit.scale:
        for k in np.linspace(0.8, 1.2, 20) * fit.concentration:
            assert best <= -weibull_logpdf(x, s, k).mean() + 1e-12


def test_weibull_fit_degenerate():
    with pytest.raises(WeibullFitError, match="degenerate"):
        fit_weibull(np.full(100, 0.3))


@pytest.mark.parametrize("bad", [np.ones(5), np.array([1.0] * 20 + [-1.0]), np.array([1.0] * 20 + [np.nan])])
def test_weibull_fit_rejects(bad):
    with pytest.raises(WeibullFitError):
        fit_weibull(bad)
