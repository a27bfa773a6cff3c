import math

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from halluguard.controller import (
    Controller,
    ControllerConfig,
    ControllerMode,
    ControllerState,
    Stability,
    classify,
    history_table,
    iterate_plant,
    residual_bound,
    stability_analysis,
    update_bump,
    update_proportional,
)
from halluguard.errors import GammaOutOfRange, HRateOutOfRange, NonPositiveInput, ValidationError
from halluguard.simworld import LinearPlant
from oracles import frames_to_eps_oracle

CFG = ControllerConfig()
BUMP = ControllerConfig(mode=ControllerMode.BUMP)


def at(tau, cfg=CFG):
    return ControllerState(tau=tau)


# -- proportional law --------------------------------------------------------


def test_proportional_examples():
    assert update_proportional(at(0.5), 0.28, CFG).tau == pytest.approx(0.509, abs=1e-15)
    assert update_proportional(at(0.5), 0.1, CFG).tau == 0.5
    assert update_proportional(at(0.94), 1.0, CFG).tau == 0.95


def test_proportional_bookkeeping():
    s = update_proportional(ControllerState(0.5, step=7), 0.3, CFG)
    assert s.step == 8 and s.last_h == 0.3
    assert s.last_error == 0.3 - CFG.h_target


@pytest.mark.parametrize("h", [-0.1, 1.01, float("nan")])
def test_proportional_rejects_bad_rate(h):
    with pytest.raises(HRateOutOfRange):
        update_proportional(at(0.5), h, CFG)


unit = st.floats(0.0, 1.0, allow_nan=False)


@given(st.floats(0.06, 0.94))
def test_setpoint_is_a_fixed_point(tau):
    assert update_proportional(at(tau), CFG.h_target, CFG).tau == tau


@given(st.floats(0.06, 0.94), unit)
def test_moves_away_from_setpoint(tau, h):
    assume(abs(h - CFG.h_target) > 1e-6)
    unclamped = tau + CFG.gain * (h - CFG.h_target)
    assume(CFG.tau_min < unclamped < CFG.tau_max)
    assert update_proportional(at(tau), h, CFG).tau != tau


@given(st.floats(0.05, 0.95), unit, unit)
def test_monotone_response(tau, h1, h2):
    lo, hi = sorted((h1, h2))
    assert update_proportional(at(tau), lo, CFG).tau <= update_proportional(at(tau), hi, CFG).tau


@given(st.lists(unit, min_size=1, max_size=200))
def test_tau_stays_in_bounds(hs):
    ctl = Controller(CFG)
    for h in hs:
        ctl.observe(h, 1.0 - h)
        assert CFG.tau_min <= ctl.tau <= CFG.tau_max


# -- bump law ----------------------------------------------------------------


def test_bump_examples():
    assert update_bump(at(0.5), 0.80, BUMP).tau == pytest.approx(0.51)
    assert update_bump(at(0.5), 0.90, BUMP).tau == 0.5
    assert update_bump(at(0.95), 0.10, BUMP).tau == 0.95
    assert update_bump(at(0.5), 0.90, BUMP).step == 1


def test_bump_rejects_bad_gamma():
    with pytest.raises(GammaOutOfRange):
        update_bump(at(0.5), 1.5, BUMP)


@given(st.floats(0.05, 0.95), unit)
def test_bump_never_lowers_tau(tau, gamma):
    new = update_bump(at(tau), gamma, BUMP).tau
    assert new >= tau and BUMP.tau_min <= new <= BUMP.tau_max


def test_bump_decay_is_opt_in():
    cfg = ControllerConfig(mode=ControllerMode.BUMP, decay=0.1)
    assert update_bump(at(0.5), 0.9, cfg).tau == pytest.approx(0.45)


def test_controller_dispatches_on_mode():
    ctl = Controller(BUMP)
    ctl.observe(0.0, 0.5)  # h_t ignored, gamma below threshold
    assert ctl.tau == pytest.approx(0.51)
    static = Controller(ControllerConfig(mode=ControllerMode.STATIC))
    for h in (0.0, 1.0, 0.5):
        static.observe(h, 1 - h)
    assert static.tau == 0.5 and static.state.step == 3


# -- config ------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        dict(gain=0.0),
        dict(gain=2.5),
        dict(gain=-0.1),
        dict(tau_min=0.6),
        dict(tau_init=0.95),
        dict(tau_max=1.2),
        dict(h_target=1.0),
    ],
)
def test_config_rejects(kw):
    with pytest.raises(ValidationError):
        ControllerConfig(**kw)


def test_gain_range_flags():
    assert ControllerConfig(gain=0.05).gain_in_recommended_range
    assert not ControllerConfig(gain=1.5).gain_in_recommended_range
    ControllerConfig(gain=2.0)


# -- history -----------------------------------------------------------------


def test_history_ring_and_table():
    ctl = Controller(ControllerConfig(history_capacity=3))
    for h in (0.2, 0.3, 0.4, 0.5):
        ctl.observe(h, 1 - h)
    _, hist = ctl.snapshot()
    assert [r.t for r in hist] == [2, 3, 4]
    assert all(r.e_t == r.h_t - 0.1 for r in hist)
    lines = history_table(hist).splitlines()
    assert lines[0] == "t\ttau\th_t\te_t"
    assert lines[1].split("\t")[0] == "2"
    assert all(len(cell.split(".")[1]) == 6 for cell in lines[1].split("\t")[1:])


# -- stability ---------------------------------------------------------------


def test_stability_examples():
    rep = stability_analysis(0.1, 0.05, 1.0, 0.01)
    assert rep.loop_gain == pytest.approx(0.005)
    assert rep.classification is Stability.STABLE
    # closed form gives 919; the worked figure is "about 920"
    assert rep.predicted_frames_to_eps == frames_to_eps_oracle(0.005, 1.0, 0.01) == 919
    assert abs(rep.predicted_frames_to_eps - 920) <= 1

    rep = stability_analysis(0.1, 25.0, 1.0, 0.01)
    assert rep.classification is Stability.UNSTABLE and rep.predicted_frames_to_eps is None

    rep = stability_analysis(0.1, 0.05, 0.18, 0.01)
    assert rep.predicted_frames_to_eps == frames_to_eps_oracle(0.005, 0.18, 0.01) == 577


def test_marginal_and_oscillatory():
    assert classify(2.0) is Stability.MARGINAL
    assert classify(2.0 + 5e-10) is Stability.MARGINAL
    assert classify(2.0 + 1e-6) is Stability.UNSTABLE
    rep = stability_analysis(1.0, 1.5, 1.0, 0.01)
    assert rep.classification is Stability.STABLE and rep.oscillatory
    assert rep.predicted_frames_to_eps == frames_to_eps_oracle(1.5, 1.0, 0.01)


@given(st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_classification_matches_sign_test(beta, gain):
    lg = beta * gain
    assume(abs(lg - 2.0) > 1e-9)
    rep = stability_analysis(beta, gain, 1.0, 0.01)
    assert (rep.classification is Stability.STABLE) == (abs(1 - lg) < 1)


@given(st.floats(1e-3, 1.99), st.floats(1e-3, 1.0), st.floats(1e-4, 0.5))
def test_prediction_matches_arbitrary_precision(lg, e0, eps):
    assume(eps < e0 and abs(lg - 1.0) > 1e-6)
    rep = stability_analysis(1.0, lg, e0, eps)
    exact = frames_to_eps_oracle(lg, e0, eps)
    # float log vs 50-digit log may only disagree when the quotient is an integer
    assert abs(rep.predicted_frames_to_eps - exact) <= 1


@pytest.mark.parametrize("args", [(0, 0.05, 1, 0.01), (0.1, 0, 1, 0.01), (0.1, 0.05, -1, 0.01), (0.1, 0.05, 1, 0)])
def test_stability_rejects_non_positive(args):
    with pytest.raises(NonPositiveInput):
        stability_analysis(*args)


def test_residual_bound():
    assert residual_bound(0.1, 0.02) == pytest.approx(0.12)
    assert residual_bound(0.1, 0.0) == 0.1
    assert residual_bound(0.05, 0.02) == pytest.approx(0.07)
    with pytest.raises(ValidationError):
        residual_bound(0.1, -0.01)


# -- linear plant ------------------------------------------------------------


@given(st.floats(0.001, 0.999), st.floats(-0.5, 0.5))
def test_contraction_on_linear_plant(lg, e0):
    beta = 0.1
    plant = LinearPlant(beta, 0.5, 0.1)
    hist = iterate_plant(plant, lg / beta, 0.1, 0.5 - e0 / beta, 200)
    for a, b in zip(hist, hist[1:]):
        assert abs(b.e_t) <= (1 - lg) * abs(a.e_t) + 1e-12


@given(st.floats(0.01, 0.5))
def test_divergence_on_linear_plant(e0):
    plant = LinearPlant(0.1, 0.5, 0.1)
    hist = iterate_plant(plant, 25.0, 0.1, 0.5 - e0 / 0.1, 100)
    errs = [abs(r.e_t) for r in hist]
    assert all(b >= a for a, b in zip(errs, errs[1:]))


def test_iterate_plant_respects_bounds():
    hist = iterate_plant(LinearPlant(0.1, 0.5, 0.1), 25.0, 0.1, 0.4, 50, lo=0.05, hi=0.95)
    assert all(0.05 <= r.tau <= 0.95 for r in hist[1:])
    assert not math.isinf(hist[-1].e_t)
