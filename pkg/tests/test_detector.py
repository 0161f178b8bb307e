"""Tests for the radius, threshold, and log-likelihood detectors."""

import json
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timeguard.detector import (
    ConfigError,
    DetectorConfig,
    Hypothesis,
    LikelihoodDomainError,
    LlConfig,
    LlDetectorState,
    PairingError,
    StalenessError,
    Verdict,
    WarmupSignal,
    calibrate_ll,
    calibrate_ll_threshold,
    ll_advance,
    ll_step,
    ll_test,
    nts_lambda_from_sigma,
    nts_test,
    pair_epoch,
    roughtime_test,
    smooth_ll_update,
    verdict_from_json,
    verdict_to_json,
    window_log_stat,
    window_stat,
)
from timeguard.provider_nts import NtsMeasurement
from timeguard.provider_roughtime import RoughtimeMeasurement
from timeguard.receiver_feed import EpochRecord
from timeguard.timebase import (
    MonotonicInstant,
    SignedDuration,
    Timestamp,
    ts_add,
    ts_diff,
)

T_GNSS = Timestamp.from_unix_s(1_689_120_000)
MONO0 = MonotonicInstant(0)


def rt_meas(midpoint, radius_s, t_mono=MONO0):
    return RoughtimeMeasurement(midpoint, SignedDuration.from_s(radius_s), "rt", t_mono)


def nts_meas(offset_s, t_mono=MONO0):
    return NtsMeasurement(
        SignedDuration.from_s(offset_s), SignedDuration.from_s(0.01), t_mono, "nts"
    )


# -- Roughtime radius test --------------------------------------------------


def test_rt_within_radius():
    v = roughtime_test(ts_add(T_GNSS, SignedDuration.from_s(0.5)), rt_meas(T_GNSS, 1.0))
    assert v.hypothesis is Hypothesis.H0
    assert v.statistic == pytest.approx(0.5)
    assert v.threshold == pytest.approx(1.0)
    assert v.test == "rt"


def test_rt_large_offset_flagged():
    v = roughtime_test(ts_add(T_GNSS, SignedDuration.from_s(4.0)), rt_meas(T_GNSS, 1.0))
    assert v.hypothesis is Hypothesis.H1
    assert v.statistic == pytest.approx(4.0)


def test_rt_boundary_is_h1():
    radius = SignedDuration.from_s(1.0)
    t = ts_add(T_GNSS, SignedDuration(radius.units))
    meas = RoughtimeMeasurement(T_GNSS, radius, "rt", MONO0)
    assert roughtime_test(t, meas).hypothesis is Hypothesis.H1


def test_rt_declared_radius_capped():
    # declared 30 s, default cap 10 s: a 20 s offset must alarm
    v = roughtime_test(ts_add(T_GNSS, SignedDuration.from_s(20.0)), rt_meas(T_GNSS, 30.0))
    assert v.hypothesis is Hypothesis.H1
    assert v.threshold == pytest.approx(10.0)


def test_rt_small_declared_radius_used():
    v = roughtime_test(ts_add(T_GNSS, SignedDuration.from_s(0.7)), rt_meas(T_GNSS, 0.5))
    assert v.hypothesis is Hypothesis.H1
    assert v.threshold == pytest.approx(0.5)


def test_rt_staleness():
    meas = rt_meas(T_GNSS, 1.0, t_mono=MonotonicInstant(0))
    with pytest.raises(StalenessError):
        roughtime_test(T_GNSS, meas, t_mono_now=MonotonicInstant(61_000_000_000))
    v = roughtime_test(T_GNSS, meas, t_mono_now=MonotonicInstant(59_000_000_000))
    assert v.hypothesis is Hypothesis.H0


@given(
    st.integers(min_value=0, max_value=1 << 66),
    st.integers(min_value=0, max_value=1 << 66),
)
@settings(max_examples=200)
def test_rt_monotone_in_offset(units_a, units_b):
    small, large = sorted([units_a, units_b])
    meas = rt_meas(T_GNSS, 1.5)
    v_small = roughtime_test(ts_add(T_GNSS, SignedDuration(small)), meas)
    v_large = roughtime_test(ts_add(T_GNSS, SignedDuration(large)), meas)
    if v_small.hypothesis is Hypothesis.H1:
        assert v_large.hypothesis is Hypothesis.H1


def test_rt_pure():
    meas = rt_meas(T_GNSS, 1.0)
    assert roughtime_test(T_GNSS, meas) == roughtime_test(T_GNSS, meas)


# -- NTS threshold test -----------------------------------------------------

LAMBDA_150US = nts_lambda_from_sigma(50e-6, k=3.0)


def test_nts_zero_offset():
    v = nts_test(T_GNSS, nts_meas(0.0), LAMBDA_150US)
    assert v.hypothesis is Hypothesis.H0
    assert v.statistic == 0.0


def test_nts_offset_below_lambda():
    v = nts_test(T_GNSS, nts_meas(100e-6), LAMBDA_150US)
    assert v.hypothesis is Hypothesis.H0
    assert v.statistic == pytest.approx(100e-6)
    assert v.threshold == pytest.approx(150e-6)


def test_nts_accumulated_offset_flagged():
    # 100 increments of 2 us each
    v = nts_test(T_GNSS, nts_meas(200e-6), LAMBDA_150US)
    assert v.hypothesis is Hypothesis.H1


def test_nts_statistic_is_abs_offset():
    v = nts_test(T_GNSS, nts_meas(-200e-6), LAMBDA_150US)
    assert v.statistic == pytest.approx(200e-6)
    assert v.hypothesis is Hypothesis.H1


def test_nts_boundary_is_h1():
    offset = SignedDuration.from_s(1e-4)
    meas = NtsMeasurement(offset, SignedDuration(0), MONO0, "nts")
    v = nts_test(T_GNSS, meas, SignedDuration(offset.units))
    assert v.hypothesis is Hypothesis.H1


def test_nts_uncalibrated_lambda():
    with pytest.raises(ConfigError):
        nts_test(T_GNSS, nts_meas(0.0), None)
    with pytest.raises(ConfigError):
        nts_test(T_GNSS, nts_meas(0.0), SignedDuration(-5))


@given(st.integers(min_value=0, max_value=10**12), st.integers(min_value=0, max_value=10**12))
@settings(max_examples=200)
def test_nts_monotone_in_offset(ns_a, ns_b):
    small, large = sorted([ns_a, ns_b])
    v_small = nts_test(T_GNSS, nts_meas(small * 1e-9), LAMBDA_150US)
    v_large = nts_test(T_GNSS, nts_meas(large * 1e-9), LAMBDA_150US)
    if v_small.hypothesis is Hypothesis.H1:
        assert v_large.hypothesis is Hypothesis.H1


# -- window density ---------------------------------------------------------

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def oracle_log_p(window, mu0, floor, mode):
    mean = statistics.fmean(window)
    s2 = max(statistics.variance(window), floor)
    coeff = -0.5 * math.log(2.0 * math.pi * s2)
    if mode == "literal":
        return coeff - mean / s2
    return coeff - (mean - mu0) ** 2 / (2.0 * s2)


def test_window_stat_gaussian_zero_exponent():
    # mean 0, sample variance exactly 1
    p = window_stat([-1.0, 0.0, 1.0], mu0=0.0, sigma2_floor=1e-18)
    assert p == pytest.approx(INV_SQRT_2PI, rel=1e-12)


def test_window_stat_literal_zero_mean():
    p = window_stat([-1.0, 0.0, 1.0], mu0=0.0, sigma2_floor=1e-18, mode="literal")
    assert p == pytest.approx(INV_SQRT_2PI, rel=1e-12)


def test_window_stat_literal_sign_sensitive():
    # negative mean inflates p without bound; positive mean underflows
    down = [-1e-3, -1e-3 + 1e-9, -1e-3 - 1e-9]
    up = [1e-3, 1e-3 + 1e-9, 1e-3 - 1e-9]
    assert window_stat(down, 0.0, 1e-18, mode="literal") == math.inf
    assert window_stat(up, 0.0, 1e-18, mode="literal") == 0.0


def test_window_stat_matches_scalar_oracle():
    rng = np.random.default_rng(21)
    benign = rng.normal(0.0, 10e-9, 30).tolist()
    shifted = [x + 2e-6 for x in benign]
    for window in (benign, shifted):
        for mode in ("gaussian", "literal"):
            got = window_log_stat(window, 0.0, 1e-18, mode)
            assert got == pytest.approx(oracle_log_p(window, 0.0, 1e-18, mode), rel=1e-9)


def test_window_shift_ratio_matches_oracle():
    rng = np.random.default_rng(22)
    benign = rng.normal(0.0, 10e-9, 30).tolist()
    shifted = [x + 2e-6 for x in benign]
    got_ratio = window_log_stat(benign, 0.0, 1e-18) - window_log_stat(shifted, 0.0, 1e-18)
    want_ratio = oracle_log_p(benign, 0.0, 1e-18, "gaussian") - oracle_log_p(
        shifted, 0.0, 1e-18, "gaussian"
    )
    assert got_ratio == pytest.approx(want_ratio, rel=1e-9)
    assert window_stat(benign, 0.0, 1e-18) > 0.0
    assert window_stat(shifted, 0.0, 1e-18) == 0.0  # underflow under attack


@given(
    st.lists(
        st.floats(min_value=-10.0, max_value=10.0, allow_nan=False), min_size=2, max_size=40
    ),
    st.floats(min_value=-50.0, max_value=50.0, allow_nan=False),
    st.floats(min_value=-10.0, max_value=10.0, allow_nan=False),
)
@settings(max_examples=200)
def test_window_gaussian_shift_invariant(window, shift, mu0):
    base = window_log_stat(window, mu0, 1e-6)
    moved = window_log_stat([x + shift for x in window], mu0 + shift, 1e-6)
    assert moved == pytest.approx(base, rel=1e-9, abs=1e-6)


def test_window_warmup_signals():
    with pytest.raises(WarmupSignal):
        window_stat([1.0, 2.0, 3.0], 0.0, 1e-18, m=5)
    with pytest.raises(WarmupSignal):
        window_stat([1.0], 0.0, 1e-18)


def test_window_variance_floor():
    # constant window: sample variance 0 floored to (1 ns)^2
    p = window_stat([5e-9] * 10, mu0=5e-9, sigma2_floor=1e-18)
    assert p == pytest.approx(INV_SQRT_2PI / 1e-9, rel=1e-12)


# -- smoothing and threshold ------------------------------------------------


def test_smooth_alpha_one_keeps_z():
    assert smooth_ll_update(-3.7, 0.5, 1.0) == -3.7


def test_smooth_alpha_zero_is_ln_p():
    assert smooth_ll_update(123.0, 0.5, 0.0) == math.log(0.5)


def test_smooth_example():
    assert smooth_ll_update(-1.0, math.exp(-2.0), 0.9) == pytest.approx(-1.1, rel=1e-12)


def test_smooth_domain_errors():
    with pytest.raises(LikelihoodDomainError):
        smooth_ll_update(0.0, 0.0, 0.5)
    with pytest.raises(LikelihoodDomainError):
        smooth_ll_update(0.0, -1.0, 0.5)
    with pytest.raises(ConfigError):
        smooth_ll_update(0.0, 1.0, 1.2)


@given(
    st.floats(min_value=-100.0, max_value=100.0, allow_nan=False),
    st.floats(min_value=-50.0, max_value=20.0, allow_nan=False),
    st.floats(min_value=0.0, max_value=0.999, allow_nan=False),
    st.integers(min_value=1, max_value=60),
)
@settings(max_examples=200)
def test_smooth_contraction(z0, log_p, alpha, n):
    p = math.exp(log_p)
    z = z0
    for _ in range(n):
        z = smooth_ll_update(z, p, alpha)
    bound = alpha**n * abs(z0 - math.log(p)) + 1e-8 * (1.0 + abs(z0) + abs(log_p))
    assert abs(z - math.log(p)) <= bound


def test_ll_test_as_printed():
    assert ll_test(-5.0, -2.0, "as-printed").hypothesis is Hypothesis.H0
    assert ll_test(-2.0, -2.0, "as-printed").hypothesis is Hypothesis.H1
    assert ll_test(0.0, -2.0, "as-printed").hypothesis is Hypothesis.H1


def test_ll_test_neg_ll_default():
    v = ll_test(-5.0, 3.0)
    assert v.statistic == 5.0
    assert v.hypothesis is Hypothesis.H1
    assert ll_test(-1.0, 3.0).hypothesis is Hypothesis.H0


@given(
    st.lists(
        st.floats(min_value=-1.0, max_value=1.0, allow_nan=False), min_size=3, max_size=10
    ),
    st.floats(min_value=-10.0, max_value=10.0, allow_nan=False),
    st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
)
@settings(max_examples=150)
def test_smooth_consistent_with_log_domain(window, z_prev, alpha):
    # floor 1.0 keeps the density representable, so both routes agree
    via_p = smooth_ll_update(z_prev, window_stat(window, 0.0, 1.0), alpha)
    via_log = alpha * z_prev + (1.0 - alpha) * window_log_stat(window, 0.0, 1.0)
    assert via_p == pytest.approx(via_log, rel=1e-9, abs=1e-12)


# -- detector state driver --------------------------------------------------


def test_ll_step_warmup_then_verdicts():
    state = LlDetectorState(params=LlConfig(m=5, lambda_T=100.0))
    outs = [ll_step(state, 1e-9, MonotonicInstant(i)) for i in range(6)]
    assert outs[:4] == [None] * 4
    assert isinstance(outs[4], Verdict)
    assert outs[4].test == "ll"
    assert state.warmed


def test_ll_state_seeds_from_first_window():
    state = LlDetectorState(params=LlConfig(m=4))
    samples = [1e-9, -2e-9, 3e-9, 0.5e-9]
    for s in samples:
        ll_advance(state, s)
    assert state.z == pytest.approx(
        window_log_stat(samples, 0.0, state.params.sigma2_floor), rel=1e-12
    )


def test_ll_step_requires_threshold():
    state = LlDetectorState(params=LlConfig(m=2))
    ll_advance(state, 0.0)
    with pytest.raises(ConfigError):
        ll_step(state, 1e-9, MONO0)


def test_ll_window_bounded():
    state = LlDetectorState(params=LlConfig(m=3, lambda_T=100.0))
    for i in range(10):
        ll_step(state, float(i), MonotonicInstant(i))
    assert len(state.window) == 3


def test_calibrate_threshold_quantile():
    zs = [-float(i) for i in range(1, 2001)]  # statistics 1..2000 under neg-ll
    lam = calibrate_ll_threshold(zs, "neg-ll", far=1e-3)
    assert lam == 1999.0  # smallest statistic with at most 0.1% above it
    with pytest.raises(ConfigError):
        calibrate_ll_threshold(zs[:500], far=1e-3)
    with pytest.raises(ConfigError):
        calibrate_ll_threshold(zs, far=1.5)


def test_calibrated_benign_false_alarm_rate():
    rng = np.random.default_rng(31)
    params = calibrate_ll(LlConfig(), rng.normal(0.0, 10e-9, 6000), far=1e-3)
    assert params.lambda_T is not None
    assert params.sigma0_sq == pytest.approx(1e-16, rel=0.2)
    state = LlDetectorState(params=params)
    verdicts = [
        v
        for i, b in enumerate(rng.normal(0.0, 10e-9, 6000))
        if (v := ll_step(state, b, MonotonicInstant(i))) is not None
    ]
    far = sum(v.hypothesis is Hypothesis.H1 for v in verdicts) / len(verdicts)
    assert far <= 0.01


def test_smooth_pull_detected_before_completion():
    rng = np.random.default_rng(3)
    params = calibrate_ll(LlConfig(), rng.normal(0.0, 10e-9, 3000), far=1e-3)
    onset, complete = 200, 800
    biases = rng.normal(0.0, 10e-9, 1200)
    for i in range(len(biases)):
        if i >= complete:
            biases[i] += 2e-6
        elif i >= onset:
            biases[i] += 2e-6 * (i - onset) / (complete - onset)
    state = LlDetectorState(params=params)
    first_h1 = None
    for i, b in enumerate(biases):
        v = ll_step(state, b, MonotonicInstant(i))
        if v is not None and v.hypothesis is Hypothesis.H1:
            first_h1 = i
            break
    assert first_h1 is not None
    assert onset < first_h1 < complete


def test_ll_config_validation():
    with pytest.raises(ConfigError):
        LlConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        LlConfig(m=1)
    with pytest.raises(ConfigError):
        LlConfig(mode="bogus")
    with pytest.raises(ConfigError):
        LlConfig(polarity="both")
    with pytest.raises(ConfigError):
        LlConfig(sigma2_floor=0.0)
    with pytest.raises(ConfigError):
        DetectorConfig(rt_radius_max=SignedDuration(0))
    with pytest.raises(ConfigError):
        DetectorConfig(nts_sigma_k=0.0)


# -- pairing ----------------------------------------------------------------


def epoch(t_mono_s, unix_s, fix_valid=True):
    return EpochRecord(
        MonotonicInstant(int(t_mono_s * 1e9)), Timestamp.from_unix_s(unix_s), fix_valid
    )


def test_pair_nearest_and_extrapolate():
    epochs = [epoch(i, 1_000_000_000 + i) for i in range(5)]
    t = pair_epoch(epochs, MonotonicInstant(int(1.4e9)))
    assert ts_diff(t, epochs[1].t_gnss).to_s() == pytest.approx(0.4, abs=1e-12)


def test_pair_drift_scales_gap():
    epochs = [epoch(i, 1_000_000_000 + i) for i in range(5)]
    t = pair_epoch(epochs, MonotonicInstant(int(1.4e9)), drift=1e-6)
    assert ts_diff(t, epochs[1].t_gnss).to_s() == pytest.approx(0.4 * (1 + 1e-6), abs=1e-12)


def test_pair_tie_prefers_earlier():
    epochs = [epoch(1, 1_000_000_001), epoch(2, 1_000_000_012)]  # later epoch inconsistent
    t = pair_epoch(epochs, MonotonicInstant(int(1.5e9)))
    assert ts_diff(t, epochs[0].t_gnss).to_s() == pytest.approx(0.5, abs=1e-12)


def test_pair_skips_invalid_fixes():
    epochs = [epoch(0, 1_000_000_000), epoch(1, 1_000_000_001, fix_valid=False)]
    t = pair_epoch(epochs, MonotonicInstant(int(1.1e9)))
    assert ts_diff(t, epochs[0].t_gnss).to_s() == pytest.approx(1.1, abs=1e-12)


def test_pair_gap_too_large():
    with pytest.raises(PairingError):
        pair_epoch([epoch(0, 1_000_000_000)], MonotonicInstant(int(10e9)))


def test_pair_no_valid_epochs():
    with pytest.raises(PairingError):
        pair_epoch([], MonotonicInstant(0))
    with pytest.raises(PairingError):
        pair_epoch([epoch(0, 1_000_000_000, fix_valid=False)], MonotonicInstant(0))


# -- serialization ----------------------------------------------------------


def test_verdict_json_roundtrip():
    v = Verdict(
        test="nts",
        hypothesis=Hypothesis.H1,
        statistic=2.5e-4,
        threshold=1.5e-4,
        source_id="nts-1",
        t_mono=MonotonicInstant(123_456_789),
    )
    line = verdict_to_json(v)
    obj = json.loads(line)
    assert set(obj) == {"t_mono_ns", "test", "statistic", "threshold", "hypothesis", "source_id"}
    assert obj["hypothesis"] == "H1"
    assert verdict_from_json(line) == v
