"""Hypothesis tests that compare GNSS time against independent references.

Three tests, each emitting a Verdict (null hypothesis H0: the GNSS time
scale is genuine; H1: it is not):

  * Roughtime radius test: H0 iff |t_gnss - midpoint| < radius, strict.
  * NTS threshold test: H0 iff |t_gnss - t_nts| < lambda_T, strict, where
    t_nts is the local receipt estimate shifted by the measured offset.
  * Windowed smoothed log-likelihood test on oscillator-ensemble bias
    estimates: a density over the window mean is smoothed into Z and
    compared against a calibrated threshold.

All tests are pure functions of their inputs; only LlDetectorState
carries mutable history and it is single-owner by construction.
"""

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .receiver_feed import EpochRecord
from .timebase import MonotonicInstant, SignedDuration, Timestamp, ts_add, ts_diff


class DetectorError(Exception):
    """Base for detector failures."""


class StalenessError(DetectorError):
    """Measurement is older than the configured maximum age."""


class PairingError(DetectorError):
    """No GNSS epoch close enough to pair with a remote measurement."""


class ConfigError(DetectorError):
    """Threshold missing or parameters out of range."""


class WarmupSignal(DetectorError):
    """Window not yet full; the detector has no output for this epoch."""


class LikelihoodDomainError(DetectorError):
    """Log-likelihood update received a non-positive density."""


class Hypothesis(Enum):
    H0 = "H0"
    H1 = "H1"


DEFAULT_RT_RADIUS_MAX = SignedDuration.from_s(10)
DEFAULT_MAX_AGE_S = 60.0
DEFAULT_SIGMA2_FLOOR = 1e-18  # (1 ns)^2, below the benign noise floor
DEFAULT_PAIRING_GAP_S = 2.0


@dataclass(frozen=True)
class Verdict:
    """Outcome of one hypothesis test at one epoch."""

    test: str  # "rt" | "nts" | "ll"
    hypothesis: Hypothesis
    statistic: float
    threshold: float
    source_id: str
    t_mono: MonotonicInstant

    def __post_init__(self) -> None:
        if self.test not in ("rt", "nts", "ll"):
            raise ConfigError(f"unknown test kind {self.test!r}")


@dataclass(frozen=True)
class LlConfig:
    """Parameters of the windowed log-likelihood detector.

    mode selects the density: "gaussian" (default) uses the squared,
    centered exponent; "literal" keeps the sign-sensitive exponent
    -mean/sigma^2, which diverges for negative window means.  polarity
    "neg-ll" (default) alarms when -Z >= lambda_T; "as-printed" alarms
    when Z >= lambda_T.  sigma0_sq, when set (calibrate_ll fits it),
    fixes the density variance at the benign reference instead of the
    per-window sample variance, whose quiet-stretch collapse makes the
    statistic heavy-tailed.
    """

    alpha: float = 0.9
    m: int = 30
    lambda_T: Optional[float] = None
    mode: str = "gaussian"
    polarity: str = "neg-ll"
    mu0: float = 0.0
    sigma0_sq: Optional[float] = None
    sigma2_floor: float = DEFAULT_SIGMA2_FLOOR

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"smoothing factor {self.alpha} outside [0, 1]")
        if self.m < 2:
            raise ConfigError(f"window length {self.m} below 2")
        if self.mode not in ("literal", "gaussian"):
            raise ConfigError(f"unknown density mode {self.mode!r}")
        if self.polarity not in ("neg-ll", "as-printed"):
            raise ConfigError(f"unknown polarity {self.polarity!r}")
        if not self.sigma2_floor > 0.0:
            raise ConfigError("variance floor must be positive")
        if self.sigma0_sq is not None and not self.sigma0_sq > 0.0:
            raise ConfigError("reference variance must be positive when set")
        if self.lambda_T is not None and not math.isfinite(self.lambda_T):
            raise ConfigError("lambda_T must be finite")


@dataclass(frozen=True)
class DetectorConfig:
    """Thresholds for the two network tests plus log-likelihood params.

    The log-likelihood threshold lives on the statistic scale and may be
    negative; duration thresholds must be positive.
    """

    rt_radius_max: SignedDuration = DEFAULT_RT_RADIUS_MAX
    max_age_s: float = DEFAULT_MAX_AGE_S
    nts_lambda: Optional[SignedDuration] = None
    nts_sigma_k: float = 3.0
    ll: LlConfig = field(default_factory=LlConfig)

    def __post_init__(self) -> None:
        if self.rt_radius_max.units <= 0:
            raise ConfigError("rt_radius_max must be positive")
        if not self.max_age_s > 0.0:
            raise ConfigError("max_age_s must be positive")
        if self.nts_lambda is not None and self.nts_lambda.units <= 0:
            raise ConfigError("nts_lambda must be positive")
        if not self.nts_sigma_k > 0.0:
            raise ConfigError("nts_sigma_k must be positive")


def _check_age(t_mono_rx: MonotonicInstant, now: Optional[MonotonicInstant], max_age_s: float) -> None:
    if now is None:
        return
    age_s = now.elapsed_s(t_mono_rx)
    if age_s > max_age_s:
        raise StalenessError(f"measurement {age_s:.3f} s old exceeds {max_age_s} s")


def roughtime_test(
    t_gnss: Timestamp,
    meas,
    config: Optional[DetectorConfig] = None,
    t_mono_now: Optional[MonotonicInstant] = None,
) -> Verdict:
    """Coarse radius test: H0 iff |t_gnss - midpoint| < effective radius.

    The effective radius is the declared server radius capped at the
    configured maximum.  Comparison is strict and bit-exact in 2^-64 s
    units; equality at the boundary is H1.
    """
    config = config or DetectorConfig()
    _check_age(meas.t_mono_rx, t_mono_now, config.max_age_s)
    diff = ts_diff(t_gnss, meas.midpoint)
    radius_units = min(meas.radius.units, config.rt_radius_max.units)
    hypothesis = Hypothesis.H0 if abs(diff.units) < radius_units else Hypothesis.H1
    return Verdict(
        test="rt",
        hypothesis=hypothesis,
        statistic=abs(diff.to_s()),
        threshold=SignedDuration(radius_units).to_s(),
        source_id=meas.server_id,
        t_mono=meas.t_mono_rx,
    )


def nts_lambda_from_sigma(sigma_s: float, k: float = 3.0) -> SignedDuration:
    """Threshold from server quality: lambda_T = k standard deviations."""
    if not sigma_s >= 0.0 or not k > 0.0:
        raise ConfigError("sigma and k must be non-negative and positive")
    return SignedDuration.from_s(k * sigma_s)


def nts_test(
    t_gnss: Timestamp,
    meas,
    lambda_T: Optional[SignedDuration],
    config: Optional[DetectorConfig] = None,
    t_mono_now: Optional[MonotonicInstant] = None,
) -> Verdict:
    """Fine threshold test: H0 iff |t_gnss - t_nts| < lambda_T, strict.

    t_nts is the local receipt-time estimate corrected by the measured
    offset; with the GNSS-steered clock as the local estimate the
    statistic reduces to |offset|.
    """
    config = config or DetectorConfig()
    if lambda_T is None:
        raise ConfigError("nts lambda_T not calibrated; derive it from server sigma")
    if lambda_T.units <= 0:
        raise ConfigError("nts lambda_T must be positive")
    _check_age(meas.t_mono_rx, t_mono_now, config.max_age_s)
    t_nts = ts_add(t_gnss, meas.offset)
    diff = ts_diff(t_gnss, t_nts)
    hypothesis = Hypothesis.H0 if abs(diff.units) < lambda_T.units else Hypothesis.H1
    return Verdict(
        test="nts",
        hypothesis=hypothesis,
        statistic=abs(diff.to_s()),
        threshold=lambda_T.to_s(),
        source_id=meas.server_id,
        t_mono=meas.t_mono_rx,
    )


# -- windowed smoothed log-likelihood ---------------------------------------


def _window_moments(
    window: Sequence[float], sigma2_floor: float, m: Optional[int]
) -> tuple[float, float]:
    need = max(m if m is not None else 2, 2)
    if len(window) < need:
        raise WarmupSignal(f"window has {len(window)} of {need} samples")
    arr = np.asarray(window, dtype=np.float64)
    mean = float(arr.mean())
    var = float(arr.var(ddof=1))
    return mean, max(var, sigma2_floor)


def window_log_stat(
    window: Sequence[float],
    mu0: float,
    sigma2_floor: float,
    mode: str = "gaussian",
    m: Optional[int] = None,
    sigma0_sq: Optional[float] = None,
) -> float:
    """ln of the window density; immune to exp underflow under attack."""
    mean, s2 = _window_moments(window, sigma2_floor, m)
    if sigma0_sq is not None:
        s2 = max(sigma0_sq, sigma2_floor)
    coeff = -0.5 * math.log(2.0 * math.pi * s2)
    if mode == "literal":
        return coeff - mean / s2
    if mode == "gaussian":
        return coeff - (mean - mu0) ** 2 / (2.0 * s2)
    raise ConfigError(f"unknown density mode {mode!r}")


def window_stat(
    window: Sequence[float],
    mu0: float,
    sigma2_floor: float,
    mode: str = "gaussian",
    m: Optional[int] = None,
    sigma0_sq: Optional[float] = None,
) -> float:
    """Density of the window mean.

    literal mode: p = (2 pi s2)^(-1/2) exp(-mean / s2), sign-sensitive
    and divergent for negative means.  gaussian mode (default):
    p = (2 pi s2)^(-1/2) exp(-(mean - mu0)^2 / (2 s2)).  s2 is the
    sample variance floored at sigma2_floor, or sigma0_sq when given.
    """
    log_p = window_log_stat(window, mu0, sigma2_floor, mode, m, sigma0_sq)
    try:
        return math.exp(log_p)
    except OverflowError:
        return math.inf


def smooth_ll_update(z_prev: float, p: float, alpha: float) -> float:
    """Z = alpha * Z_prev + (1 - alpha) * ln p."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"smoothing factor {alpha} outside [0, 1]")
    if not p > 0.0:
        raise LikelihoodDomainError(f"density {p} is not positive")
    return alpha * z_prev + (1.0 - alpha) * math.log(p)


def ll_test(
    z: float,
    lambda_T: float,
    polarity: str = "neg-ll",
    source_id: str = "ensemble",
    t_mono: MonotonicInstant = MonotonicInstant(0),
) -> Verdict:
    """Threshold the smoothed statistic.

    as-printed: H0 iff Z < lambda_T.  neg-ll (default): the statistic is
    -Z and H1 iff -Z >= lambda_T.  Both alarm on statistic >= threshold.
    """
    if polarity == "neg-ll":
        statistic = -z
    elif polarity == "as-printed":
        statistic = z
    else:
        raise ConfigError(f"unknown polarity {polarity!r}")
    hypothesis = Hypothesis.H0 if statistic < lambda_T else Hypothesis.H1
    return Verdict(
        test="ll",
        hypothesis=hypothesis,
        statistic=statistic,
        threshold=lambda_T,
        source_id=source_id,
        t_mono=t_mono,
    )


@dataclass
class LlDetectorState:
    """Single-owner history of the log-likelihood detector.

    With a calibrated reference variance, Z is seeded at the stationary
    mean of ln p under the null, so a fresh start carries no transient
    in either direction.  Without one, Z seeds from the first
    full-window ln p, which is self-normalized and equally safe.
    """

    params: LlConfig = field(default_factory=LlConfig)
    z: Optional[float] = None
    window: deque = field(init=False)

    def __post_init__(self) -> None:
        self.window = deque(maxlen=self.params.m)

    @property
    def warmed(self) -> bool:
        return self.z is not None


def ll_advance(state: LlDetectorState, bias_s: float) -> Optional[float]:
    """Push one bias estimate; returns updated Z, or None while warming."""
    state.window.append(float(bias_s))
    if len(state.window) < state.params.m:
        return None
    p = state.params
    log_p = window_log_stat(state.window, p.mu0, p.sigma2_floor, p.mode, sigma0_sq=p.sigma0_sq)
    if state.z is None:
        if p.sigma0_sq is not None:
            # E[ln p] under the fitted null: coeff - E[(mean-mu0)^2]/(2 s2)
            s2 = max(p.sigma0_sq, p.sigma2_floor)
            seed = -0.5 * math.log(2.0 * math.pi * s2) - 1.0 / (2.0 * p.m)
            state.z = p.alpha * seed + (1.0 - p.alpha) * log_p
        else:
            state.z = log_p
    else:
        state.z = p.alpha * state.z + (1.0 - p.alpha) * log_p
    return state.z


def ll_step(
    state: LlDetectorState,
    bias_s: float,
    t_mono: MonotonicInstant,
    source_id: str = "ensemble",
) -> Optional[Verdict]:
    """One detector epoch; None during warm-up."""
    z = ll_advance(state, bias_s)
    if z is None:
        return None
    if state.params.lambda_T is None:
        raise ConfigError("ll lambda_T not calibrated")
    return ll_test(z, state.params.lambda_T, state.params.polarity, source_id, t_mono)


def calibrate_ll_threshold(
    z_values: Sequence[float], polarity: str = "neg-ll", far: float = 1e-3
) -> float:
    """Empirical (1 - far) quantile of the statistic over a benign run."""
    if not 0.0 < far < 1.0:
        raise ConfigError(f"false-alarm rate {far} outside (0, 1)")
    if len(z_values) * far < 1.0:
        raise ConfigError(f"need at least {math.ceil(1 / far)} benign epochs")
    if polarity == "neg-ll":
        stats = [-z for z in z_values]
    elif polarity == "as-printed":
        stats = list(z_values)
    else:
        raise ConfigError(f"unknown polarity {polarity!r}")
    return float(np.quantile(stats, 1.0 - far, method="higher"))


def calibrate_ll(
    params: LlConfig, benign_biases: Sequence[float], far: float = 1e-3
) -> LlConfig:
    """Fit mu0, sigma0^2, and lambda_T from a benign bias stream.

    Two passes: reference moments first, then the statistic quantile
    under those moments.
    """
    arr = np.asarray(benign_biases, dtype=np.float64)
    if arr.size < params.m:
        raise ConfigError(f"need at least m={params.m} benign samples")
    fitted = replace(params, mu0=float(arr.mean()), sigma0_sq=float(arr.var(ddof=1)))
    state = LlDetectorState(params=fitted)
    zs = [z for b in arr if (z := ll_advance(state, float(b))) is not None]
    lam = calibrate_ll_threshold(zs, fitted.polarity, far)
    return replace(fitted, lambda_T=lam)


# -- pairing ----------------------------------------------------------------


def pair_epoch(
    epochs: Sequence[EpochRecord],
    target: MonotonicInstant,
    drift: float = 0.0,
    max_gap_s: float = DEFAULT_PAIRING_GAP_S,
) -> Timestamp:
    """GNSS time at a remote measurement's arrival instant.

    Picks the valid-fix epoch nearest in monotonic time (ties to the
    earlier one) and extrapolates its UTC linearly across the gap at
    rate 1 + drift.
    """
    best: Optional[EpochRecord] = None
    best_gap = 0
    for epoch in epochs:
        if not epoch.fix_valid:
            continue
        gap = abs(target.nanoseconds - epoch.t_mono.nanoseconds)
        if best is None or gap < best_gap:
            best, best_gap = epoch, gap
    if best is None:
        raise PairingError("no valid-fix epoch available")
    if best_gap > max_gap_s * 1e9:
        raise PairingError(f"nearest epoch {best_gap / 1e9:.3f} s away exceeds {max_gap_s} s")
    dt_s = (target.nanoseconds - best.t_mono.nanoseconds) / 1e9
    return ts_add(best.t_gnss, SignedDuration.from_s(dt_s * (1.0 + drift)))


# -- serialization ----------------------------------------------------------


def verdict_to_json(verdict: Verdict) -> str:
    return json.dumps(
        {
            "t_mono_ns": verdict.t_mono.nanoseconds,
            "test": verdict.test,
            "statistic": verdict.statistic,
            "threshold": verdict.threshold,
            "hypothesis": verdict.hypothesis.value,
            "source_id": verdict.source_id,
        },
        separators=(",", ":"),
    )


def verdict_from_json(line: str) -> Verdict:
    obj = json.loads(line)
    return Verdict(
        test=obj["test"],
        hypothesis=Hypothesis(obj["hypothesis"]),
        statistic=float(obj["statistic"]),
        threshold=float(obj["threshold"]),
        source_id=obj["source_id"],
        t_mono=MonotonicInstant(int(obj["t_mono_ns"])),
    )
