"""End-to-end validation pipeline.

Joins the pieces in fixed per-epoch order: receiver epoch in, Kalman
tracking of the GNSS-vs-local-clock bias, the log-likelihood detector
on the filter innovations, remote-provider verdicts, then the
orchestrator.  The same engine replays simulator output and drives the
live monitor; everything it emits is deterministic for a given scenario
and configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .attack_sim import ScenarioSpec, SimOutputs, builtin_scenarios, gen_scenario, network_available
from .config import AppConfig, EnsembleConfig
from .detector import (
    DetectorConfig,
    Hypothesis,
    LlConfig,
    LlDetectorState,
    Verdict,
    calibrate_ll,
    ll_step,
    nts_test,
    roughtime_test,
    verdict_from_json,
    verdict_to_json,
)
from .ensemble import ClockKfState, kf_init, kf_predict, kf_update
from .orchestrator import (
    RESET_FILTER,
    Event,
    EventKind,
    OrchestratorState,
    TransitionRecord,
    initial_state,
    step,
)
from .receiver_feed import EpochRecord
from .timebase import MonotonicInstant, Timestamp, ts_diff

class CalibrationNeeded(Exception):
    """The ll threshold is unset and no calibration source was given."""


@dataclass
class FilterChain:
    """Kalman tracker feeding the ll detector its innovations.

    The chain consumes one bias observation per epoch (GNSS time minus
    the local clock's projection, seconds), tracks it with a gated
    two-state filter, and hands the innovation, observation minus
    one-step prediction, to the log-likelihood detector.  Benign
    innovations are white at the readout-noise scale, so the detector's
    null is stationary; a spoof the gate rejects leaves a sustained
    innovation shift for as long as the discrepancy lasts.
    """

    ensemble: EnsembleConfig
    ll_params: LlConfig
    sigma_meas_s: Optional[float] = None
    kf: ClockKfState = field(init=False)
    ll_state: LlDetectorState = field(init=False)
    _last: Optional[MonotonicInstant] = field(init=False, default=None)

    def __post_init__(self) -> None:
        if self.sigma_meas_s is None:
            self.sigma_meas_s = self.ensemble.sigma_meas_s
        self.reset(MonotonicInstant(0))

    def reset(self, at: MonotonicInstant) -> None:
        self.kf = kf_init(self.ensemble.oscillator, at=at)
        self.ll_state = LlDetectorState(params=self.ll_params)
        self._last = None

    def track(self, bias_s: float, t_mono: MonotonicInstant) -> tuple[float, float]:
        """Filter one observation; returns (filtered bias, innovation)."""
        if self._last is not None:
            self.kf = kf_predict(self.kf, t_mono.elapsed_s(self._last))
        self._last = t_mono
        r = max(self.sigma_meas_s, 1e-12) ** 2
        update = kf_update(self.kf, bias_s, r, self.ensemble.gate_k)
        self.kf = update.state
        return self.kf.bias, float(update.innovation[0])

    def step(self, bias_s: float, t_mono: MonotonicInstant) -> tuple[float, Optional[Verdict]]:
        """One epoch: returns the filtered bias and the ll verdict, if warmed."""
        xhat, innovation = self.track(bias_s, t_mono)
        return xhat, ll_step(self.ll_state, innovation, t_mono)


def local_bias_s(
    rec: EpochRecord, utc0: Timestamp, mono0: MonotonicInstant, osc_bias_s: float = 0.0
) -> float:
    """Observed GNSS-minus-local-clock offset for one epoch.

    The local clock is anchored at the first fix (utc0, mono0) and
    advances with the monotonic counter plus any separately modelled
    oscillator wander.  Integer arithmetic first, so the float rounding
    applies only to the small residual.
    """
    diff_units = ts_diff(rec.t_gnss, utc0).units
    # exact to the 2^-64 s unit: floor once on the full product
    elapsed_units = ((rec.t_mono.nanoseconds - mono0.nanoseconds) << 64) // 10**9
    return (diff_units - elapsed_units) / 2.0**64 - osc_bias_s


# -- ll threshold calibration ------------------------------------------------


def training_residuals(scenario: ScenarioSpec, config: AppConfig) -> np.ndarray:
    """Filter innovations from a benign run, for threshold fitting."""
    outputs = gen_scenario(scenario)
    chain = FilterChain(
        ensemble=config.ensemble,
        ll_params=replace(config.detector.ll, lambda_T=None),
        sigma_meas_s=max(scenario.benign_jitter_sigma_s, 1e-12),
    )
    utc0, mono0 = outputs.epochs[0].t_gnss, outputs.epochs[0].t_mono
    residuals = np.empty(len(outputs.epochs))
    for e, rec in enumerate(outputs.epochs):
        z = local_bias_s(rec, utc0, mono0, outputs.osc_bias_s[e])
        _, residuals[e] = chain.track(z, rec.t_mono)
    return residuals


def resolve_ll(config: AppConfig) -> LlConfig:
    """The ll parameters to run with; calibrates lambda_T if unset.

    The fitted threshold is the benign quantile at the configured
    false-alarm rate plus a safety margin, so routine operation stays
    quiet while the quantile itself remains available for analysis.
    """
    ll = config.detector.ll
    if ll.lambda_T is not None:
        return ll
    table = builtin_scenarios()
    if config.calibration.scenario not in table:
        raise CalibrationNeeded(
            f"calibration scenario {config.calibration.scenario!r} is not bundled"
        )
    residuals = training_residuals(table[config.calibration.scenario], config)
    fitted = calibrate_ll(ll, residuals, far=config.calibration.far)
    return replace(fitted, lambda_T=fitted.lambda_T + config.calibration.margin)


# -- reports -----------------------------------------------------------------


@dataclass(frozen=True)
class DetectorOutcome:
    """Did one test fire during the attack, and how fast."""

    detected: bool
    latency_epochs: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.detected and self.latency_epochs is not None:
            raise ValueError("latency is reported only when detected")


@dataclass(frozen=True)
class RunReport:
    scenario: str
    outcomes: dict
    false_alarms: int
    final_phase: str
    config_sha256: str

    @property
    def any_h1(self) -> bool:
        return self.false_alarms > 0 or any(o.detected for o in self.outcomes.values())


def report_to_json(report: RunReport) -> str:
    obj = {
        "scenario": report.scenario,
        "outcomes": {
            test: {"detected": o.detected, "latency_epochs": o.latency_epochs}
            for test, o in report.outcomes.items()
        },
        "false_alarms": report.false_alarms,
        "final_phase": report.final_phase,
        "config_sha256": report.config_sha256,
    }
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def report_from_json(text: str) -> RunReport:
    obj = json.loads(text)
    outcomes = {
        test: DetectorOutcome(detected=o["detected"], latency_epochs=o["latency_epochs"])
        for test, o in obj["outcomes"].items()
    }
    return RunReport(
        scenario=obj["scenario"],
        outcomes=outcomes,
        false_alarms=obj["false_alarms"],
        final_phase=obj["final_phase"],
        config_sha256=obj["config_sha256"],
    )


# -- scenario replay ---------------------------------------------------------


@dataclass
class PipelineResult:
    verdicts: list
    transitions: list
    events: list
    state: OrchestratorState
    xhat_bias_s: np.ndarray
    innovation_s: np.ndarray = None
    report: Optional[RunReport] = None


def _epoch_of(v: Verdict, period_s: float) -> int:
    return round(v.t_mono.nanoseconds / (period_s * 1e9))


def build_report(outputs: SimOutputs, result: PipelineResult, config_hash: str) -> RunReport:
    """Score verdicts against exact ground truth.

    An H1 at an epoch whose injected offset is zero counts as a false
    alarm; the first H1 at a nonzero offset is the detection, with
    latency measured from attack onset.
    """
    spec = outputs.spec
    truth = outputs.truth_offset_s
    outcomes = {}
    false_alarms = 0
    for test in ("rt", "nts", "ll"):
        hits = sorted(
            _epoch_of(v, spec.epoch_period_s)
            for v in result.verdicts
            if v.test == test and v.hypothesis is Hypothesis.H1
        )
        false_alarms += sum(1 for e in hits if truth[min(e, len(truth) - 1)] == 0.0)
        real = [e for e in hits if truth[min(e, len(truth) - 1)] != 0.0]
        if real:
            outcomes[test] = DetectorOutcome(True, real[0] - spec.attack.onset_epoch)
        else:
            outcomes[test] = DetectorOutcome(False)
    return RunReport(
        scenario=spec.name,
        outcomes=outcomes,
        false_alarms=false_alarms,
        final_phase=result.state.phase.value,
        config_sha256=config_hash,
    )


def run_scenario(
    outputs: SimOutputs,
    config: AppConfig,
    ll_params: Optional[LlConfig] = None,
) -> PipelineResult:
    """Replay simulator output through the full detection stack."""
    spec = outputs.spec
    ll = ll_params if ll_params is not None else resolve_ll(config)
    chain = FilterChain(
        ensemble=config.ensemble,
        ll_params=ll,
        sigma_meas_s=max(spec.benign_jitter_sigma_s, 1e-12),
    )
    det_cfg = config.detector
    state = initial_state()
    verdicts: list = []
    transitions: list = []
    events: list = []
    xhat = np.empty(len(outputs.epochs))
    innovations = np.empty(len(outputs.epochs))
    utc0, mono0 = outputs.epochs[0].t_gnss, outputs.epochs[0].t_mono
    online = True
    seen_fix = False

    def feed(event: Event) -> None:
        nonlocal state
        before = state.phase
        state, actions = step(state, event, config.orchestrator)
        events.append(event)
        transitions.append(
            TransitionRecord(
                t_mono=event.t_mono,
                event=event.kind.value,
                from_phase=before,
                to_phase=state.phase,
                active_source=state.active_time_source,
                actions=tuple(actions),
            )
        )
        if RESET_FILTER in actions:
            chain.reset(event.t_mono)

    for e, rec in enumerate(outputs.epochs):
        t = rec.t_mono
        if rec.fix_valid and not seen_fix:
            seen_fix = True
            feed(Event(EventKind.FIX_ACQUIRED, t))
        now_online = network_available(spec, e)
        if now_online != online:
            online = now_online
            feed(Event(EventKind.NETWORK_UP if online else EventKind.NETWORK_DOWN, t))
        z = local_bias_s(rec, utc0, mono0, outputs.osc_bias_s[e])
        xhat[e], innovations[e] = chain.track(z, t)
        ll_verdict = ll_step(chain.ll_state, innovations[e], t)
        if ll_verdict is not None:
            verdicts.append(ll_verdict)
            feed(Event(EventKind.LL_VERDICT, t, ll_verdict))
        if e in outputs.rt_responses:
            v = roughtime_test(rec.t_gnss, outputs.rt_responses[e], det_cfg, t_mono_now=t)
            verdicts.append(v)
            feed(Event(EventKind.RT_VERDICT, t, v))
        if e in outputs.nts_responses:
            v = nts_test(rec.t_gnss, outputs.nts_responses[e], det_cfg.nts_lambda, det_cfg, t)
            verdicts.append(v)
            feed(Event(EventKind.NTS_VERDICT, t, v))
        feed(Event(EventKind.TICK, t))

    return PipelineResult(
        verdicts=verdicts,
        transitions=transitions,
        events=events,
        state=state,
        xhat_bias_s=xhat,
        innovation_s=innovations,
    )


def run_named_scenario(
    name_or_spec,
    config: AppConfig,
    config_hash: str = "",
    ll_params: Optional[LlConfig] = None,
) -> tuple[SimOutputs, PipelineResult]:
    """Generate and replay in one call; attaches the scored report."""
    spec = (
        name_or_spec
        if isinstance(name_or_spec, ScenarioSpec)
        else builtin_scenarios()[name_or_spec]
    )
    outputs = gen_scenario(spec)
    result = run_scenario(outputs, config, ll_params)
    result.report = build_report(outputs, result, config_hash)
    return outputs, result


# -- event log serialization -------------------------------------------------


def event_to_json(event: Event) -> str:
    obj: dict = {"t_mono_ns": event.t_mono.nanoseconds, "kind": event.kind.value}
    if event.verdict is not None:
        obj["verdict"] = json.loads(verdict_to_json(event.verdict))
    return json.dumps(obj, separators=(",", ":"))


def event_from_json(line: str) -> Event:
    obj = json.loads(line)
    verdict = None
    if "verdict" in obj:
        verdict = verdict_from_json(json.dumps(obj["verdict"]))
    return Event(
        kind=EventKind(obj["kind"]),
        t_mono=MonotonicInstant(int(obj["t_mono_ns"])),
        verdict=verdict,
    )


def write_verdicts_jsonl(fh, verdicts: Iterable[Verdict]) -> None:
    for v in verdicts:
        fh.write(verdict_to_json(v) + "\n")


VERDICT_CSV_HEADER = "t_mono_ns,test,statistic,threshold,hypothesis,source_id"


def write_verdicts_csv(fh, verdicts: Iterable[Verdict]) -> None:
    fh.write(VERDICT_CSV_HEADER + "\n")
    for v in verdicts:
        fh.write(
            f"{v.t_mono.nanoseconds},{v.test},{v.statistic!r},{v.threshold!r},"
            f"{v.hypothesis.value},{v.source_id}\n"
        )
