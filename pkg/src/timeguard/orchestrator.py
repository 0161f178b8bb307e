"""Event-driven supervision of GNSS time validation.

A pure state machine that refines trust progressively: cold start, coarse
validation against Roughtime (or NTS when Roughtime is unreachable), fine
monitoring against NTS, holdover on the local ensemble when the network
drops, latched alarm on any H1 verdict, and a cold-start reset once a GNSS
outage outlives the broadcast ephemeris.

step() is a pure function of (state, event, config); replaying an event
log reproduces the state trajectory exactly.  Producers enqueue immutable
events; a single logical consumer applies them in monotonic order.
"""

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

from .detector import Hypothesis, Verdict
from .timebase import MonotonicInstant


class OrchestratorError(Exception):
    """Base for supervision failures."""


class OrderingError(OrchestratorError):
    """Event timestamped before one already processed."""


class PolicyError(OrchestratorError):
    """Trust policy or configuration out of range."""


class Phase(Enum):
    COLD_START = "COLD_START"
    COARSE_VALIDATED = "COARSE_VALIDATED"
    FINE_MONITORING = "FINE_MONITORING"
    HOLDOVER = "HOLDOVER"
    ALARM = "ALARM"
    RESET_PENDING = "RESET_PENDING"


class Connectivity(Enum):
    ONLINE = "online"
    OFFLINE = "offline"


class OutageClass(Enum):
    SHORT = "Short"
    LONG = "Long"


class EventKind(Enum):
    FIX_ACQUIRED = "FixAcquired"
    FIX_LOST = "FixLost"
    RT_VERDICT = "RtVerdict"
    NTS_VERDICT = "NtsVerdict"
    LL_VERDICT = "LlVerdict"
    NETWORK_UP = "NetworkUp"
    NETWORK_DOWN = "NetworkDown"
    TICK = "Tick"
    CLEAR = "Clear"


_VERDICT_KINDS = (EventKind.RT_VERDICT, EventKind.NTS_VERDICT, EventKind.LL_VERDICT)

SOURCE_LABELS = ("gnss", "ensemble", "nts", "roughtime")

SCHEDULE_RT = "schedule_poll:roughtime"
SCHEDULE_NTS = "schedule_poll:nts"
RESET_FILTER = "reset_filter:ensemble"


def alert(reason: str) -> str:
    return f"alert:{reason}"


@dataclass(frozen=True)
class Event:
    """Immutable input to the state machine; verdict kinds carry payload."""

    kind: EventKind
    t_mono: MonotonicInstant
    verdict: Optional[Verdict] = None

    def __post_init__(self) -> None:
        if self.kind in _VERDICT_KINDS and self.verdict is None:
            raise PolicyError(f"{self.kind.value} event requires a verdict payload")


@dataclass(frozen=True)
class TrustPolicy:
    """Trust descends ensemble, NTS, Roughtime once GNSS is suspect;
    accuracy descends GNSS, ensemble, NTS, Roughtime.
    """

    configured: tuple = SOURCE_LABELS
    trust_order: tuple = ("ensemble", "nts", "roughtime")
    accuracy_order: tuple = SOURCE_LABELS

    def __post_init__(self) -> None:
        if not self.configured:
            raise PolicyError("at least one source must be configured")
        unknown = set(self.configured) - set(SOURCE_LABELS)
        if unknown:
            raise PolicyError(f"unknown source labels {sorted(unknown)}")


@dataclass(frozen=True)
class OrchestratorConfig:
    ephemeris_validity_s: float = 4 * 3600.0
    auto_clear_k: int = 10
    rt_poll_s: float = 10.0
    nts_poll_s: float = 30.0
    policy: TrustPolicy = field(default_factory=TrustPolicy)

    def __post_init__(self) -> None:
        if self.ephemeris_validity_s <= 0 or self.auto_clear_k < 1:
            raise PolicyError("validity must be positive and auto_clear_k >= 1")
        if self.rt_poll_s <= 0 or self.nts_poll_s <= 0:
            raise PolicyError("poll cadences must be positive")


@dataclass(frozen=True)
class SourceSummary:
    """Last hypothesis per test; None means not yet exercised."""

    last_rt: Optional[Hypothesis] = None
    last_nts: Optional[Hypothesis] = None
    last_ll: Optional[Hypothesis] = None

    @property
    def any_h1(self) -> bool:
        return Hypothesis.H1 in (self.last_rt, self.last_nts, self.last_ll)


@dataclass(frozen=True)
class OrchestratorState:
    phase: Phase = Phase.COLD_START
    connectivity: Connectivity = Connectivity.ONLINE
    outage_started: Optional[MonotonicInstant] = None
    active_time_source: str = "gnss"
    summary: SourceSummary = field(default_factory=SourceSummary)
    coarse_validated: bool = False
    clean_streak: int = 0
    last_t_mono: Optional[MonotonicInstant] = None


def initial_state() -> OrchestratorState:
    return OrchestratorState()


def outage_classify(duration_s: float, ephemeris_validity_s: float) -> OutageClass:
    """Short iff the outage fits inside the ephemeris validity, inclusive."""
    if duration_s < 0:
        raise PolicyError(f"negative outage duration {duration_s}")
    return OutageClass.SHORT if duration_s <= ephemeris_validity_s else OutageClass.LONG


def trust_select(
    summary: SourceSummary,
    connectivity: Connectivity = Connectivity.ONLINE,
    policy: TrustPolicy = TrustPolicy(),
    force_suspect: bool = False,
) -> str:
    """Most accurate source when all tests pass, else most trusted clean one.

    The ensemble sits inside the hardware boundary and stays eligible
    offline; network sources need connectivity.  "none" means fail-safe.
    """
    if not force_suspect and not summary.any_h1 and "gnss" in policy.configured:
        return "gnss"
    online = connectivity is Connectivity.ONLINE
    clean = {"ensemble": True, "nts": online, "roughtime": online}
    for label in policy.trust_order:
        if label in policy.configured and clean.get(label, False):
            return label
    return "none"


def _update_summary(summary: SourceSummary, kind: EventKind, h: Hypothesis) -> SourceSummary:
    if kind is EventKind.RT_VERDICT:
        return replace(summary, last_rt=h)
    if kind is EventKind.NTS_VERDICT:
        return replace(summary, last_nts=h)
    return replace(summary, last_ll=h)


def _cleared(coarse_validated: bool) -> tuple[Phase, SourceSummary, int]:
    phase = Phase.COARSE_VALIDATED if coarse_validated else Phase.COLD_START
    return phase, SourceSummary(), 0


def step(
    state: OrchestratorState, event: Event, config: Optional[OrchestratorConfig] = None
) -> tuple[OrchestratorState, list[str]]:
    """Apply one event; returns the new state and side-effect requests."""
    config = config or OrchestratorConfig()
    if state.last_t_mono is not None and event.t_mono < state.last_t_mono:
        raise OrderingError(
            f"event at {event.t_mono.nanoseconds} ns precedes {state.last_t_mono.nanoseconds} ns"
        )
    actions: list[str] = []
    phase = state.phase
    connectivity = state.connectivity
    outage = state.outage_started
    summary = state.summary
    coarse = state.coarse_validated
    streak = state.clean_streak

    kind = event.kind
    if kind is EventKind.FIX_ACQUIRED:
        outage = None
        if phase is Phase.COLD_START:
            actions.append(SCHEDULE_RT)
        elif phase is Phase.RESET_PENDING:
            phase = Phase.COLD_START
            summary = SourceSummary()
            coarse = False
            streak = 0
            actions.append(SCHEDULE_RT)
    elif kind is EventKind.FIX_LOST:
        if outage is None:
            outage = event.t_mono
    elif kind in _VERDICT_KINDS:
        verdict = event.verdict
        summary = _update_summary(summary, kind, verdict.hypothesis)
        if verdict.hypothesis is Hypothesis.H1:
            if phase is not Phase.ALARM:
                actions.append(alert(f"h1:{verdict.test}:{verdict.source_id}"))
            phase = Phase.ALARM
            streak = 0
        elif phase is Phase.ALARM:
            streak += 1
            if streak >= config.auto_clear_k:
                phase, summary, streak = _cleared(coarse)
                actions.append(alert("auto_clear"))
        elif kind is EventKind.RT_VERDICT and phase is Phase.COLD_START:
            phase = Phase.COARSE_VALIDATED
            coarse = True
            actions += [RESET_FILTER, SCHEDULE_NTS]
        elif kind is EventKind.NTS_VERDICT and phase is Phase.COLD_START:
            # Roughtime unreachable: the tighter NTS bound covers coarse too
            phase = Phase.COARSE_VALIDATED
            coarse = True
            actions += [RESET_FILTER, SCHEDULE_NTS]
        elif kind is EventKind.NTS_VERDICT and phase is Phase.COARSE_VALIDATED:
            phase = Phase.FINE_MONITORING
    elif kind is EventKind.NETWORK_DOWN:
        connectivity = Connectivity.OFFLINE
        if phase in (Phase.FINE_MONITORING, Phase.COARSE_VALIDATED):
            phase = Phase.HOLDOVER
    elif kind is EventKind.NETWORK_UP:
        connectivity = Connectivity.ONLINE
        if phase is Phase.HOLDOVER:
            # re-validate via NTS before resuming fine monitoring
            phase = Phase.COARSE_VALIDATED
            actions.append(SCHEDULE_NTS)
    elif kind is EventKind.TICK:
        if outage is not None and phase is not Phase.RESET_PENDING:
            duration_s = event.t_mono.elapsed_s(outage)
            if outage_classify(duration_s, config.ephemeris_validity_s) is OutageClass.LONG:
                phase = Phase.RESET_PENDING
                actions.append(alert("gnss_outage_exceeds_ephemeris_validity"))
    elif kind is EventKind.CLEAR:
        if phase is Phase.ALARM:
            phase, summary, streak = _cleared(coarse)

    suspect = phase in (Phase.ALARM, Phase.RESET_PENDING)
    active = trust_select(summary, connectivity, config.policy, force_suspect=suspect)
    if active == "none":
        actions.append(alert("no_clean_time_source"))
    new_state = replace(
        state,
        phase=phase,
        connectivity=connectivity,
        outage_started=outage,
        active_time_source=active,
        summary=summary,
        coarse_validated=coarse,
        clean_streak=streak,
        last_t_mono=event.t_mono,
    )
    return new_state, actions


@dataclass(frozen=True)
class TransitionRecord:
    t_mono: MonotonicInstant
    event: str
    from_phase: Phase
    to_phase: Phase
    active_source: str
    actions: tuple


def replay(
    events: Sequence[Event],
    config: Optional[OrchestratorConfig] = None,
    state: Optional[OrchestratorState] = None,
) -> tuple[OrchestratorState, list[TransitionRecord]]:
    """Run an event log through step(), collecting the transition trail."""
    state = state if state is not None else initial_state()
    records = []
    for event in events:
        before = state.phase
        state, actions = step(state, event, config)
        records.append(
            TransitionRecord(
                t_mono=event.t_mono,
                event=event.kind.value,
                from_phase=before,
                to_phase=state.phase,
                active_source=state.active_time_source,
                actions=tuple(actions),
            )
        )
    return state, records


def transition_to_json(record: TransitionRecord) -> str:
    return json.dumps(
        {
            "t_mono_ns": record.t_mono.nanoseconds,
            "event": record.event,
            "from_phase": record.from_phase.value,
            "to_phase": record.to_phase.value,
            "active_source": record.active_source,
            "actions": list(record.actions),
        },
        separators=(",", ":"),
    )


def transition_from_json(line: str) -> TransitionRecord:
    obj = json.loads(line)
    return TransitionRecord(
        t_mono=MonotonicInstant(int(obj["t_mono_ns"])),
        event=obj["event"],
        from_phase=Phase(obj["from_phase"]),
        to_phase=Phase(obj["to_phase"]),
        active_source=obj["active_source"],
        actions=tuple(obj["actions"]),
    )
