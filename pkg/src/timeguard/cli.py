"""Command-line front end.

Subcommands cover the operator workflows: replaying bundled or custom
scenarios (`simulate`), monitoring a live receiver feed with optional
real network providers (`live`), fitting detection thresholds
(`calibrate`), timing the crypto hot paths (`bench-crypto`), and
printing the effective configuration (`config dump`).

Exit codes are a stable contract: 0 means the run completed with no
attack indication, 2 means at least one detector raised H1, and 1 means
the tool itself failed (bad usage, unreadable files, broken feed).
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import queue
import sys
import threading
from dataclasses import replace
from pathlib import Path
from typing import Optional, TextIO

from .attack_sim import gen_scenario, write_epochs_jsonl, write_truth_csv
from .bench import BenchUsageError, bench_to_json, format_table, run_bench
from .config import (
    AppConfig,
    ConfigFileError,
    apply_env,
    config_sha256,
    dump_config,
    load_config,
    load_scenario,
)
from .detector import Hypothesis, calibrate_ll, nts_test, roughtime_test, verdict_to_json
from .orchestrator import (
    RESET_FILTER,
    Event,
    EventKind,
    TransitionRecord,
    initial_state,
    step,
    transition_to_json,
)
from .pipeline import (
    VERDICT_CSV_HEADER,
    FilterChain,
    local_bias_s,
    report_to_json,
    resolve_ll,
    run_named_scenario,
    training_residuals,
    write_verdicts_csv,
    write_verdicts_jsonl,
)
from .provider_nts import (
    NtsKeConfig,
    NtsMeasurement,
    estimate_server_sigma,
    nts_ke_handshake,
    nts_query,
)
from .provider_roughtime import RoughtimeMeasurement, RoughtimeServerKey, poll
from .receiver_feed import epoch_from_json
from .timebase import MonotonicInstant, SignedDuration, Timestamp

EXIT_CLEAN = 0
EXIT_ERROR = 1
EXIT_ATTACK = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; 2 is taken by "attack detected"."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def _build_parser() -> _Parser:
    parser = _Parser(prog="timeguard", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: _Parser) -> None:
        p.add_argument("--config", metavar="FILE", default=None,
                       help="INI config overlaying the defaults")
        p.add_argument("--out-dir", metavar="DIR", default=None,
                       help="directory for trace files and reports")

    p = sub.add_parser("simulate", help="replay a generated scenario end to end")
    common(p)
    p.add_argument("--scenario", required=True,
                   help="bundled scenario name or scenario INI path")
    p.add_argument("--seed-override", type=int, default=None, metavar="N",
                   help="replace the scenario's PRNG seed")
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl",
                   help="verdict trace format (default jsonl)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("live", help="monitor a receiver feed, polling real providers")
    common(p)
    p.add_argument("--feed", required=True, metavar="FILE",
                   help="JSONL feed path, named pipe, or - for stdin")
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.set_defaults(fn=cmd_live)

    p = sub.add_parser("calibrate", help="fit detector thresholds from benign data")
    common(p)
    p.add_argument("--scenario", default=None,
                   help="benign scenario to fit against (default from config)")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("bench-crypto", help="time signing, verification, and AEAD")
    common(p)
    p.add_argument("--iterations", type=int, default=200, metavar="N")
    p.set_defaults(fn=cmd_bench_crypto)

    p = sub.add_parser("config", help="inspect the effective configuration")
    common(p)
    p.add_argument("action", choices=("dump",))
    p.set_defaults(fn=cmd_config)
    return parser


def _effective_config(args: argparse.Namespace) -> AppConfig:
    return apply_env(load_config(args.config), os.environ)


def _out_dir(args: argparse.Namespace) -> Optional[Path]:
    if args.out_dir is None:
        return None
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _effective_config(args)
    spec = load_scenario(args.scenario)
    if args.seed_override is not None:
        spec = replace(spec, seed=args.seed_override)
    outputs, result = run_named_scenario(spec, config, config_hash=config_sha256(config))
    report = result.report

    out = _out_dir(args)
    if out is not None:
        with open(out / "epochs.jsonl", "w") as fh:
            write_epochs_jsonl(fh, outputs)
        with open(out / "truth.csv", "w") as fh:
            write_truth_csv(fh, outputs)
        if args.format == "csv":
            with open(out / "verdicts.csv", "w") as fh:
                write_verdicts_csv(fh, result.verdicts)
        else:
            with open(out / "verdicts.jsonl", "w") as fh:
                write_verdicts_jsonl(fh, result.verdicts)
        with open(out / "transitions.jsonl", "w") as fh:
            for record in result.transitions:
                fh.write(transition_to_json(record) + "\n")
        with open(out / "report.json", "w") as fh:
            fh.write(report_to_json(report) + "\n")

    print(f"scenario {report.scenario}: {len(outputs.epochs)} epochs, "
          f"final phase {report.final_phase}")
    for test in ("rt", "nts", "ll"):
        outcome = report.outcomes[test]
        if outcome.detected:
            print(f"  {test}: detected, latency {outcome.latency_epochs} epochs")
        else:
            print(f"  {test}: no detection")
    print(f"  false alarms: {report.false_alarms}")
    print(report_to_json(report))
    return EXIT_ATTACK if report.any_h1 else EXIT_CLEAN


# -- live monitoring ---------------------------------------------------------


def _rt_poller(config: AppConfig):
    prov = config.providers
    if not prov.roughtime_host:
        return None
    key = RoughtimeServerKey(
        public_key=base64.b64decode(prov.roughtime_pubkey_b64),
        host=prov.roughtime_host,
        port=prov.roughtime_port,
    )
    return lambda: poll(key, timeout_s=prov.timeout_s)


def _nts_poller(config: AppConfig):
    prov = config.providers
    if not prov.nts_ke_host:
        return None
    sessions: dict = {}

    def query() -> NtsMeasurement:
        if "s" not in sessions:
            ke = NtsKeConfig(ca_file=prov.nts_ca_file or None, timeout_s=prov.timeout_s)
            sessions["s"] = nts_ke_handshake(prov.nts_ke_host, prov.nts_ke_port, ke)
        return nts_query(sessions["s"], timeout_s=prov.timeout_s)

    return query


def _scripted_rt(obj: dict) -> RoughtimeMeasurement:
    return RoughtimeMeasurement(
        midpoint=Timestamp.from_ns(int(obj["midpoint_unix_ns"])),
        radius=SignedDuration.from_s(float(obj["radius_s"])),
        server_id=str(obj.get("source_id", "rt-feed")),
        t_mono_rx=MonotonicInstant(int(obj["t_mono_ns"])),
    )


def _scripted_nts(obj: dict) -> NtsMeasurement:
    return NtsMeasurement(
        offset=SignedDuration.from_s(float(obj["offset_s"])),
        delay=SignedDuration.from_s(float(obj["delay_s"])),
        t_mono_rx=MonotonicInstant(int(obj["t_mono_ns"])),
        server_id=str(obj.get("source_id", "nts-feed")),
    )


class _LiveSession:
    """Single consumer of the feed queue; owns all mutable run state."""

    def __init__(self, config: AppConfig, verdict_out: TextIO,
                 transition_out: Optional[TextIO], fmt: str) -> None:
        self.config = config
        self.det = config.detector
        self.chain = FilterChain(ensemble=config.ensemble, ll_params=resolve_ll(config))
        self.state = initial_state()
        self.verdict_out = verdict_out
        self.transition_out = transition_out
        self.fmt = fmt
        self.rt_poll = _rt_poller(config)
        self.nts_poll = _nts_poller(config)
        self.h1_seen = False
        self.verdict_count = 0
        self.have_fix = False
        self.anchor: Optional[tuple[Timestamp, MonotonicInstant]] = None
        self.last_epoch = None
        self.last_t = MonotonicInstant(0)
        self.net_up = True
        self.next_rt: Optional[MonotonicInstant] = None
        self.next_nts: Optional[MonotonicInstant] = None

    def feed(self, event: Event) -> None:
        before = self.state.phase
        self.state, actions = step(self.state, event, self.config.orchestrator)
        if self.transition_out is not None:
            record = TransitionRecord(
                t_mono=event.t_mono,
                event=event.kind.value,
                from_phase=before,
                to_phase=self.state.phase,
                active_source=self.state.active_time_source,
                actions=tuple(actions),
            )
            self.transition_out.write(transition_to_json(record) + "\n")
            self.transition_out.flush()
        if RESET_FILTER in actions:
            self.chain.reset(event.t_mono)

    def emit(self, verdict) -> None:
        self.verdict_count += 1
        if verdict.hypothesis is Hypothesis.H1:
            self.h1_seen = True
        if self.fmt == "csv":
            self.verdict_out.write(
                f"{verdict.t_mono.nanoseconds},{verdict.test},{verdict.statistic!r},"
                f"{verdict.threshold!r},{verdict.hypothesis.value},{verdict.source_id}\n"
            )
        else:
            self.verdict_out.write(verdict_to_json(verdict) + "\n")
        self.verdict_out.flush()

    def _network(self, up: bool, t: MonotonicInstant) -> None:
        if up != self.net_up:
            self.net_up = up
            kind = EventKind.NETWORK_UP if up else EventKind.NETWORK_DOWN
            self.feed(Event(kind, t))

    def _poll_provider(self, which: str, t: MonotonicInstant) -> None:
        poller = self.rt_poll if which == "rt" else self.nts_poll
        try:
            measurement = poller()
        except Exception as e:
            print(f"timeguard: {which} poll failed: {e}", file=sys.stderr)
            # repeated NETWORK_DOWN is idempotent; a failure after the
            # machine reaches FINE must still drive it into HOLDOVER
            self.net_up = False
            self.feed(Event(EventKind.NETWORK_DOWN, t))
            return
        self._network(True, t)
        now = MonotonicInstant.now()
        t_ref = self.last_epoch.t_gnss
        if which == "rt":
            v = roughtime_test(t_ref, measurement, self.det, t_mono_now=now)
            kind = EventKind.RT_VERDICT
        else:
            v = nts_test(t_ref, measurement, self.det.nts_lambda, self.det, now)
            kind = EventKind.NTS_VERDICT
        self.emit(v)
        self.feed(Event(kind, t, v))

    def _epoch(self, obj_line: str) -> None:
        rec = epoch_from_json(obj_line)
        t = rec.t_mono
        if t.nanoseconds < self.last_t.nanoseconds:
            print("timeguard: dropping out-of-order epoch", file=sys.stderr)
            return
        self.last_t = t
        if rec.fix_valid and not self.have_fix:
            self.have_fix = True
            if self.anchor is None:
                self.anchor = (rec.t_gnss, rec.t_mono)
            self.feed(Event(EventKind.FIX_ACQUIRED, t))
        elif not rec.fix_valid and self.have_fix:
            self.have_fix = False
            self.feed(Event(EventKind.FIX_LOST, t))
        if rec.fix_valid and self.anchor is not None:
            self.last_epoch = rec
            utc0, mono0 = self.anchor
            _, ll_verdict = self.chain.step(local_bias_s(rec, utc0, mono0), t)
            if ll_verdict is not None:
                self.emit(ll_verdict)
                self.feed(Event(EventKind.LL_VERDICT, t, ll_verdict))
            orc = self.config.orchestrator
            if self.rt_poll is not None:
                if self.next_rt is None or t.nanoseconds >= self.next_rt.nanoseconds:
                    self._poll_provider("rt", t)
                    self.next_rt = MonotonicInstant(t.nanoseconds + int(orc.rt_poll_s * 1e9))
            if self.nts_poll is not None:
                if self.next_nts is None or t.nanoseconds >= self.next_nts.nanoseconds:
                    self._poll_provider("nts", t)
                    self.next_nts = MonotonicInstant(t.nanoseconds + int(orc.nts_poll_s * 1e9))
        self.feed(Event(EventKind.TICK, t))

    def _scripted(self, obj: dict) -> None:
        t = MonotonicInstant(int(obj["t_mono_ns"]))
        if self.last_epoch is None:
            print("timeguard: measurement before first epoch, skipped", file=sys.stderr)
            return
        t_ref = self.last_epoch.t_gnss
        if obj["type"] == "rt":
            v = roughtime_test(t_ref, _scripted_rt(obj), self.det, t_mono_now=t)
            kind = EventKind.RT_VERDICT
        else:
            v = nts_test(t_ref, _scripted_nts(obj), self.det.nts_lambda, self.det, t)
            kind = EventKind.NTS_VERDICT
        self.emit(v)
        self.feed(Event(kind, t, v))

    def consume(self, line: str) -> None:
        line = line.strip()
        if not line:
            return
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            print("timeguard: unparseable feed line, skipped", file=sys.stderr)
            return
        kind = obj.get("type")
        try:
            if kind is None:
                self._epoch(line)
            elif kind in ("rt", "nts"):
                self._scripted(obj)
            elif kind == "network":
                self._network(bool(obj["up"]), MonotonicInstant(int(obj["t_mono_ns"])))
            else:
                print(f"timeguard: unknown feed line type {kind!r}, skipped",
                      file=sys.stderr)
        except Exception as e:
            print(f"timeguard: feed line rejected: {e}", file=sys.stderr)

    def finish(self) -> None:
        if self.have_fix:
            self.feed(Event(EventKind.FIX_LOST, self.last_t))


def cmd_live(args: argparse.Namespace) -> int:
    config = _effective_config(args)
    out = _out_dir(args)
    transition_out = open(out / "transitions.jsonl", "w") if out is not None else None
    verdict_out = (
        open(out / f"verdicts.{args.format}", "w") if out is not None else sys.stdout
    )
    if args.format == "csv":
        verdict_out.write(VERDICT_CSV_HEADER + "\n")

    lines: queue.Queue = queue.Queue()

    def read_feed() -> None:
        try:
            if args.feed == "-":
                for line in sys.stdin:
                    lines.put(line)
            else:
                with open(args.feed) as fh:
                    for line in fh:
                        lines.put(line)
        finally:
            lines.put(None)

    session = _LiveSession(config, verdict_out, transition_out, args.format)
    reader = threading.Thread(target=read_feed, daemon=True)
    reader.start()
    try:
        while True:
            line = lines.get()
            if line is None:
                break
            session.consume(line)
        session.finish()
    finally:
        reader.join(timeout=5.0)
        if transition_out is not None:
            transition_out.close()
        if verdict_out is not sys.stdout:
            verdict_out.close()

    print(
        f"live: {session.verdict_count} verdicts, final phase {session.state.phase.value},"
        f" active source {session.state.active_time_source}",
        file=sys.stderr,
    )
    return EXIT_ATTACK if session.h1_seen else EXIT_CLEAN


# -- calibration -------------------------------------------------------------


def cmd_calibrate(args: argparse.Namespace) -> int:
    config = _effective_config(args)
    name = args.scenario if args.scenario is not None else config.calibration.scenario
    spec = load_scenario(name)

    residuals = training_residuals(spec, config)
    fitted = calibrate_ll(config.detector.ll, residuals, far=config.calibration.far)
    operational = fitted.lambda_T + config.calibration.margin

    nts_poller = _nts_poller(config)
    if nts_poller is not None:
        history = [nts_poller() for _ in range(30)]
        sigma = estimate_server_sigma(history)
        sigma_source = f"nts server {config.providers.nts_ke_host}"
    else:
        responses = gen_scenario(spec).nts_responses
        history = [responses[k] for k in sorted(responses)]
        sigma = estimate_server_sigma(history)
        sigma_source = f"simulated provider in scenario {spec.name!r}"

    snippet = "\n".join(
        [
            f"# fitted from {len(residuals)} benign epochs of scenario {spec.name!r}",
            f"# benign quantile at far={config.calibration.far!r}: {fitted.lambda_T!r}",
            f"# operational threshold adds margin {config.calibration.margin!r}",
            "[ll]",
            f"mu0 = {fitted.mu0!r}",
            f"sigma0_sq = {fitted.sigma0_sq!r}",
            f"lambda_t = {operational!r}",
            "",
            f"# sigma {sigma!r} s from {sigma_source}",
            "[detector]",
            f"nts_lambda_s = {config.detector.nts_sigma_k * sigma!r}",
        ]
    )
    print(snippet)
    out = _out_dir(args)
    if out is not None:
        (out / "calibration.ini").write_text(snippet + "\n")
    return EXIT_CLEAN


# -- benchmarks --------------------------------------------------------------


def cmd_bench_crypto(args: argparse.Namespace) -> int:
    try:
        report = run_bench(iterations=args.iterations)
    except BenchUsageError as e:
        print(f"timeguard: error: {e}", file=sys.stderr)
        return EXIT_ERROR
    print(format_table(report))
    out = _out_dir(args)
    if out is not None:
        (out / "bench.json").write_text(bench_to_json(report) + "\n")
    return EXIT_CLEAN


# -- config ------------------------------------------------------------------


def cmd_config(args: argparse.Namespace) -> int:
    config = _effective_config(args)
    sys.stdout.write(dump_config(config))
    print(f"# sha256 {config_sha256(config)}")
    return EXIT_CLEAN


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigFileError as e:
        print(f"timeguard: config error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        return EXIT_ERROR
    except Exception as e:
        print(f"timeguard: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
