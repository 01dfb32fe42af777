# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""Conformance checks: the exhaustive handler sweep, the closure fixpoint,
call ordering on traces, the shutdown regression and wait soundness."""

import logging
import typing as ty

import networkx as nx
import pandas as pd
from pydantic import BaseModel, Field, computed_field

from tcpconform.automaton import (
    FlagSet,
    TcpState,
    is_allowed,
    transition_table,
)
from tcpconform.errors import ErrorCode, HarnessDeadlock, TransitionViolation
from tcpconform.fsm import (
    SegmentEngine,
    default_engine,
    socket_in_state,
)
from tcpconform.scenarios import SCENARIOS, run_shutdown_race
from tcpconform.segment import MSS
from tcpconform.trace import ScenarioTrace, TraceKind

log = logging.getLogger(__name__)

SWEEP_LENGTHS = (0, 1, MSS)
FIXPOINT_DEPTH = 4
REGRESSION_SEEDS = 1000
WAIT_SEEDS = 1000

_S = TcpState

# Result states a handler may produce, kept apart from the handlers so that
# a handler with a widened ``allowed`` set is still caught.
ALLOWED_RESULTS: ty.Dict[TcpState, ty.FrozenSet[TcpState]] = {
    _S.CLOSED: frozenset({_S.CLOSED}),
    _S.LISTEN: frozenset({_S.LISTEN, _S.SYN_RECEIVED}),
    _S.SYN_SENT: frozenset({_S.SYN_SENT, _S.SYN_RECEIVED, _S.ESTABLISHED,
                            _S.CLOSED}),
    _S.SYN_RECEIVED: frozenset({_S.SYN_RECEIVED, _S.ESTABLISHED,
                                _S.CLOSED}),
    _S.ESTABLISHED: frozenset({_S.ESTABLISHED, _S.CLOSE_WAIT, _S.CLOSED}),
    _S.FIN_WAIT_1: frozenset({_S.FIN_WAIT_1, _S.FIN_WAIT_2, _S.CLOSING,
                              _S.TIME_WAIT, _S.CLOSED}),
    _S.FIN_WAIT_2: frozenset({_S.FIN_WAIT_2, _S.TIME_WAIT, _S.CLOSED}),
    _S.CLOSE_WAIT: frozenset({_S.CLOSE_WAIT, _S.CLOSED}),
    _S.CLOSING: frozenset({_S.CLOSING, _S.TIME_WAIT, _S.CLOSED}),
    _S.LAST_ACK: frozenset({_S.LAST_ACK, _S.CLOSED}),
    _S.TIME_WAIT: frozenset({_S.TIME_WAIT, _S.CLOSED}),
}


# dependency number per (prerequisite, call)
DEPENDENCIES = {
    ("open", "connect"): 1,
    ("open", "accept"): 1,
    ("open", "send"): 2,
    ("open", "receive"): 3,
    ("open", "shutdown"): 4,
    ("open", "close"): 5,
    ("connect", "send"): 6,
    ("connect", "receive"): 7,
    ("connect", "shutdown"): 8,
}

SHUTDOWN_DEFECTS = frozenset({
    (TcpState.CLOSE_WAIT.value, TcpState.FIN_WAIT_1.value),
    (TcpState.CLOSED.value, TcpState.FIN_WAIT_1.value),
})


class CaseViolation(BaseModel):
    subject: str = Field(..., description="State, socket or run checked")
    case: str = Field(..., description="Input of the failing case")
    observed: str
    reason: str
    flags: ty.Optional[int] = None


class CheckRecord(BaseModel):
    check: str
    cases: int = 0
    violations: ty.List[CaseViolation] = Field(default_factory=list)
    details: ty.Dict[str, ty.Any] = Field(default_factory=dict)

    @computed_field
    @property
    def passed(self) -> bool:
        return not self.violations

    def flagged_flags(self) -> ty.List[int]:
        return sorted({v.flags for v in self.violations if v.flags is not None})


class ConformanceReport(BaseModel):
    checks: ty.List[CheckRecord] = Field(default_factory=list)

    @computed_field
    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckRecord:
        for record in self.checks:
            if record.check == name:
                return record
        raise KeyError(name)

    def merge(self, other: "ConformanceReport") -> "ConformanceReport":
        return ConformanceReport(checks=self.checks + other.checks)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"check": c.check, "cases": c.cases,
              "violations": len(c.violations), "passed": c.passed}
             for c in self.checks],
            columns=["check", "cases", "violations", "passed"],
        )

    def to_table(self) -> str:
        lines = [self.to_frame().to_string(index=False)]
        for record in self.checks:
            for v in record.violations[:10]:
                lines.append(f"  {record.check}: {v.subject} {v.case}: "
                             f"{v.observed} ({v.reason})")
            if len(record.violations) > 10:
                lines.append(f"  {record.check}: ... "
                             f"{len(record.violations) - 10} more")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines) + "\n"


def _single(record: CheckRecord) -> ConformanceReport:
    if record.violations:
        log.warning("%s: %d violation(s) in %d case(s)", record.check,
                    len(record.violations), record.cases)
    return ConformanceReport(checks=[record])


def check_handlers(engine: ty.Optional[SegmentEngine] = None
                   ) -> ConformanceReport:
    """Run every handler on its whole sweep grid.

    Each case starts from the canonical socket of the state. The result
    state must be in the state's allowed set; a move to CLOSED needs a
    RST (except from LAST_ACK) and must set the reset flag; in CLOSE_WAIT
    anything but a RST must leave the socket model untouched.
    """
    engine = engine or default_engine()
    record = CheckRecord(check="handlers")
    observed: ty.Dict[str, ty.Set[str]] = {}
    for state in TcpState:
        base = socket_in_state(state)
        allowed = ALLOWED_RESULTS[state]
        for segment in engine.alphabet(base, SWEEP_LENGTHS):
            record.cases += 1
            socket = base.copy()
            before = socket.model()
            rst = bool(segment.flags & FlagSet.RST)

            def flag(observed_: str, reason: str):
                record.violations.append(CaseViolation(
                    subject=state.value, case=segment.describe(),
                    observed=observed_, reason=reason,
                    flags=int(segment.flags),
                ))

            try:
                engine.handle_in_state(socket, segment)
            except TransitionViolation as exc:
                flag(" -> ".join(exc.pair), "transition rejected")
                continue
            result = socket.state
            observed.setdefault(state.value, set()).add(result.value)
            transition = f"{state.value} -> {result.value}"
            if result not in allowed:
                flag(transition, "result outside the allowed set")
            elif result is TcpState.CLOSED and state is not TcpState.CLOSED:
                if not rst and state is not TcpState.LAST_ACK:
                    flag(transition, "closed without a reset")
                elif rst and not socket.reset_flag:
                    flag(transition, "reset flag not set")
            if (state is TcpState.CLOSE_WAIT and not rst
                    and socket.model() != before):
                changed = ", ".join(before.differences(socket.model()))
                flag(transition, f"socket model changed: {changed}")
    record.details["observed"] = {k: sorted(v) for k, v in observed.items()}
    record.details["flagged_flags"] = record.flagged_flags()
    return _single(record)


def oracle_graph() -> nx.DiGraph:
    """Segment-triggered edges of the transition table as a graph."""
    graph = nx.DiGraph()
    graph.add_nodes_from(s.value for s in TcpState)
    for entry in transition_table().segment_edges():
        graph.add_edge(entry.source.value, entry.target.value)
    return graph


def oracle_reachable(start: TcpState, depth: int = 3,
                     graph: ty.Optional[nx.DiGraph] = None
                     ) -> ty.FrozenSet[TcpState]:
    graph = graph if graph is not None else oracle_graph()
    lengths = nx.single_source_shortest_path_length(graph, start.value,
                                                    cutoff=depth)
    return frozenset(TcpState(name) for name in lengths)


def check_closure_fixpoint(engine: ty.Optional[SegmentEngine] = None
                           ) -> ConformanceReport:
    """Depth-3 closure equals depth-4 closure and the graph oracle."""
    engine = engine or default_engine()
    graph = oracle_graph()
    record = CheckRecord(check="closure")
    profiles = {}
    for state in TcpState:
        record.cases += 1
        profile = engine.closure_profile(state, FIXPOINT_DEPTH)
        profiles[state.value] = [
            sorted(s.value for s in profile[i] - profile[i - 1])
            for i in range(1, len(profile))
        ]
        closure = profile[3]
        if closure != profile[FIXPOINT_DEPTH]:
            extra = sorted(s.value for s in profile[FIXPOINT_DEPTH] - closure)
            record.violations.append(CaseViolation(
                subject=state.value, case="depth 3 vs 4",
                observed=", ".join(extra), reason="closure not a fixpoint",
            ))
        expected = oracle_reachable(state, 3, graph)
        if closure != expected:
            record.violations.append(CaseViolation(
                subject=state.value, case="engine vs oracle",
                observed=", ".join(sorted(s.value for s in closure
                                          ^ expected)),
                reason="closure differs from the transition table",
            ))
    record.details["new_states_per_depth"] = profiles
    return _single(record)


CallSequence = ty.Sequence[ty.Union[str, ty.Tuple[str, ty.Any]]]


def call_sequences(trace: ScenarioTrace
                   ) -> ty.Dict[str, ty.List[ty.Tuple[str, str]]]:
    """(call, error) sequences per socket, keyed 'ep:sd'."""
    return {
        f"{ep}:{sd}": [(r.detail["call"], r.detail["error"]) for r in records]
        for (ep, sd), records in trace.user_calls().items()
        if sd is not None
    }


def _ordering_violations(subject: str, calls: CallSequence
                         ) -> ty.List[CaseViolation]:
    violations = []
    opened = connected = False
    for index, item in enumerate(calls):
        call, error = (item, ErrorCode.NO_ERROR.value) if isinstance(
            item, str) else (item[0], getattr(item[1], "value", item[1]))
        succeeded = error == ErrorCode.NO_ERROR.value
        if call == "open":
            opened = opened or succeeded
            continue
        if not opened:
            violations.append(CaseViolation(
                subject=subject, case=f"call {index}: {call}",
                observed="no prior open",
                reason=f"dependency {DEPENDENCIES[('open', call)]}",
            ))
        if call in ("connect", "accept"):
            connected = succeeded
        elif call in ("send", "receive", "shutdown") and not connected:
            violations.append(CaseViolation(
                subject=subject, case=f"call {index}: {call}",
                observed="no prior successful connect",
                reason=f"dependency {DEPENDENCIES[('connect', call)]}",
            ))
        elif call == "close":
            connected = False
    return violations


def check_api_ordering(traces: ty.Iterable[ty.Union[ScenarioTrace,
                                                    CallSequence]]
                       ) -> ConformanceReport:
    """Validate the call order on every per-socket call sequence.

    Accepts harness traces or bare sequences of call names, optionally
    paired with their error codes.
    """
    record = CheckRecord(check="api-ordering")
    for index, trace in enumerate(traces):
        if isinstance(trace, ScenarioTrace):
            sequences = call_sequences(trace)
        else:
            sequences = {f"sequence {index}": trace}
        for subject, calls in sequences.items():
            record.cases += 1
            record.violations.extend(_ordering_violations(subject, calls))
    return _single(record)


def check_shutdown_regression(buggy: bool = False,
                              seeds: int = REGRESSION_SEEDS
                              ) -> ConformanceReport:
    """Run the shutdown race over ``seeds`` interleavings; every recorded
    violation is reported."""
    record = CheckRecord(check="shutdown-regression")
    pairs: ty.Set[ty.Tuple[str, str]] = set()
    for seed in range(seeds):
        record.cases += 1
        try:
            result = run_shutdown_race(seed, buggy=buggy)
        except HarnessDeadlock as exc:
            record.violations.append(CaseViolation(
                subject=f"seed {seed}", case="shutdown race",
                observed=str(exc), reason="deadlock",
            ))
            continue
        for v in result.violations:
            pairs.add((v.from_, v.to))
            record.violations.append(CaseViolation(
                subject=f"seed {seed}", case=f"endpoint {v.ep} t={v.t}",
                observed=f"{v.from_} -> {v.to}",
                reason=v.detail.get("message", ""),
            ))
    record.details["buggy"] = buggy
    record.details["transitions"] = sorted(" -> ".join(p) for p in pairs)
    record.details["known_defect_seen"] = bool(pairs & SHUTDOWN_DEFECTS)
    return _single(record)


def audit_trace(trace: ScenarioTrace) -> ty.List[str]:
    """Problems with a trace as a record: disallowed state changes and
    time going back."""
    problems = []
    last: ty.Dict[str, int] = {}
    for r in trace:
        if r.t < last.get(r.ep, 0):
            problems.append(f"{r.ep}: time went back to {r.t}")
        last[r.ep] = r.t
        if r.kind == TraceKind.STATE_CHANGE and not is_allowed(
                TcpState(r.from_), TcpState(r.to)):
            problems.append(f"{r.ep}: {r.from_} -> {r.to} recorded")
    return problems


def check_wait_soundness(seeds: int = WAIT_SEEDS) -> ConformanceReport:
    """Run scenarios and fixed-mode shutdown races over ``seeds`` seeds;
    every run must finish without violations and with a clean trace."""
    record = CheckRecord(check="wait-soundness")
    scenarios = list(SCENARIOS.values())
    waits = 0
    for seed in range(seeds):
        record.cases += 1
        try:
            if seed % 2:
                result = scenarios[(seed // 2) % len(scenarios)].run(
                    seed=seed).result
            else:
                result = run_shutdown_race(seed)
        except HarnessDeadlock as exc:
            record.violations.append(CaseViolation(
                subject=f"seed {seed}", case="run", observed=str(exc),
                reason="deadlock",
            ))
            continue
        waits += len(result.trace.filter(TraceKind.EVENT_RAISED))
        for v in result.violations:
            record.violations.append(CaseViolation(
                subject=f"seed {seed}", case=f"endpoint {v.ep} t={v.t}",
                observed=f"{v.from_} -> {v.to}",
                reason=v.detail.get("message", ""),
            ))
        for problem in audit_trace(result.trace):
            record.violations.append(CaseViolation(
                subject=f"seed {seed}", case="trace", observed=problem,
                reason="trace audit",
            ))
    record.details["completed_waits"] = waits
    return _single(record)


CHECKS = ("handlers", "closure", "api-ordering", "shutdown-regression",
          "wait-soundness")


def run_all(engine: ty.Optional[SegmentEngine] = None, buggy: bool = False,
            checks: ty.Optional[ty.Iterable[str]] = None,
            seeds: int = REGRESSION_SEEDS) -> ConformanceReport:
    """Run the selected checks, all of them by default.

    Raises
    ------
    ValueError
        If a check name is unknown.
    """
    selected = list(CHECKS if checks is None else checks)
    unknown = [c for c in selected if c not in CHECKS]
    if unknown:
        raise ValueError(f"unknown check(s) {', '.join(unknown)}; expected "
                         f"one of {', '.join(CHECKS)}")
    report = ConformanceReport()
    for name in CHECKS:
        if name not in selected:
            continue
        log.info("running check %s", name)
        if name == "handlers":
            part = check_handlers(engine)
        elif name == "closure":
            part = check_closure_fixpoint(engine)
        elif name == "api-ordering":
            part = check_api_ordering(
                s.run().result.trace for s in SCENARIOS.values())
        elif name == "shutdown-regression":
            part = check_shutdown_regression(buggy, seeds)
        else:
            part = check_wait_soundness(seeds)
        report = report.merge(part)
    return report
