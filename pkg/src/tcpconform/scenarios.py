# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""Named two-endpoint scenarios with their expected outcomes."""

import logging
import typing as ty
from dataclasses import dataclass, field, replace

import numpy as np

from tcpconform.automaton import TcpState
from tcpconform.config import HarnessConfig, TimerConfig
from tcpconform.fsm import SegmentEngine
from tcpconform.harness import PairResult, run_pair
from tcpconform.script import ScriptRunner, parse_steps
from tcpconform.trace import TraceKind

log = logging.getLogger(__name__)

RACE_VARIANTS = ("fin", "rst")
RACE_THINK_TIMES = (0, 1, 2)
RACE_PAYLOAD = b"hello"


@dataclass
class ScenarioOutcome:
    name: str
    result: PairResult
    runners: ty.Dict[str, ScriptRunner]
    mismatches: ty.List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.mismatches and self.result.ok


Check = ty.Callable[[ScenarioOutcome, TimerConfig], ty.List[str]]


@dataclass(frozen=True)
class Scenario:
    """A pair of scripts and the final states they must reach.

    ``checks`` add expectations beyond the final state of the first
    socket of each endpoint.
    """

    name: str
    script_a: str
    script_b: str
    expected: ty.Dict[str, TcpState]
    description: str = ""
    checks: ty.Tuple[Check, ...] = ()

    def run(self, seed: int = 0, timers: ty.Optional[TimerConfig] = None,
            config: ty.Optional[HarnessConfig] = None,
            engine: ty.Optional[SegmentEngine] = None) -> ScenarioOutcome:
        timers = timers or TimerConfig()
        runners = {
            "a": ScriptRunner(parse_steps(self.script_a.splitlines())),
            "b": ScriptRunner(parse_steps(self.script_b.splitlines())),
        }
        result = run_pair(runners["a"], runners["b"], timers=timers,
                          seed=seed, config=config, engine=engine)
        outcome = ScenarioOutcome(self.name, result, runners)
        for ep, state in self.expected.items():
            models = result.final_models.get(ep, [])
            actual = models[0].state if models else None
            if actual is not state:
                outcome.mismatches.append(
                    f"{ep}: expected {state.value}, got "
                    f"{getattr(actual, 'value', actual)}"
                )
        for check in self.checks:
            outcome.mismatches.extend(check(outcome, timers))
        for mismatch in outcome.mismatches:
            log.warning("%s: %s", self.name, mismatch)
        return outcome


def _handshake_segments(outcome: ScenarioOutcome,
                        timers: TimerConfig) -> ty.List[str]:
    sent = outcome.result.trace.segments_sent()
    expected = ["SYN", "SYN+ACK", "ACK"]
    if sent != expected:
        return [f"segments {sent}, expected {expected}"]
    return []


def _payload_delivered(outcome: ScenarioOutcome,
                       timers: TimerConfig) -> ty.List[str]:
    received = bytes(outcome.runners["b"].received)
    if received != RACE_PAYLOAD:
        return [f"b received {received!r}, expected {RACE_PAYLOAD!r}"]
    return []


def _time_wait_exact(outcome: ScenarioOutcome,
                     timers: TimerConfig) -> ty.List[str]:
    """The active closer leaves TIME_WAIT exactly 2*MSL after entering."""
    changes = outcome.result.trace.filter(TraceKind.STATE_CHANGE, "a")
    entered = [r.t for r in changes if r.to == TcpState.TIME_WAIT.value]
    left = [r.t for r in changes if r.from_ == TcpState.TIME_WAIT.value]
    if not entered or not left:
        return ["a never went through TIME_WAIT"]
    expected = timers.align(entered[0] + timers.time_wait)
    if left[0] != expected:
        return [f"a left TIME_WAIT at t={left[0]}, expected t={expected}"]
    return []


_ACTIVE_OPEN = """\
open
connect 10.0.0.2 80
"""
_PASSIVE_OPEN = """\
open
accept 80
"""
_HELLO = RACE_PAYLOAD.hex()


def race_scripts(variant: str = "fin", think: int = 1) -> ty.Tuple[str, str]:
    """Scripts of a shutdown racing a peer close or reset.

    Endpoint a sends data and shuts down while the data is unacknowledged;
    ``think`` ticks separate its connect and send. Endpoint b shuts down
    ('fin') or resets ('rst') right after accepting.
    """
    if variant not in RACE_VARIANTS:
        raise ValueError(f"variant must be one of {RACE_VARIANTS}.")
    pause = f"sleep {think}\n" if think else ""
    script_a = _ACTIVE_OPEN + pause + f"send {_HELLO}\nshutdown\nclose\n"
    peer = "shutdown" if variant == "fin" else "inject-rst"
    script_b = _PASSIVE_OPEN + f"{peer}\nclose\n"
    return script_a, script_b


def race_plan(seed: int) -> ty.Tuple[str, int]:
    """Variant and think time of the shutdown race for ``seed``."""
    rng = np.random.default_rng(seed)
    think = int(rng.choice(RACE_THINK_TIMES))
    return RACE_VARIANTS[seed % 2], think


def run_shutdown_race(seed: int, buggy: bool = False,
                      timers: ty.Optional[TimerConfig] = None,
                      config: ty.Optional[HarnessConfig] = None
                      ) -> PairResult:
    variant, think = race_plan(seed)
    script_a, script_b = race_scripts(variant, think)
    config = config or HarnessConfig()
    config = replace(config, buggy_shutdown=buggy)
    return run_pair(script_a, script_b, timers=timers, seed=seed,
                    config=config)


SCENARIOS: ty.Dict[str, Scenario] = {
    s.name: s for s in (
        Scenario(
            "handshake",
            _ACTIVE_OPEN,
            _PASSIVE_OPEN,
            {"a": TcpState.ESTABLISHED, "b": TcpState.ESTABLISHED},
            "active open against a listener",
            (_handshake_segments,),
        ),
        Scenario(
            "transfer",
            _ACTIVE_OPEN + f"send {_HELLO}\n",
            _PASSIVE_OPEN + "receive\n",
            {"a": TcpState.ESTABLISHED, "b": TcpState.ESTABLISHED},
            "five bytes from a to b",
            (_payload_delivered,),
        ),
        Scenario(
            "orderly-close",
            _ACTIVE_OPEN + "shutdown\nclose\n",
            _PASSIVE_OPEN + "receive\nclose\n",
            {"a": TcpState.CLOSED, "b": TcpState.CLOSED},
            "a closes first and waits 2*MSL in TIME_WAIT",
            (_time_wait_exact,),
        ),
        Scenario(
            "shutdown-race",
            *race_scripts("fin", 1),
            {"a": TcpState.CLOSED, "b": TcpState.CLOSED},
            "a shuts down with data in flight while b closes",
        ),
    )
}


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ValueError(
            f"unknown scenario {name!r}; expected one of "
            f"{', '.join(SCENARIOS)}"
        ) from None
