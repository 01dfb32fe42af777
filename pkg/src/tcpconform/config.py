# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""Timer, harness and command-line configuration records."""

import os
import typing as ty
from dataclasses import dataclass, field

SEED_ENV_VAR = "TCPCONFORM_SEED"
DEFAULT_SEED = 0
MAX_SEED = 2**64 - 1


@dataclass
class TimerConfig:
    """Timer durations, in virtual time units.

    Parameters
    ----------
    msl: int
        Maximum segment lifetime. TIME_WAIT lasts exactly two of them.
    syn_received_timeout: int
        How long a passive open may sit in SYN_RECEIVED before it is reset.
    retransmission_timeout: int
        Interval after which the newest unacknowledged SYN or FIN is resent.
    tick: int
        Granularity of the timer task; deadlines are rounded up to it.
    max_retransmissions: int
        Resends of one control segment before the timer gives up.
    """

    msl: int = 30
    syn_received_timeout: int = 75
    retransmission_timeout: int = 20
    tick: int = 1
    max_retransmissions: int = 5

    def __post_init__(self):
        for name in ("msl", "syn_received_timeout", "retransmission_timeout",
                     "tick"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer value.")
        if (not isinstance(self.max_retransmissions, int)
                or self.max_retransmissions < 0):
            raise ValueError(
                "max_retransmissions must be a non-negative integer value."
            )

    @property
    def time_wait(self) -> int:
        return 2 * self.msl

    def align(self, deadline: int) -> int:
        """Round a deadline up to the next timer tick."""
        return -(-deadline // self.tick) * self.tick


@dataclass
class HarnessConfig:
    """Settings of a two-endpoint scenario run.

    Parameters
    ----------
    socket_table_capacity: int
        Sockets an endpoint can hold, orphaned ones included.
    socket_timeout: int
        Default timeout of blocking socket calls.
    channel_latency: int
        Virtual time a segment spends in flight.
    deadlock_bound: int
        Virtual time without progress after which a run with unfinished
        scripts is aborted.
    max_steps: int
        Hard bound on scheduler steps per run.
    buggy_shutdown: bool
        Skip the state re-check after the shutdown wait.
    rst_unmatched: bool
        Answer segments addressed to unknown ports with RST instead of
        discarding them.
    """

    socket_table_capacity: int = 4
    socket_timeout: int = 200
    channel_latency: int = 1
    deadlock_bound: int = 10_000
    max_steps: int = 100_000
    buggy_shutdown: bool = False
    rst_unmatched: bool = False

    def __post_init__(self):
        for name in ("socket_table_capacity", "socket_timeout",
                     "deadlock_bound", "max_steps"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer value.")
        if not isinstance(self.channel_latency, int) or self.channel_latency < 0:
            raise ValueError(
                "channel_latency must be a non-negative integer value."
            )


@dataclass
class CliConfig:
    """Options shared by the command-line subcommands."""

    subcommand: str
    target: ty.Optional[str] = None
    seed: int = DEFAULT_SEED
    timers: TimerConfig = field(default_factory=TimerConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    buggy_mode: bool = False
    output: ty.Optional[str] = None
    format: ty.Optional[str] = None
    check: ty.Optional[str] = None


def resolve_seed(seed: ty.Optional[ty.Union[int, str]] = None,
                 environ: ty.Optional[ty.Mapping[str, str]] = None) -> int:
    """Pick the run seed: explicit value, then environment, then 0.

    Raises
    ------
    ValueError
        If the chosen value is not an unsigned 64-bit integer.
    """
    environ = os.environ if environ is None else environ
    if seed is None:
        seed = environ.get(SEED_ENV_VAR)
    if seed is None or seed == "":
        return DEFAULT_SEED
    if isinstance(seed, bool):
        raise ValueError(f"invalid seed {seed!r}")
    try:
        value = int(seed)
    except (TypeError, ValueError):
        raise ValueError(f"invalid seed {seed!r}") from None
    if not 0 <= value <= MAX_SEED:
        raise ValueError(f"seed {value} is outside [0, 2**64)")
    return value
