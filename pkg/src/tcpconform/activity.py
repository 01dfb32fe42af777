# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""Blocking points of user activities and the event wait built on them.

User activities are generators. They yield one of the records below to the
scheduler and are resumed with the value the record asks for.
"""

import logging
import typing as ty
from dataclasses import dataclass

from tcpconform.automaton import TcpState
from tcpconform.errors import ErrorCode, GuardViolation
from tcpconform.fsm import update_events
from tcpconform.segment import EventMask, Socket

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Yield:
    """Give the scheduler a chance to run another activity."""


@dataclass(frozen=True)
class Sleep:
    until: int


@dataclass(frozen=True)
class Wait:
    """Block until ``socket`` raises an event of ``mask`` or ``deadline``.

    The scheduler resumes the activity with the fired events, or ``None``
    on timeout, and hands the socket guard back to it first.
    """

    socket: Socket
    mask: EventMask
    deadline: int


BlockingPoint = ty.Union[Yield, Sleep, Wait]
WaitResult = ty.Union[EventMask, ErrorCode]


class WaitHost(ty.Protocol):
    """What an event wait needs from the endpoint running it."""

    user: str
    now: int
    engine: ty.Any

    def record_violation(self, socket: Socket, message: str,
                         from_state: ty.Any, to_state: ty.Any): ...


def check_reacquired(host: WaitHost, socket: Socket, released: TcpState):
    """Record a violation unless the state seen on re-acquiring the guard
    is reachable with arriving segments from the state at release."""
    if not isinstance(released, TcpState):
        return
    if socket.state not in host.engine.reachable_states(released):
        host.record_violation(
            socket, "state outside the asynchronous closure", released,
            socket.state,
        )


def wait_for_events(host: WaitHost, socket: Socket, mask: EventMask,
                    timeout: int
                    ) -> ty.Generator[BlockingPoint, ty.Optional[EventMask],
                                      WaitResult]:
    """Wait for ``mask`` on ``socket`` with its guard released.

    Parameters
    ----------
    host: WaitHost
        Endpoint the calling user activity runs on.
    socket: Socket
        Socket whose guard the caller holds.
    mask: EventMask
        Awaited events.
    timeout: int
        Virtual time to wait at most.

    Returns
    -------
    result: EventMask or ErrorCode
        The awaited events that fired, or ERROR_TIMEOUT. The guard is held
        again in both cases.
    """
    if socket.guard is None or not socket.guard.held_by(host.user):
        raise GuardViolation("event wait without holding the socket guard")
    mask = EventMask(mask)
    fired = update_events(socket) & mask
    if fired:
        return fired
    snapshot = socket.copy()
    released = socket.state
    socket.guard.release(host.user)
    log.debug("socket %s waits for %s in %s", socket.descriptor, mask.label,
              released.value)
    fired = yield Wait(socket, mask, host.now + timeout)
    if not socket.guard.held_by(host.user):
        raise GuardViolation("wait resumed without the socket guard")
    check_reacquired(host, socket, released)
    if not fired:
        return ErrorCode.ERROR_TIMEOUT
    if socket.state not in host.engine.wait_for_events_states(snapshot, mask):
        host.record_violation(
            socket, f"state outside the wait closure of {mask.label}",
            released, socket.state,
        )
    return fired
