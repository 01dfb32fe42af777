# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""Exceptions and API error codes.

Exceptions signal broken contracts (an illegal transition, a reused session
handle, a socket touched without its guard). Protocol-level failures such as
a timeout or a reset are ordinary values of :class:`ErrorCode`.
"""

import enum
import typing as ty


class ErrorCode(enum.Enum):
    """Return codes of the fallible socket API operations."""

    NO_ERROR = "NO_ERROR"
    ERROR_TIMEOUT = "ERROR_TIMEOUT"
    ERROR_PORT_UNREACHABLE = "ERROR_PORT_UNREACHABLE"
    ERROR_CONNECTION_RESET = "ERROR_CONNECTION_RESET"
    ERROR_NOT_CONNECTED = "ERROR_NOT_CONNECTED"
    ERROR_INVALID_SOCKET = "ERROR_INVALID_SOCKET"


class TcpConformError(Exception):
    """Base class for all tcpconform exceptions."""


class TransitionViolation(TcpConformError):
    """A state change outside the connection automaton was requested.

    Parameters
    ----------
    from_state: TcpState or object
        State of the socket when the change was attempted. May be a value
        that is not a TcpState when the socket record was corrupted.
    to_state: TcpState
        Requested target state.
    """

    def __init__(self, from_state: ty.Any, to_state: ty.Any):
        self.from_state = from_state
        self.to_state = to_state
        super().__init__(
            f"transition {_name(from_state)} -> {_name(to_state)} "
            "is not allowed"
        )

    @property
    def pair(self) -> ty.Tuple[str, str]:
        return _name(self.from_state), _name(self.to_state)


class GuardViolation(TcpConformError):
    """A socket was mutated by an activity that does not hold its guard."""


class SessionConsumedError(TcpConformError):
    """A session handle was used after an operation consumed it."""


class UncheckedResultError(TcpConformError):
    """A session was reused before its previous result was inspected."""


class HarnessDeadlock(TcpConformError):
    """No activity of a scenario run made progress within the bound."""


class ScriptError(TcpConformError, ValueError):
    """A scenario script could not be parsed."""


def _name(state: ty.Any) -> str:
    return getattr(state, "name", repr(state))
