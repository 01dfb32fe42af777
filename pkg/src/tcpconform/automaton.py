# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""The TCP connection automaton and the guarded state change."""

import enum
import functools
import logging
import typing as ty
from dataclasses import dataclass

from tcpconform.errors import TransitionViolation

if ty.TYPE_CHECKING:
    from tcpconform.segment import Socket

log = logging.getLogger(__name__)


class TcpState(enum.Enum):
    CLOSED = "CLOSED"
    LISTEN = "LISTEN"
    SYN_SENT = "SYN_SENT"
    SYN_RECEIVED = "SYN_RECEIVED"
    ESTABLISHED = "ESTABLISHED"
    FIN_WAIT_1 = "FIN_WAIT_1"
    FIN_WAIT_2 = "FIN_WAIT_2"
    CLOSE_WAIT = "CLOSE_WAIT"
    CLOSING = "CLOSING"
    LAST_ACK = "LAST_ACK"
    TIME_WAIT = "TIME_WAIT"


StateSet = ty.FrozenSet[TcpState]


class FlagSet(enum.IntFlag):
    """TCP control bits, in header order from the low bit."""

    FIN = 1
    SYN = 2
    RST = 4
    PSH = 8
    ACK = 16

    @classmethod
    def from_value(cls, value: int) -> "FlagSet":
        if not isinstance(value, int) or not 0 <= value <= MAX_FLAGS:
            raise ValueError(f"flag value must be in [0, {MAX_FLAGS}].")
        return cls(value)

    @property
    def label(self) -> str:
        """Flag names joined by '+', e.g. 'SYN+ACK'; 'NONE' when empty."""
        names = [f.name for f in _LABEL_ORDER if self & f]
        return "+".join(names) if names else "NONE"


MAX_FLAGS = 31
NO_FLAGS = FlagSet(0)
_LABEL_ORDER = (FlagSet.SYN, FlagSet.FIN, FlagSet.RST, FlagSet.PSH,
                FlagSet.ACK)


class UserCallKind(enum.Enum):
    PASSIVE_OPEN = "PASSIVE_OPEN"
    ACTIVE_OPEN = "ACTIVE_OPEN"
    CLOSE = "CLOSE"
    SEND = "SEND"


class TimerKind(enum.Enum):
    SYN_RECEIVED_TIMEOUT = "SYN_RECEIVED_TIMEOUT"
    TIME_WAIT_TIMEOUT = "TIME_WAIT_TIMEOUT"


@dataclass(frozen=True)
class UserCall:
    kind: UserCallKind

    @property
    def label(self) -> str:
        return f"call({self.kind.value})"


@dataclass(frozen=True)
class SegmentArrival:
    flags: FlagSet

    @property
    def label(self) -> str:
        return f"rcv({self.flags.label})"


@dataclass(frozen=True)
class TimerExpiry:
    kind: TimerKind

    @property
    def label(self) -> str:
        return f"timer({self.kind.value})"


@dataclass(frozen=True)
class AnyTrigger:
    """Matches every trigger; used by the stay-put entries."""

    @property
    def label(self) -> str:
        return "*"


Trigger = ty.Union[UserCall, SegmentArrival, TimerExpiry, AnyTrigger]


class EdgeOrigin(enum.Enum):
    AUTOMATON = "automaton"
    SELF_LOOP = "self-loop"
    RESET = "reset"


@dataclass(frozen=True)
class TransitionEntry:
    source: TcpState
    trigger: Trigger
    target: TcpState
    origin: EdgeOrigin = EdgeOrigin.AUTOMATON

    @property
    def line(self) -> str:
        return f"{self.source.value} {self.trigger.label} {self.target.value}"

    def sort_key(self) -> ty.Tuple[str, str, str]:
        return self.source.value, self.trigger.label, self.target.value


@dataclass(frozen=True)
class TransitionTable:
    """The allowed relation (from-state, trigger class, to-state)."""

    entries: ty.FrozenSet[TransitionEntry]

    def __iter__(self) -> ty.Iterator[TransitionEntry]:
        return iter(sorted(self.entries, key=TransitionEntry.sort_key))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, item: object) -> bool:
        if isinstance(item, TransitionEntry):
            return any(e.source == item.source and e.trigger == item.trigger
                       and e.target == item.target for e in self.entries)
        if isinstance(item, tuple) and len(item) == 3:
            return any((e.source, e.trigger, e.target) == item
                       for e in self.entries)
        return False

    def targets(self, source: TcpState) -> StateSet:
        return frozenset(e.target for e in self.entries if e.source == source)

    def automaton_edges(self) -> ty.List[TransitionEntry]:
        """Entries drawn in the automaton figure: no stay-put, no reset."""
        return [e for e in self if e.origin is EdgeOrigin.AUTOMATON]

    def segment_edges(self) -> ty.List[TransitionEntry]:
        """Entries triggered by an arriving segment (reset entries included)."""
        return [e for e in self if isinstance(e.trigger, SegmentArrival)]

    def match(self, source: TcpState,
              flags: FlagSet) -> ty.Optional[TransitionEntry]:
        """Find the segment entry an arriving flag set selects.

        An entry matches when its flags are a subset of ``flags``. A reset
        entry wins whenever RST is present, otherwise the entry requiring
        the most flags wins (SYN+ACK over SYN).
        """
        candidates = [
            e for e in self.segment_edges()
            if e.source == source and (e.trigger.flags & flags)
            == e.trigger.flags
        ]
        if not candidates:
            return None
        resets = [e for e in candidates if e.origin is EdgeOrigin.RESET]
        if resets:
            return resets[0]
        return max(candidates, key=lambda e: bin(int(e.trigger.flags)).count("1"))

    def listing(self) -> str:
        """Canonical text form, one ``FROM TRIGGER TO`` line per entry."""
        return "\n".join(e.line for e in self) + "\n"

    def records(self) -> ty.List[ty.Dict[str, str]]:
        return [
            {"from": e.source.value, "trigger": e.trigger.label,
             "to": e.target.value, "origin": e.origin.value}
            for e in self
        ]


def _rcv(*flags: FlagSet) -> SegmentArrival:
    return SegmentArrival(functools.reduce(lambda a, b: a | b, flags))


_S = TcpState
_AUTOMATON_EDGES = (
    (_S.CLOSED, UserCall(UserCallKind.PASSIVE_OPEN), _S.LISTEN),
    (_S.CLOSED, UserCall(UserCallKind.ACTIVE_OPEN), _S.SYN_SENT),
    (_S.LISTEN, UserCall(UserCallKind.CLOSE), _S.CLOSED),
    (_S.LISTEN, _rcv(FlagSet.SYN), _S.SYN_RECEIVED),
    (_S.LISTEN, UserCall(UserCallKind.SEND), _S.SYN_SENT),
    (_S.SYN_SENT, UserCall(UserCallKind.CLOSE), _S.CLOSED),
    (_S.SYN_SENT, _rcv(FlagSet.SYN), _S.SYN_RECEIVED),
    (_S.SYN_SENT, _rcv(FlagSet.SYN, FlagSet.ACK), _S.ESTABLISHED),
    (_S.SYN_RECEIVED, TimerExpiry(TimerKind.SYN_RECEIVED_TIMEOUT), _S.CLOSED),
    (_S.SYN_RECEIVED, UserCall(UserCallKind.CLOSE), _S.FIN_WAIT_1),
    (_S.SYN_RECEIVED, _rcv(FlagSet.ACK), _S.ESTABLISHED),
    (_S.ESTABLISHED, UserCall(UserCallKind.CLOSE), _S.FIN_WAIT_1),
    (_S.ESTABLISHED, _rcv(FlagSet.FIN), _S.CLOSE_WAIT),
    (_S.FIN_WAIT_1, _rcv(FlagSet.ACK), _S.FIN_WAIT_2),
    (_S.FIN_WAIT_1, _rcv(FlagSet.FIN), _S.CLOSING),
    (_S.FIN_WAIT_1, _rcv(FlagSet.FIN, FlagSet.ACK), _S.TIME_WAIT),
    (_S.FIN_WAIT_2, _rcv(FlagSet.FIN), _S.TIME_WAIT),
    (_S.CLOSING, _rcv(FlagSet.ACK), _S.TIME_WAIT),
    (_S.CLOSE_WAIT, UserCall(UserCallKind.CLOSE), _S.LAST_ACK),
    (_S.LAST_ACK, _rcv(FlagSet.ACK), _S.CLOSED),
    (_S.TIME_WAIT, TimerExpiry(TimerKind.TIME_WAIT_TIMEOUT), _S.CLOSED),
)

# A listener discards RST, and CLOSED has nothing to reset.
_NO_RESET = frozenset({TcpState.CLOSED, TcpState.LISTEN})


def _build_table() -> TransitionTable:
    entries = {TransitionEntry(s, t, d) for s, t, d in _AUTOMATON_EDGES}
    entries.update(
        TransitionEntry(s, AnyTrigger(), s, EdgeOrigin.SELF_LOOP)
        for s in TcpState
    )
    entries.update(
        TransitionEntry(s, _rcv(FlagSet.RST), TcpState.CLOSED, EdgeOrigin.RESET)
        for s in TcpState if s not in _NO_RESET
    )
    return TransitionTable(frozenset(entries))


_TABLE = _build_table()
_ALLOWED = {s: _TABLE.targets(s) | {s} for s in TcpState}


def transition_table() -> TransitionTable:
    """Return the canonical, immutable transition table."""
    return _TABLE


def is_allowed(from_state: TcpState, to_state: TcpState) -> bool:
    """Whether the automaton permits moving from ``from_state`` to
    ``to_state`` under some trigger. Staying put is always permitted."""
    if from_state == to_state:
        return True
    return to_state in _ALLOWED.get(from_state, frozenset())


def change_state(socket: "Socket", new_state: TcpState,
                 owner: ty.Optional[str] = None) -> "Socket":
    """Move ``socket`` to ``new_state`` if the automaton allows it.

    Every state mutation in the package goes through this function. Only
    ``socket.state`` is written; the socket's observer, if any, is told
    about the change afterwards.

    Parameters
    ----------
    socket: Socket
        The socket to update. When it carries a guard, the guard must be
        held by the calling activity.
    new_state: TcpState
        Requested state.
    owner: str, optional
        Activity making the change. Defaults to the activity entered with
        :func:`tcpconform.segment.acting_as`.

    Returns
    -------
    socket: Socket
        The same socket object, updated.

    Raises
    ------
    TransitionViolation
        If the transition is not in the table. The socket is left untouched.
    GuardViolation
        If the socket's guard is free or held by another activity.
    """
    if socket.guard is not None:
        socket.guard.check_held(owner)
    current = socket.state
    if isinstance(current, TcpState):
        permitted = is_allowed(current, new_state)
    else:
        # corrupted record: only recovery to CLOSED
        permitted = new_state is TcpState.CLOSED
    if not permitted:
        raise TransitionViolation(current, new_state)
    if current != new_state:
        log.debug("socket %s: %s -> %s", socket.descriptor,
                  getattr(current, "value", current), new_state.value)
    # guard already checked against owner
    object.__setattr__(socket, "state", new_state)
    if socket.observer is not None and current != new_state:
        socket.observer(current, new_state)
    return socket
