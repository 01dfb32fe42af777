# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""Segments, sockets and the records derived from them."""

import contextlib
import contextvars
import enum
import typing as ty
from dataclasses import dataclass, field, fields

from tcpconform.automaton import FlagSet, TcpState
from tcpconform.errors import GuardViolation

SEQ_MODULUS = 2**32
MAX_PORT = 65535
MAX_WINDOW = 65535
MSS = 1460
TX_BUFFER_SIZE = 2 * MSS


def seq_add(seq: int, n: int) -> int:
    return (seq + n) % SEQ_MODULUS


def seq_diff(a: int, b: int) -> int:
    """Distance from ``b`` forward to ``a`` in sequence space."""
    return (a - b) % SEQ_MODULUS


class SockType(enum.Enum):
    STREAM = "STREAM"
    DGRAM = "DGRAM"


class SocketProtocol(enum.Enum):
    TCP = "TCP"
    UDP = "UDP"


class EventMask(enum.IntFlag):
    """Socket events, as raised by the event update after each change."""

    CONNECTED = 1
    CLOSED_EVT = 2
    TX_READY = 4
    TX_DONE = 8
    RX_READY = 16
    LINK_RESET = 32

    @property
    def label(self) -> str:
        names = [e.name for e in EventMask if self & e]
        return "|".join(names) if names else "NONE"


NO_EVENTS = EventMask(0)


@dataclass(frozen=True)
class Segment:
    """An abstract TCP segment.

    ``length`` defaults to the payload size. The checksum is carried along
    but nothing ever verifies it.
    """

    src_port: int
    dest_port: int
    seq_num: int
    ack_num: int
    flags: FlagSet
    window: int = MAX_WINDOW
    checksum: int = 0
    payload: bytes = b""
    length: ty.Optional[int] = None

    def __post_init__(self):
        for name in ("src_port", "dest_port"):
            if not 0 <= getattr(self, name) <= MAX_PORT:
                raise ValueError(f"{name} must be in [0, {MAX_PORT}].")
        for name in ("seq_num", "ack_num"):
            if not 0 <= getattr(self, name) < SEQ_MODULUS:
                raise ValueError(f"{name} must be an unsigned 32-bit value.")
        for name in ("window", "checksum"):
            if not 0 <= getattr(self, name) <= 0xFFFF:
                raise ValueError(f"{name} must be an unsigned 16-bit value.")
        object.__setattr__(self, "flags", FlagSet.from_value(int(self.flags)))
        if self.length is None:
            object.__setattr__(self, "length", len(self.payload))
        elif self.length < 0:
            raise ValueError("length must be non-negative.")

    @property
    def data(self) -> bytes:
        """Payload bytes, zero-filled up to ``length`` when not carried."""
        if len(self.payload) >= self.length:
            return self.payload[: self.length]
        return self.payload + bytes(self.length - len(self.payload))

    def describe(self) -> str:
        return (f"{self.flags.label} {self.src_port}->{self.dest_port} "
                f"seq={self.seq_num} ack={self.ack_num} len={self.length}")


_ACTING: contextvars.ContextVar[ty.Optional[str]] = contextvars.ContextVar(
    "tcpconform_acting", default=None
)


def acting_activity() -> ty.Optional[str]:
    """Name of the activity currently running, if any."""
    return _ACTING.get()


@contextlib.contextmanager
def acting_as(owner: str) -> ty.Iterator[str]:
    """Run the enclosed code as activity ``owner``."""
    token = _ACTING.set(owner)
    try:
        yield owner
    finally:
        _ACTING.reset(token)


class SocketGuard:
    """Mutual-exclusion token shared by the activities using one socket.

    The harness is single-threaded, so the guard is a bookkeeping record:
    it names the activity currently allowed to mutate the socket.
    """

    def __init__(self):
        self.owner: ty.Optional[str] = None

    def acquire(self, owner: str) -> bool:
        if self.owner is not None and self.owner != owner:
            return False
        self.owner = owner
        return True

    def release(self, owner: str):
        if self.owner != owner:
            raise GuardViolation(
                f"{owner} released a guard held by {self.owner}"
            )
        self.owner = None

    def held_by(self, owner: str) -> bool:
        return self.owner == owner

    def check_held(self, owner: ty.Optional[str] = None):
        """Raise unless the acting activity holds the guard.

        ``owner`` defaults to the activity entered with :func:`acting_as`.
        """
        owner = owner if owner is not None else acting_activity()
        if self.owner is None:
            raise GuardViolation("socket mutated without holding its guard")
        if self.owner != owner:
            raise GuardViolation(
                f"{owner or 'unknown activity'} mutated a socket guarded "
                f"by {self.owner}"
            )

    def check_write(self):
        """Check a field write. A free socket may be set up outside every
        activity; any other write needs the guard."""
        owner = acting_activity()
        if self.owner is None and owner is None:
            return
        self.check_held(owner)


_WIRING = frozenset({"guard", "observer"})


@dataclass
class Socket:
    """Connection endpoint record shared by the user, receiver and timer
    activities.

    ``outbound`` collects the segments handlers and API calls want sent;
    whoever drives the socket drains it. ``guard`` and ``observer`` are
    wiring, not state, and take no part in comparisons.
    """

    descriptor: int = 0
    sock_type: SockType = SockType.STREAM
    protocol: SocketProtocol = SocketProtocol.TCP
    local_ip: ty.Optional[str] = None
    local_port: int = 0
    remote_ip: ty.Optional[str] = None
    remote_port: int = 0
    timeout: int = 200
    state: TcpState = TcpState.CLOSED
    reset_flag: bool = False
    iss: int = 0
    snd_una: int = 0
    snd_nxt: int = 0
    rcv_nxt: int = 0
    fin_received: bool = False
    event_flags: EventMask = NO_EVENTS
    tx_buffer: bytearray = field(default_factory=bytearray)
    rx_buffer: bytearray = field(default_factory=bytearray)
    outbound: ty.List[Segment] = field(default_factory=list)
    owned: bool = True
    guard: ty.Optional[SocketGuard] = field(
        default=None, compare=False, repr=False
    )
    observer: ty.Optional[ty.Callable[[ty.Any, TcpState], None]] = field(
        default=None, compare=False, repr=False
    )

    def __setattr__(self, name: str, value: ty.Any):
        guard = getattr(self, "guard", None)
        if guard is not None and name not in _WIRING:
            guard.check_write()
        object.__setattr__(self, name, value)

    def check_guard(self):
        """Raise GuardViolation unless the acting activity holds the guard.

        Buffers and the outbound queue change in place, so their writers
        call this before touching them.
        """
        if self.guard is not None:
            self.guard.check_held()

    def copy(self) -> "Socket":
        """Detached copy: buffers duplicated, no guard, no observer."""
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(
            tx_buffer=bytearray(self.tx_buffer),
            rx_buffer=bytearray(self.rx_buffer),
            outbound=list(self.outbound),
            guard=None,
            observer=None,
        )
        return Socket(**values)

    def model(self) -> "SocketModel":
        return SocketModel.of(self)

    def emit(self, flags: FlagSet, seq: ty.Optional[int] = None,
             ack: ty.Optional[int] = None, payload: bytes = b"",
             dest_port: ty.Optional[int] = None) -> Segment:
        """Queue a segment from this socket on ``outbound``.

        Sequence and acknowledgment numbers default to ``snd_nxt`` and, when
        ACK is set, ``rcv_nxt``. Nothing here advances ``snd_nxt``.
        """
        self.check_guard()
        if seq is None:
            seq = self.snd_nxt
        if ack is None:
            ack = self.rcv_nxt if flags & FlagSet.ACK else 0
        segment = Segment(
            src_port=self.local_port,
            dest_port=self.remote_port if dest_port is None else dest_port,
            seq_num=seq,
            ack_num=ack,
            flags=flags,
            payload=payload,
        )
        self.outbound.append(segment)
        return segment


@dataclass(frozen=True)
class SocketModel:
    """The projection of a socket that segment handlers must not disturb
    behind the automaton's back."""

    sock_type: SockType
    protocol: SocketProtocol
    local_ip: ty.Optional[str]
    local_port: int
    remote_ip: ty.Optional[str]
    remote_port: int
    state: TcpState
    reset_flag: bool
    snd_nxt: int
    rcv_nxt: int

    @classmethod
    def of(cls, socket: Socket) -> "SocketModel":
        return cls(**{f.name: getattr(socket, f.name) for f in fields(cls)})

    def differences(self, other: "SocketModel") -> ty.List[str]:
        return [f.name for f in fields(self)
                if getattr(self, f.name) != getattr(other, f.name)]
