# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""Two endpoints on a virtual clock, each running a user, a receiver and a
timer activity over its sockets.

Only one activity runs at a time; the scheduler picks among the runnable
ones with a seeded generator, so equal inputs give equal traces. When
nothing can run the clock jumps to the next deadline.
"""

import enum
import functools
import logging
import typing as ty
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from tcpconform.activity import (
    BlockingPoint,
    Sleep,
    Wait,
    Yield,
    wait_for_events,
)
from tcpconform.automaton import FlagSet, TcpState, change_state
from tcpconform.config import HarnessConfig, TimerConfig
from tcpconform.errors import ErrorCode, HarnessDeadlock, TransitionViolation
from tcpconform.fsm import SegmentEngine, default_engine, update_events
from tcpconform.script import as_task
from tcpconform.segment import (
    EventMask,
    Segment,
    Socket,
    SocketGuard,
    SocketModel,
    acting_as,
    seq_add,
)
from tcpconform.socket_api import SocketApi
from tcpconform.trace import ScenarioTrace, TraceKind, TraceRecord

log = logging.getLogger(__name__)

__all__ = [
    "Channel",
    "Endpoint",
    "FiredTimer",
    "PairHarness",
    "PairResult",
    "run_pair",
    "timer_task_tick",
    "wait_for_events",
]

ADDRESS_A = "10.0.0.1"
ADDRESS_B = "10.0.0.2"
ISS_A = 1000
ISS_B = 5000
ISS_STRIDE = 100_000
EPHEMERAL_PORT_BASE = 49152

UserTask = ty.Callable[[SocketApi], ty.Generator[BlockingPoint, ty.Any, ty.Any]]


class TimerSlot(enum.Enum):
    TIME_WAIT = "TIME_WAIT_TIMEOUT"
    SYN_RECEIVED = "SYN_RECEIVED_TIMEOUT"
    RETRANSMIT = "RETRANSMIT"


@dataclass
class TimerEntry:
    descriptor: int
    slot: TimerSlot
    deadline: int
    segment: ty.Optional[Segment] = None
    count: int = 0


@dataclass(frozen=True)
class FiredTimer:
    descriptor: int
    timer: str
    at: int
    state: str


class VirtualClock:
    def __init__(self):
        self.now = 0

    def advance_to(self, t: int):
        if t < self.now:
            raise ValueError("the virtual clock cannot go back.")
        self.now = t


class Channel:
    def __init__(self, latency: int):
        """FIFO path towards one endpoint with a fixed latency."""
        self.latency = latency
        self._queue: ty.Deque[ty.Tuple[int, Segment]] = deque()

    def __len__(self) -> int:
        return len(self._queue)

    def put(self, segment: Segment, now: int):
        self._queue.append((now + self.latency, segment))

    def head(self, now: int) -> ty.Optional[Segment]:
        if self._queue and self._queue[0][0] <= now:
            return self._queue[0][1]
        return None

    def pop(self) -> Segment:
        return self._queue.popleft()[1]

    def next_time(self) -> ty.Optional[int]:
        return self._queue[0][0] if self._queue else None


class Endpoint:
    def __init__(self, name: str, ip: str, clock: VirtualClock,
                 trace: ScenarioTrace, config: HarnessConfig,
                 timers: TimerConfig, engine: SegmentEngine, iss_base: int):
        """One host of a scenario: socket table, inbound channel, timers.

        Parameters
        ----------
        name: str
            Endpoint name used in the trace, 'a' or 'b'.
        ip: str
            Local address.
        iss_base: int
            First initial sequence number handed out.
        """
        self.name = name
        self.ip = ip
        self.peer: ty.Optional["Endpoint"] = None
        self.clock = clock
        self.trace = trace
        self.config = config
        self.timer_config = timers
        self.engine = engine
        self.user = f"{name}.user"
        self.receiver = f"{name}.receiver"
        self.timer = f"{name}.timer"
        self.sockets: ty.Dict[int, Socket] = {}
        self.history: ty.Dict[int, Socket] = {}
        self.inbound = Channel(config.channel_latency)
        self.timers: ty.Dict[ty.Tuple[int, TimerSlot], TimerEntry] = {}
        self.drop_after: ty.Optional[int] = None
        self.waiting: ty.Optional["UserActivity"] = None
        self._next_descriptor = 1
        self._next_port = EPHEMERAL_PORT_BASE
        self._iss = iss_base

    @property
    def now(self) -> int:
        return self.clock.now

    @property
    def peer_ip(self) -> ty.Optional[str]:
        return self.peer.ip if self.peer is not None else None

    # socket table

    def allocate_socket(self) -> ty.Optional[Socket]:
        if len(self.sockets) >= self.config.socket_table_capacity:
            log.debug("%s: socket table full", self.name)
            return None
        socket = Socket(descriptor=self._next_descriptor, local_ip=self.ip,
                        timeout=self.config.socket_timeout)
        socket.observer = functools.partial(self._on_state_change, socket)
        socket.event_flags = update_events(socket)
        socket.guard = SocketGuard()
        self._next_descriptor += 1
        self.sockets[socket.descriptor] = socket
        self.history[socket.descriptor] = socket
        return socket

    def release_socket(self, socket: Socket):
        """Free a closed socket; keep an active one as an orphan until it
        reaches CLOSED. The caller has already cleared ``owned``."""
        if socket.state is TcpState.CLOSED:
            self._free(socket)
        else:
            log.debug("%s: socket %s orphaned in %s", self.name,
                      socket.descriptor, socket.state.value)

    def collect(self):
        for socket in list(self.sockets.values()):
            if not socket.owned and socket.state is TcpState.CLOSED:
                self._free(socket)

    def _free(self, socket: Socket):
        self.sockets.pop(socket.descriptor, None)
        for key in [k for k in self.timers if k[0] == socket.descriptor]:
            del self.timers[key]

    def ephemeral_port(self) -> int:
        port = self._next_port
        self._next_port += 1
        return port

    def next_iss(self) -> int:
        iss = self._iss
        self._iss = seq_add(self._iss, ISS_STRIDE)
        return iss

    def port_in_use(self, port: int, exclude: ty.Optional[Socket] = None
                    ) -> bool:
        return any(s.local_port == port and s is not exclude
                   and s.state is not TcpState.CLOSED
                   for s in self.sockets.values())

    def lookup(self, segment: Segment) -> ty.Optional[Socket]:
        """Socket a segment is addressed to: the connection with that peer
        port, else a listener, else any socket bound to the port."""
        bound = [s for s in self.sockets.values()
                 if s.local_port == segment.dest_port]
        for socket in bound:
            if (socket.remote_port == segment.src_port
                    and socket.state not in (TcpState.CLOSED,
                                             TcpState.LISTEN)):
                return socket
        for socket in bound:
            if socket.state is TcpState.LISTEN:
                return socket
        return bound[0] if bound else None

    # output

    def flush(self, socket: Socket):
        """Send queued segments and refresh the socket's events."""
        socket.check_guard()
        while socket.outbound:
            self.transmit(socket.outbound.pop(0), socket.descriptor)
        socket.event_flags = update_events(socket)

    def transmit(self, segment: Segment, descriptor: ty.Optional[int],
                 retransmission: bool = False):
        detail: ty.Dict[str, ty.Any] = {
            "sd": descriptor, "seq": segment.seq_num, "ack": segment.ack_num,
            "len": segment.length, "src_port": segment.src_port,
            "dest_port": segment.dest_port,
        }
        if retransmission:
            detail["retransmission"] = True
        dropped = self.drop_after is not None and self.drop_after <= 0
        if dropped:
            detail["dropped"] = True
        elif self.drop_after is not None:
            self.drop_after -= 1
        self.trace.add(self.now, self.name, TraceKind.SEGMENT_SENT,
                       flags=segment.flags.label, detail=detail)
        if not dropped:
            self.peer.inbound.put(segment, self.now)
        control = segment.flags & (FlagSet.SYN | FlagSet.FIN)
        if (control and not segment.flags & FlagSet.RST
                and not retransmission and descriptor is not None):
            self.timers[(descriptor, TimerSlot.RETRANSMIT)] = TimerEntry(
                descriptor, TimerSlot.RETRANSMIT,
                self.now + self.timer_config.retransmission_timeout,
                segment=segment,
            )

    def inject_rst(self, descriptor: int):
        """Send a reset on behalf of a socket without touching its state."""
        socket = self.sockets[descriptor]
        self.transmit(Segment(src_port=socket.local_port,
                              dest_port=socket.remote_port,
                              seq_num=socket.snd_nxt, ack_num=0,
                              flags=FlagSet.RST), descriptor)

    # trace hooks

    def record_call(self, socket: ty.Optional[Socket], call: str,
                    entry: ty.Optional[TcpState], error: ErrorCode):
        self.trace.add(
            self.now, self.name, TraceKind.USER_CALL,
            from_=entry.value if entry is not None else None,
            to=socket.state.value if socket is not None else None,
            detail={"call": call,
                    "sd": socket.descriptor if socket is not None else None,
                    "error": error.value},
        )

    def record_violation(self, socket: ty.Optional[Socket], message: str,
                         from_state: ty.Any, to_state: ty.Any
                         ) -> TraceRecord:
        log.warning("%s: violation on socket %s: %s (%s -> %s)", self.name,
                    getattr(socket, "descriptor", None), message,
                    _name(from_state), _name(to_state))
        return self.trace.add(
            self.now, self.name, TraceKind.VIOLATION,
            from_=_name(from_state), to=_name(to_state),
            detail={"sd": getattr(socket, "descriptor", None),
                    "message": message},
        )

    def _on_state_change(self, socket: Socket, old: ty.Any, new: TcpState):
        self.trace.add(self.now, self.name, TraceKind.STATE_CHANGE,
                       from_=_name(old), to=new.value,
                       detail={"sd": socket.descriptor})
        sd = socket.descriptor
        if old is TcpState.TIME_WAIT:
            self.timers.pop((sd, TimerSlot.TIME_WAIT), None)
        if old is TcpState.SYN_RECEIVED:
            self.timers.pop((sd, TimerSlot.SYN_RECEIVED), None)
        if new is TcpState.TIME_WAIT:
            deadline = self.timer_config.align(
                self.now + self.timer_config.time_wait)
            self.timers[(sd, TimerSlot.TIME_WAIT)] = TimerEntry(
                sd, TimerSlot.TIME_WAIT, deadline)
        elif new is TcpState.SYN_RECEIVED:
            deadline = self.timer_config.align(
                self.now + self.timer_config.syn_received_timeout)
            self.timers[(sd, TimerSlot.SYN_RECEIVED)] = TimerEntry(
                sd, TimerSlot.SYN_RECEIVED, deadline)
        elif new is TcpState.CLOSED:
            self.timers.pop((sd, TimerSlot.RETRANSMIT), None)

    # activities

    def notify(self, socket: Socket):
        """Hand the guard to a user waiting on ``socket`` if its events
        fired."""
        user = self.waiting
        if user is None or user.handed is not None:
            return
        point = user.blocked
        if not isinstance(point, Wait) or point.socket is not socket:
            return
        fired = update_events(socket) & point.mask
        if fired and socket.guard.acquire(self.user):
            user.handed = fired
            self.trace.add(self.now, self.name, TraceKind.EVENT_RAISED,
                           detail={"sd": socket.descriptor,
                                   "events": fired.label})

    def receiver_runnable(self) -> bool:
        segment = self.inbound.head(self.now)
        if segment is None:
            return False
        socket = self.lookup(segment)
        return socket is None or socket.guard.owner is None

    def receiver_step(self):
        with acting_as(self.receiver):
            self._receive(self.inbound.pop())

    def _receive(self, segment: Segment):
        socket = self.lookup(segment)
        if socket is None:
            self.trace.add(self.now, self.name, TraceKind.SEGMENT_RECEIVED,
                           flags=segment.flags.label,
                           detail={"sd": None, "seq": segment.seq_num,
                                   "ack": segment.ack_num,
                                   "len": segment.length,
                                   "unmatched": True})
            if self.config.rst_unmatched:
                stray = Socket(local_ip=self.ip,
                               local_port=segment.dest_port)
                self.engine.handle_in_state(stray, segment)
                for reply in stray.outbound:
                    self.transmit(reply, None)
            return
        self.trace.add(self.now, self.name, TraceKind.SEGMENT_RECEIVED,
                       from_=socket.state.value, flags=segment.flags.label,
                       detail={"sd": socket.descriptor,
                               "seq": segment.seq_num,
                               "ack": segment.ack_num, "len": segment.length})
        socket.guard.acquire(self.receiver)
        try:
            self.engine.process_one_segment(socket, segment)
        except TransitionViolation as exc:
            self.record_violation(socket, str(exc), exc.from_state,
                                  exc.to_state)
            socket.outbound.clear()
        finally:
            self.flush(socket)
            socket.guard.release(self.receiver)
        if socket.snd_una == socket.snd_nxt:
            self.timers.pop((socket.descriptor, TimerSlot.RETRANSMIT), None)
        self.notify(socket)
        self.collect()

    def due_timers(self) -> ty.List[TimerEntry]:
        return sorted(
            (e for e in self.timers.values() if e.deadline <= self.now),
            key=lambda e: (e.deadline, e.descriptor, e.slot.value),
        )

    def timer_runnable(self) -> bool:
        for entry in self.due_timers():
            socket = self.sockets.get(entry.descriptor)
            if socket is None or socket.guard.owner is None:
                return True
        return False

    def next_deadline(self) -> ty.Optional[int]:
        times = [e.deadline for e in self.timers.values()]
        inbound = self.inbound.next_time()
        if inbound is not None:
            times.append(inbound)
        return min(times) if times else None


def _name(state: ty.Any) -> ty.Optional[str]:
    if state is None:
        return None
    return getattr(state, "value", repr(state))


def timer_task_tick(endpoint: Endpoint, now: int) -> ty.List[FiredTimer]:
    """Fire every timer of ``endpoint`` that is due at ``now``.

    TIME_WAIT expiry closes the socket. SYN_RECEIVED expiry sends RST and
    closes it. A retransmission timer resends the newest unacknowledged
    SYN or FIN until it is acknowledged or the resend limit is reached.
    Timers of a socket whose guard is taken are left for a later tick.
    """
    with acting_as(endpoint.timer):
        return _fire_due(endpoint, now)


def _fire_due(endpoint: Endpoint, now: int) -> ty.List[FiredTimer]:
    fired = []
    cfg = endpoint.timer_config
    for entry in endpoint.due_timers():
        if entry.deadline > now:
            continue
        key = (entry.descriptor, entry.slot)
        socket = endpoint.sockets.get(entry.descriptor)
        if socket is None:
            endpoint.timers.pop(key, None)
            continue
        if not socket.guard.acquire(endpoint.timer):
            continue
        before = socket.state
        try:
            if entry.slot is TimerSlot.RETRANSMIT:
                endpoint.timers.pop(key, None)
                if (socket.snd_una == socket.snd_nxt
                        or socket.state is TcpState.CLOSED):
                    continue
                if entry.count >= cfg.max_retransmissions:
                    log.debug("%s: socket %s gives up retransmitting",
                              endpoint.name, socket.descriptor)
                    continue
                endpoint.transmit(entry.segment, socket.descriptor,
                                  retransmission=True)
                entry.count += 1
                entry.deadline = now + cfg.retransmission_timeout
                endpoint.timers[key] = entry
            else:
                endpoint.timers.pop(key, None)
                if entry.slot is TimerSlot.SYN_RECEIVED:
                    if socket.state is not TcpState.SYN_RECEIVED:
                        continue
                    socket.emit(FlagSet.RST)
                    change_state(socket, TcpState.CLOSED)
                elif socket.state is TcpState.TIME_WAIT:
                    change_state(socket, TcpState.CLOSED)
                else:
                    continue
            endpoint.flush(socket)
        finally:
            socket.guard.release(endpoint.timer)
        record = FiredTimer(socket.descriptor, entry.slot.value, now,
                            socket.state.value)
        endpoint.trace.add(now, endpoint.name, TraceKind.TIMER_FIRED,
                           from_=before.value, to=socket.state.value,
                           detail={"sd": socket.descriptor,
                                   "timer": entry.slot.value})
        log.debug("%s: %s fired for socket %s", endpoint.name,
                  entry.slot.value, socket.descriptor)
        fired.append(record)
        endpoint.notify(socket)
    endpoint.collect()
    return fired


class UserActivity:
    def __init__(self, endpoint: Endpoint, task: UserTask):
        self.endpoint = endpoint
        self.api = SocketApi(endpoint)
        self.gen = task(self.api)
        self.blocked: ty.Optional[BlockingPoint] = None
        self.handed: ty.Optional[EventMask] = None
        self.done = False

    def runnable(self, now: int) -> bool:
        point = self.blocked
        if self.done:
            return False
        if point is None or isinstance(point, Yield):
            return True
        if isinstance(point, Sleep):
            return now >= point.until
        if self.handed is not None:
            return True
        return now >= point.deadline and point.socket.guard.owner is None

    def deadline(self) -> ty.Optional[int]:
        point = self.blocked
        if self.done or point is None or isinstance(point, Yield):
            return None
        if isinstance(point, Sleep):
            return point.until
        return None if self.handed is not None else point.deadline

    def step(self):
        ep = self.endpoint
        value = None
        if isinstance(self.blocked, Wait):
            value = self.handed
            if value is None:
                self.blocked.socket.guard.acquire(ep.user)
            self.handed = None
        ep.waiting = None
        try:
            with acting_as(ep.user):
                self.blocked = self.gen.send(value)
        except StopIteration:
            self.done = True
            self.blocked = None
        except TransitionViolation as exc:
            ep.record_violation(None, str(exc), exc.from_state, exc.to_state)
            self.done = True
            self.blocked = None
            for socket in ep.sockets.values():
                socket.outbound.clear()
                if socket.guard.held_by(ep.user):
                    socket.guard.release(ep.user)
        if isinstance(self.blocked, Wait):
            ep.waiting = self
        ep.collect()


@dataclass
class PairResult:
    trace: ScenarioTrace
    final_models: ty.Dict[str, ty.List[SocketModel]]
    violations: ty.List[TraceRecord] = field(default_factory=list)
    end_time: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def final_state(self, ep: str, index: int = 0) -> TcpState:
        return self.final_models[ep][index].state


class PairHarness:
    def __init__(self, timers: ty.Optional[TimerConfig] = None,
                 config: ty.Optional[HarnessConfig] = None, seed: int = 0,
                 engine: ty.Optional[SegmentEngine] = None):
        """Endpoints a (10.0.0.1) and b (10.0.0.2) joined by a duplex
        channel."""
        self.timers = timers or TimerConfig()
        self.config = config or HarnessConfig()
        self.engine = engine or default_engine()
        self.rng = np.random.default_rng(seed)
        self.clock = VirtualClock()
        self.trace = ScenarioTrace()
        self.a = Endpoint("a", ADDRESS_A, self.clock, self.trace, self.config,
                          self.timers, self.engine, ISS_A)
        self.b = Endpoint("b", ADDRESS_B, self.clock, self.trace, self.config,
                          self.timers, self.engine, ISS_B)
        self.a.peer, self.b.peer = self.b, self.a

    @property
    def endpoints(self) -> ty.Tuple[Endpoint, Endpoint]:
        return self.a, self.b

    def run(self, task_a: UserTask, task_b: UserTask) -> PairResult:
        users = [UserActivity(self.a, task_a), UserActivity(self.b, task_b)]
        activities = []
        for ep, user in zip(self.endpoints, users):
            activities.append((user.runnable, user.step))
            activities.append((lambda _, ep=ep: ep.receiver_runnable(),
                               ep.receiver_step))
            activities.append((
                lambda _, ep=ep: ep.timer_runnable(),
                lambda ep=ep: timer_task_tick(ep, self.clock.now),
            ))

        steps = 0
        last_progress = 0
        while True:
            now = self.clock.now
            runnable = [step for ready, step in activities if ready(now)]
            if runnable:
                runnable[int(self.rng.integers(len(runnable)))]()
                steps += 1
                last_progress = now
                if steps >= self.config.max_steps:
                    raise HarnessDeadlock(
                        f"no completion within {steps} scheduler steps"
                    )
                continue
            users_done = all(u.done for u in users)
            upcoming = [t for t in self._deadlines(users) if t > now]
            if not upcoming:
                if users_done:
                    break
                raise HarnessDeadlock(
                    f"t={now}: user activities blocked with nothing scheduled"
                )
            nxt = min(upcoming)
            if nxt - last_progress > self.config.deadlock_bound:
                if users_done:
                    break
                raise HarnessDeadlock(
                    f"t={now}: no progress within {self.config.deadlock_bound}"
                )
            self.clock.advance_to(nxt)

        models = {
            ep.name: [s.model() for _, s in sorted(ep.history.items())]
            for ep in self.endpoints
        }
        return PairResult(self.trace, models, self.trace.violations(),
                          self.clock.now)

    def _deadlines(self, users: ty.List[UserActivity]) -> ty.List[int]:
        times = [u.deadline() for u in users]
        times += [ep.next_deadline() for ep in self.endpoints]
        return [t for t in times if t is not None]


def run_pair(script_a: ty.Union[UserTask, ty.Sequence[ty.Any]],
             script_b: ty.Union[UserTask, ty.Sequence[ty.Any]],
             timers: ty.Optional[TimerConfig] = None, seed: int = 0,
             config: ty.Optional[HarnessConfig] = None,
             engine: ty.Optional[SegmentEngine] = None) -> PairResult:
    """Run two user scripts against each other.

    Parameters
    ----------
    script_a, script_b: callable or sequence
        A callable taking the endpoint's SocketApi and returning a
        generator, or a sequence of script steps.
    timers: TimerConfig
        Timer durations.
    seed: int
        Seed of the interleaving choices.
    config: HarnessConfig
        Harness settings.
    engine: SegmentEngine
        Segment engine of both endpoints.

    Returns
    -------
    result: PairResult
        Trace, final socket models per endpoint and recorded violations.

    Raises
    ------
    HarnessDeadlock
        If the scripts stop making progress.
    """
    harness = PairHarness(timers, config, seed, engine)
    return harness.run(as_task(script_a), as_task(script_b))
