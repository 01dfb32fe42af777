# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""Per-state segment handlers, the dispatching engine and the bounded
closures over the one-segment relation."""

import logging
import typing as ty
from abc import abstractmethod

import numpy as np

from tcpconform.automaton import (
    FlagSet,
    StateSet,
    TcpState,
    change_state,
)
from tcpconform.segment import (
    NO_EVENTS,
    TX_BUFFER_SIZE,
    EventMask,
    Segment,
    Socket,
    seq_add,
    seq_diff,
)

log = logging.getLogger(__name__)

# Longest chain of automatic segment-triggered transitions in the automaton.
CLOSURE_DEPTH = 3
SEQ_OFFSETS = (-1, 0, 1)
ACK_OFFSETS = (-1, 0, 1)

LOCAL_IP = "10.0.0.1"
LOCAL_PORT = 80
PEER_IP = "10.0.0.2"
PEER_PORT = 4000
LOCAL_ISS = 1000
PEER_ISS = 5000

_S = TcpState


def update_events(socket: Socket) -> EventMask:
    """Events currently raised by ``socket``. Pure."""
    state = socket.state
    connected = state in (_S.ESTABLISHED, _S.CLOSE_WAIT)
    mask = NO_EVENTS
    if connected:
        mask |= EventMask.CONNECTED
        if len(socket.tx_buffer) < TX_BUFFER_SIZE:
            mask |= EventMask.TX_READY
    if state is _S.CLOSED:
        mask |= EventMask.CLOSED_EVT
    if not socket.tx_buffer and state not in (_S.SYN_SENT, _S.SYN_RECEIVED):
        mask |= EventMask.TX_DONE
    if socket.rx_buffer or socket.fin_received:
        mask |= EventMask.RX_READY
    if socket.reset_flag:
        mask |= EventMask.LINK_RESET
    return mask


class SegmentHandler:
    """Base class for the handler of one connection state.

    A handler mutates the socket it is given and returns it. It must change
    ``socket.state`` only through :func:`change_state` and only to a member
    of ``allowed``.
    """

    state: TcpState
    allowed: StateSet

    @abstractmethod
    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        """Process an arriving segment.

        Parameters
        ----------
        socket: Socket
            Socket in ``self.state``.
        segment: Segment
            Arriving segment addressed to the socket.

        Returns
        -------
        socket: Socket
            The same socket, updated.
        """
        pass

    @staticmethod
    def in_window(socket: Socket, segment: Segment) -> bool:
        return segment.seq_num == socket.rcv_nxt

    @staticmethod
    def occupies_sequence_space(segment: Segment) -> bool:
        return bool(segment.length
                    or segment.flags & (FlagSet.SYN | FlagSet.FIN))

    @staticmethod
    def acks_everything(socket: Socket, segment: Segment) -> bool:
        return bool(segment.flags & FlagSet.ACK
                    and segment.ack_num == socket.snd_nxt)

    @staticmethod
    def reply_ack(socket: Socket):
        socket.emit(FlagSet.ACK)

    @staticmethod
    def reply_rst(socket: Socket, segment: Segment):
        """Answer an unacceptable segment with a reset."""
        if segment.flags & FlagSet.ACK:
            socket.emit(FlagSet.RST, seq=segment.ack_num, ack=0,
                        dest_port=segment.src_port)
        else:
            ack = seq_add(segment.seq_num, segment.length
                          + bool(segment.flags & FlagSet.SYN)
                          + bool(segment.flags & FlagSet.FIN))
            socket.emit(FlagSet.RST | FlagSet.ACK, seq=0, ack=ack,
                        dest_port=segment.src_port)

    @staticmethod
    def reset(socket: Socket):
        change_state(socket, _S.CLOSED)
        socket.reset_flag = True
        socket.tx_buffer.clear()

    @staticmethod
    def release_acked(socket: Socket, segment: Segment):
        """Drop acknowledged bytes from the transmit queue."""
        if not segment.flags & FlagSet.ACK:
            return
        acked = seq_diff(segment.ack_num, socket.snd_una)
        if 0 < acked <= seq_diff(socket.snd_nxt, socket.snd_una):
            del socket.tx_buffer[:acked]
            socket.snd_una = segment.ack_num

    @staticmethod
    def deliver(socket: Socket, segment: Segment):
        if segment.length:
            socket.rx_buffer.extend(segment.data)
            socket.rcv_nxt = seq_add(socket.rcv_nxt, segment.length)

    @staticmethod
    def take_fin(socket: Socket, new_state: TcpState):
        change_state(socket, new_state)
        socket.rcv_nxt = seq_add(socket.rcv_nxt, 1)
        socket.fin_received = True

    def screen(self, socket: Socket, segment: Segment) -> bool:
        """Common checks of a synchronized state.

        Returns True when the segment was fully handled here: a reset, an
        out-of-window segment or a stray SYN.
        """
        if segment.flags & FlagSet.RST:
            self.reset(socket)
            return True
        if not self.in_window(socket, segment):
            if self.occupies_sequence_space(segment):
                self.reply_ack(socket)
            return True
        if segment.flags & FlagSet.SYN:
            self.reply_ack(socket)
            return True
        return False


class ClosedHandler(SegmentHandler):
    state = _S.CLOSED
    allowed = frozenset({_S.CLOSED})

    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        if not segment.flags & FlagSet.RST:
            self.reply_rst(socket, segment)
        return socket


class ListenHandler(SegmentHandler):
    state = _S.LISTEN
    allowed = frozenset({_S.LISTEN, _S.SYN_RECEIVED})

    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        flags = segment.flags
        if flags & FlagSet.RST:
            return socket
        if flags & FlagSet.ACK:
            self.reply_rst(socket, segment)
            return socket
        if flags & FlagSet.SYN:
            change_state(socket, _S.SYN_RECEIVED)
            socket.remote_port = segment.src_port
            socket.rcv_nxt = seq_add(segment.seq_num, 1)
            socket.snd_una = socket.iss
            socket.snd_nxt = seq_add(socket.iss, 1)
            socket.emit(FlagSet.SYN | FlagSet.ACK, seq=socket.iss)
        return socket


class SynSentHandler(SegmentHandler):
    """Active opener waiting for the peer's SYN.

    A bare SYN is a simultaneous open: it is acknowledged without
    repeating our own SYN.
    """

    state = _S.SYN_SENT
    allowed = frozenset({_S.SYN_SENT, _S.SYN_RECEIVED, _S.ESTABLISHED,
                         _S.CLOSED})

    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        flags = segment.flags
        has_ack = bool(flags & FlagSet.ACK)
        if has_ack and segment.ack_num != socket.snd_nxt:
            if not flags & FlagSet.RST:
                self.reply_rst(socket, segment)
            return socket
        if flags & FlagSet.RST:
            if has_ack:
                self.reset(socket)
            return socket
        if flags & FlagSet.SYN:
            if has_ack:
                change_state(socket, _S.ESTABLISHED)
                socket.snd_una = segment.ack_num
            else:
                change_state(socket, _S.SYN_RECEIVED)
            socket.rcv_nxt = seq_add(segment.seq_num, 1)
            self.reply_ack(socket)
        return socket


class SynReceivedHandler(SegmentHandler):
    state = _S.SYN_RECEIVED
    allowed = frozenset({_S.SYN_RECEIVED, _S.ESTABLISHED, _S.CLOSED})

    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        if self.screen(socket, segment):
            return socket
        if not segment.flags & FlagSet.ACK:
            return socket
        if self.acks_everything(socket, segment):
            change_state(socket, _S.ESTABLISHED)
            socket.snd_una = segment.ack_num
        else:
            self.reply_rst(socket, segment)
        return socket


class EstablishedHandler(SegmentHandler):
    state = _S.ESTABLISHED
    allowed = frozenset({_S.ESTABLISHED, _S.CLOSE_WAIT, _S.CLOSED})

    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        if self.screen(socket, segment):
            return socket
        self.release_acked(socket, segment)
        self.deliver(socket, segment)
        if segment.flags & FlagSet.FIN:
            self.take_fin(socket, _S.CLOSE_WAIT)
        if segment.length or segment.flags & FlagSet.FIN:
            self.reply_ack(socket)
        return socket


class FinWait1Handler(SegmentHandler):
    state = _S.FIN_WAIT_1
    allowed = frozenset({_S.FIN_WAIT_1, _S.FIN_WAIT_2, _S.CLOSING,
                         _S.TIME_WAIT, _S.CLOSED})

    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        if self.screen(socket, segment):
            return socket
        fin_acked = self.acks_everything(socket, segment)
        self.release_acked(socket, segment)
        self.deliver(socket, segment)
        if segment.flags & FlagSet.FIN:
            self.take_fin(socket, _S.TIME_WAIT if fin_acked else _S.CLOSING)
        elif fin_acked:
            change_state(socket, _S.FIN_WAIT_2)
        if segment.length or segment.flags & FlagSet.FIN:
            self.reply_ack(socket)
        return socket


class FinWait2Handler(SegmentHandler):
    state = _S.FIN_WAIT_2
    allowed = frozenset({_S.FIN_WAIT_2, _S.TIME_WAIT, _S.CLOSED})

    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        if self.screen(socket, segment):
            return socket
        self.release_acked(socket, segment)
        self.deliver(socket, segment)
        if segment.flags & FlagSet.FIN:
            self.take_fin(socket, _S.TIME_WAIT)
        if segment.length or segment.flags & FlagSet.FIN:
            self.reply_ack(socket)
        return socket


class CloseWaitHandler(SegmentHandler):
    """The peer has closed its half. Only a reset moves the socket; an
    acknowledgment may still drain the transmit queue."""

    state = _S.CLOSE_WAIT
    allowed = frozenset({_S.CLOSE_WAIT, _S.CLOSED})

    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        if self.screen(socket, segment):
            return socket
        self.release_acked(socket, segment)
        return socket


class ClosingHandler(SegmentHandler):
    state = _S.CLOSING
    allowed = frozenset({_S.CLOSING, _S.TIME_WAIT, _S.CLOSED})

    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        if self.screen(socket, segment):
            return socket
        fin_acked = self.acks_everything(socket, segment)
        self.release_acked(socket, segment)
        if fin_acked:
            change_state(socket, _S.TIME_WAIT)
        return socket


class LastAckHandler(SegmentHandler):
    state = _S.LAST_ACK
    allowed = frozenset({_S.LAST_ACK, _S.CLOSED})

    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        if self.screen(socket, segment):
            return socket
        fin_acked = self.acks_everything(socket, segment)
        self.release_acked(socket, segment)
        if fin_acked:
            change_state(socket, _S.CLOSED)
        return socket


class TimeWaitHandler(SegmentHandler):
    state = _S.TIME_WAIT
    allowed = frozenset({_S.TIME_WAIT, _S.CLOSED})

    def __call__(self, socket: Socket, segment: Segment) -> Socket:
        if segment.flags & FlagSet.RST:
            self.reset(socket)
        elif (segment.flags & FlagSet.FIN
              or (self.occupies_sequence_space(segment)
                  and not self.in_window(socket, segment))):
            # retransmitted FIN: our last ACK was lost
            self.reply_ack(socket)
        return socket


DEFAULT_HANDLERS = (
    ClosedHandler,
    ListenHandler,
    SynSentHandler,
    SynReceivedHandler,
    EstablishedHandler,
    FinWait1Handler,
    FinWait2Handler,
    CloseWaitHandler,
    ClosingHandler,
    LastAckHandler,
    TimeWaitHandler,
)


def socket_in_state(state: TcpState) -> Socket:
    """Canonical socket for ``state``, as left by the usual path into it.

    Local end 10.0.0.1:80 with ISS 1000, peer 10.0.0.2:4000 with ISS 5000.
    """
    socket = Socket(descriptor=1, local_ip=LOCAL_IP, local_port=LOCAL_PORT,
                    iss=LOCAL_ISS)
    socket.state = state
    if state in (_S.CLOSED, _S.LISTEN):
        socket.event_flags = update_events(socket)
        return socket
    socket.remote_port = PEER_PORT
    if state not in (_S.SYN_SENT, _S.SYN_RECEIVED):
        socket.remote_ip = PEER_IP
    una, nxt, rcv, fin = {
        _S.SYN_SENT: (0, 1, None, False),
        _S.SYN_RECEIVED: (0, 1, 1, False),
        _S.ESTABLISHED: (1, 1, 1, False),
        _S.FIN_WAIT_1: (1, 2, 1, False),
        _S.FIN_WAIT_2: (2, 2, 1, False),
        _S.CLOSE_WAIT: (1, 1, 2, True),
        _S.CLOSING: (1, 2, 2, True),
        _S.LAST_ACK: (1, 2, 2, True),
        _S.TIME_WAIT: (2, 2, 2, True),
    }[state]
    socket.snd_una = LOCAL_ISS + una
    socket.snd_nxt = LOCAL_ISS + nxt
    socket.rcv_nxt = 0 if rcv is None else PEER_ISS + rcv
    socket.fin_received = fin
    socket.event_flags = update_events(socket)
    return socket


def _event_key(socket: Socket) -> ty.Tuple:
    # The alphabet is taken relative to snd_nxt and rcv_nxt, so only the
    # outstanding span matters, not the absolute numbers.
    return (socket.state, socket.reset_flag, socket.fin_received,
            seq_diff(socket.snd_nxt, socket.snd_una), len(socket.tx_buffer),
            bool(socket.rx_buffer))


class SegmentEngine:
    def __init__(self, handlers: ty.Iterable[SegmentHandler]):
        """Dispatches arriving segments to per-state handlers, similar to
        a composed transformation.

        Parameters
        ----------
        handlers: Iterable
            One handler per connection state. A state without handler
            is treated as unrecognized.
        """
        self.handlers: ty.Dict[TcpState, SegmentHandler] = {
            h.state: h for h in handlers
        }
        self._successor_cache: ty.Dict[TcpState, StateSet] = {}
        self._wait_cache: ty.Dict[ty.Tuple, StateSet] = {}

    @classmethod
    def default(cls) -> "SegmentEngine":
        return cls(h() for h in DEFAULT_HANDLERS)

    def replace(self, handler: SegmentHandler) -> "SegmentEngine":
        """New engine with ``handler`` in place of the one for its state."""
        handlers = dict(self.handlers)
        handlers[handler.state] = handler
        return SegmentEngine(handlers.values())

    def handle_in_state(self, socket: Socket, segment: Segment) -> Socket:
        """Run the handler of the socket's current state.

        A socket whose state has no handler is moved to CLOSED and the
        segment is discarded.
        """
        socket.check_guard()
        handler = self.handlers.get(socket.state)
        if handler is None:
            log.warning("socket %s in unrecognized state %r, closing",
                        socket.descriptor, socket.state)
            return change_state(socket, _S.CLOSED)
        return handler(socket, segment)

    def process_one_segment(self, socket: Socket, segment: Segment) -> Socket:
        """Deliver ``segment`` to ``socket`` if addressed to it, then
        refresh the socket's events."""
        if segment.dest_port != socket.local_port:
            return socket
        log.debug("socket %s in %s: %s", socket.descriptor,
                  getattr(socket.state, "value", socket.state),
                  segment.describe())
        self.handle_in_state(socket, segment)
        socket.event_flags = update_events(socket)
        return socket

    def alphabet(self, socket: Socket,
                 lengths: ty.Sequence[int] = (0,)) -> ty.Iterator[Segment]:
        """Every segment class around the socket's tracked numbers."""
        src_port = socket.remote_port or PEER_PORT
        for flags in np.arange(32):
            for seq_offset in SEQ_OFFSETS:
                for ack_offset in ACK_OFFSETS:
                    for length in lengths:
                        yield Segment(
                            src_port=src_port,
                            dest_port=socket.local_port,
                            seq_num=seq_add(socket.rcv_nxt, seq_offset),
                            ack_num=seq_add(socket.snd_nxt, ack_offset),
                            flags=FlagSet(int(flags)),
                            length=length,
                        )

    def successors(self, socket: Socket,
                   lengths: ty.Sequence[int] = (0,)) -> ty.List[Socket]:
        """Sockets reachable from ``socket`` with one arriving segment."""
        results = []
        for segment in self.alphabet(socket, lengths):
            candidate = socket.copy()
            candidate.outbound.clear()
            results.append(self.process_one_segment(candidate, segment))
        return results

    def successor_states(self, state: TcpState) -> StateSet:
        if state not in self._successor_cache:
            found = {r.state for r in self.successors(socket_in_state(state))}
            self._successor_cache[state] = frozenset(found | {state})
        return self._successor_cache[state]

    def closure_profile(self, start: TcpState,
                        depth: int = CLOSURE_DEPTH) -> ty.List[StateSet]:
        """Cumulative reachable sets after 0, 1, ..., ``depth`` segments."""
        seen = {start}
        frontier = {start}
        profile = [frozenset(seen)]
        for _ in range(depth):
            reached = set()
            for state in frontier:
                reached |= self.successor_states(state)
            frontier = reached - seen
            seen |= reached
            profile.append(frozenset(seen))
        return profile

    def reachable_states(self, start: TcpState,
                         depth: int = CLOSURE_DEPTH) -> StateSet:
        """Reflexive closure of the one-segment relation, bounded by
        ``depth``."""
        return self.closure_profile(start, depth)[-1]

    def wait_for_events_states(self, start: ty.Union[TcpState, Socket],
                               mask: EventMask) -> StateSet:
        """States a socket can be in when a wait on ``mask`` completes.

        Starting from ``start``, segments are applied one step at a time
        until some reached socket raises an event of ``mask``; every state
        seen up to that step is returned. The empty set means the event
        cannot happen within the closure depth.

        Parameters
        ----------
        start: TcpState or Socket
            The state (its canonical socket is used) or the actual socket
            at the start of the wait.
        mask: EventMask
            Awaited events; must not be empty.

        Returns
        -------
        states: frozenset
            Possible states on completion.
        """
        mask = EventMask(mask)
        if not mask:
            raise ValueError("event mask must not be empty.")
        socket = start if isinstance(start, Socket) else socket_in_state(start)
        key = _event_key(socket) + (int(mask),)
        if key not in self._wait_cache:
            self._wait_cache[key] = self._wait_states(socket, mask)
        return self._wait_cache[key]

    def _wait_states(self, socket: Socket, mask: EventMask) -> StateSet:
        states = {socket.state}
        if update_events(socket) & mask:
            return frozenset(states)
        frontier = {_event_key(socket): socket}
        for _ in range(CLOSURE_DEPTH):
            reached: ty.Dict[ty.Tuple, Socket] = {}
            for current in frontier.values():
                for result in self.successors(current, lengths=(0, 1)):
                    reached.setdefault(_event_key(result), result)
            states |= {r.state for r in reached.values()}
            if any(update_events(r) & mask for r in reached.values()):
                return frozenset(states)
            frontier = reached
        return frozenset()


_DEFAULT_ENGINE = SegmentEngine.default()


def default_engine() -> SegmentEngine:
    return _DEFAULT_ENGINE


def handle_in_state(socket: Socket, segment: Segment) -> Socket:
    return _DEFAULT_ENGINE.handle_in_state(socket, segment)


def process_one_segment(socket: Socket, segment: Segment) -> Socket:
    return _DEFAULT_ENGINE.process_one_segment(socket, segment)


def reachable_states(start: TcpState, depth: int = CLOSURE_DEPTH) -> StateSet:
    return _DEFAULT_ENGINE.reachable_states(start, depth)


def wait_for_events_states(start: ty.Union[TcpState, Socket],
                           mask: EventMask) -> StateSet:
    return _DEFAULT_ENGINE.wait_for_events_states(start, mask)
