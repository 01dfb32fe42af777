# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""User-facing socket API with session handles.

The handle type encodes the connection phase: only ``socket_open`` makes an
:class:`UnconnectedSession` and only a successful connect or accept makes a
:class:`ConnectedSession`, so data calls cannot precede a connection.
Handles passed to connect, accept or close are consumed.

Every call is a generator run by the harness scheduler::

    session = yield from api.socket_open()
    result = yield from api.socket_connect(session, "10.0.0.2", 80)
    if isinstance(result, ConnectFailure):
        log.info("connect failed: %s", result.error)
        yield from api.socket_close(result.session)
"""

import logging
import typing as ty

from tcpconform.activity import (
    BlockingPoint,
    Yield,
    check_reacquired,
    wait_for_events,
)
from tcpconform.automaton import FlagSet, TcpState, change_state
from tcpconform.errors import (
    ErrorCode,
    GuardViolation,
    SessionConsumedError,
    UncheckedResultError,
)
from tcpconform.segment import (
    MSS,
    TX_BUFFER_SIZE,
    EventMask,
    Socket,
    SocketModel,
    SocketProtocol,
    SockType,
    seq_add,
)

log = logging.getLogger(__name__)

T = ty.TypeVar("T")
Call = ty.Generator[BlockingPoint, ty.Any, T]

_S = TcpState
_NOT_CONNECTED = frozenset({_S.FIN_WAIT_1, _S.FIN_WAIT_2, _S.CLOSING,
                            _S.TIME_WAIT, _S.LAST_ACK})


class ApiResult(ty.Generic[T]):
    """Outcome of a fallible call on a connected session.

    Reading ``ok`` or ``error`` marks the result inspected. The session
    that produced it cannot be used again until then.
    """

    def __init__(self, value: ty.Optional[T] = None,
                 error: ErrorCode = ErrorCode.NO_ERROR):
        self._value = value
        self._error = error
        self.inspected = False

    @property
    def ok(self) -> bool:
        self.inspected = True
        return self._error is ErrorCode.NO_ERROR

    @property
    def error(self) -> ErrorCode:
        self.inspected = True
        return self._error

    @property
    def value(self) -> T:
        if not self.inspected:
            raise UncheckedResultError("result read before its error code")
        return self._value

    def __repr__(self) -> str:
        return f"ApiResult(value={self._value!r}, error={self._error.name})"


class _Session:
    def __init__(self, api: "SocketApi", socket: Socket,
                 released: ty.Optional[TcpState] = None):
        self._api = api
        self._socket = socket
        self._consumed = False
        self._pending: ty.Optional[ty.Any] = None
        self._released = released if released is not None else socket.state

    @property
    def descriptor(self) -> int:
        return self._socket.descriptor

    @property
    def state(self) -> TcpState:
        return self._socket.state

    def model(self) -> SocketModel:
        return self._socket.model()

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _check(self):
        if self._consumed:
            raise SessionConsumedError(
                f"session of socket {self.descriptor} was consumed"
            )
        if self._pending is not None and not self._pending.inspected:
            raise UncheckedResultError(
                f"previous result on socket {self.descriptor} was not "
                "inspected"
            )

    def _consume(self) -> Socket:
        self._check()
        self._consumed = True
        return self._socket

    def __repr__(self) -> str:
        state = "consumed" if self._consumed else self.state.value
        return f"{type(self).__name__}(sd={self.descriptor}, {state})"


class UnconnectedSession(_Session):
    """An open socket without a peer."""


class ConnectedSession(_Session):
    """A socket that completed a handshake; the peer address is set."""


class ConnectFailure:
    """A failed connect or accept. Carries the socket back as an
    unconnected session so the caller can close it."""

    def __init__(self, session: UnconnectedSession, error: ErrorCode):
        self._session = session
        self._error = error
        self.inspected = False
        session._pending = self

    @property
    def error(self) -> ErrorCode:
        self.inspected = True
        return self._error

    @property
    def session(self) -> UnconnectedSession:
        return self._session

    def __repr__(self) -> str:
        return f"ConnectFailure({self._error.name})"


Connected = ty.Union[ConnectedSession, ConnectFailure]


class SocketApi:
    def __init__(self, endpoint: ty.Any):
        """Socket calls of the user activity of one endpoint.

        Parameters
        ----------
        endpoint: Endpoint
            Harness endpoint providing the socket table, the clock, the
            channel and the trace.
        """
        self.endpoint = endpoint

    @property
    def config(self):
        return self.endpoint.config

    def _leave(self, session_or_socket: ty.Union[_Session, Socket],
               call: str, entry: ty.Any,
               error: ErrorCode = ErrorCode.NO_ERROR):
        socket = (session_or_socket._socket
                  if isinstance(session_or_socket, _Session)
                  else session_or_socket)
        ep = self.endpoint
        ep.flush(socket)
        ep.record_call(socket, call, entry, error)
        if socket.guard.held_by(ep.user):
            socket.guard.release(ep.user)
        if isinstance(session_or_socket, _Session):
            session_or_socket._released = socket.state

    def _resume(self, session: _Session, call: str,
                consume: bool) -> Call[Socket]:
        if consume:
            socket = session._consume()
        else:
            session._check()
            socket = session._socket
        yield Yield()
        if not socket.guard.acquire(self.endpoint.user):
            raise GuardViolation(
                f"{call} on socket {socket.descriptor} found its guard held "
                f"by {socket.guard.owner}"
            )
        log.debug("%s: %s on socket %s in %s", self.endpoint.name, call,
                  socket.descriptor, socket.state.value)
        check_reacquired(self.endpoint, socket, session._released)
        return socket

    def socket_open(self, sock_type: SockType = SockType.STREAM,
                    protocol: SocketProtocol = SocketProtocol.TCP
                    ) -> Call[ty.Union[UnconnectedSession, ErrorCode]]:
        """Allocate a socket.

        Returns
        -------
        session: UnconnectedSession or ErrorCode
            ERROR_INVALID_SOCKET when the socket table is full.
        """
        if sock_type is not SockType.STREAM or protocol is not SocketProtocol.TCP:
            raise ValueError("only STREAM/TCP sockets are supported.")
        yield Yield()
        ep = self.endpoint
        socket = ep.allocate_socket()
        if socket is None:
            ep.record_call(None, "open", None, ErrorCode.ERROR_INVALID_SOCKET)
            return ErrorCode.ERROR_INVALID_SOCKET
        ep.record_call(socket, "open", None, ErrorCode.NO_ERROR)
        return UnconnectedSession(self, socket)

    def socket_connect(self, session: UnconnectedSession, remote_ip: str,
                       remote_port: int,
                       timeout: ty.Optional[int] = None) -> Call[Connected]:
        """Active open.

        Returns
        -------
        result: ConnectedSession or ConnectFailure
            ERROR_PORT_UNREACHABLE for port 0, ERROR_TIMEOUT without an
            answer, ERROR_CONNECTION_RESET when the peer refused.
        """
        if not isinstance(session, UnconnectedSession):
            raise TypeError("connect needs an unconnected session.")
        if not remote_ip:
            raise ValueError("remote_ip must be set.")
        socket = yield from self._resume(session, "connect", consume=True)
        entry = socket.state
        ep = self.endpoint
        if remote_port == 0:
            return self._fail(socket, "connect", entry,
                              ErrorCode.ERROR_PORT_UNREACHABLE)

        change_state(socket, _S.SYN_SENT)
        if not socket.local_port:
            socket.local_port = ep.ephemeral_port()
        socket.remote_port = remote_port
        socket.reset_flag = False
        socket.fin_received = False
        socket.tx_buffer.clear()
        socket.rx_buffer.clear()
        socket.iss = ep.next_iss()
        socket.snd_una = socket.iss
        socket.snd_nxt = seq_add(socket.iss, 1)
        socket.rcv_nxt = 0
        socket.emit(FlagSet.SYN, seq=socket.iss)
        ep.flush(socket)

        fired = yield from wait_for_events(
            ep, socket, EventMask.CONNECTED | EventMask.CLOSED_EVT,
            self._timeout(socket, timeout),
        )
        if fired is ErrorCode.ERROR_TIMEOUT:
            if socket.state is not _S.CLOSED:
                change_state(socket, _S.CLOSED)
            return self._fail(socket, "connect", entry,
                              ErrorCode.ERROR_TIMEOUT)
        if socket.state is _S.CLOSED:
            return self._fail(socket, "connect", entry,
                              self._closed_error(socket))
        socket.remote_ip = remote_ip
        connected = ConnectedSession(self, socket)
        self._leave(connected, "connect", entry)
        return connected

    def socket_listen_accept(self, session: UnconnectedSession,
                             local_port: int,
                             timeout: ty.Optional[int] = None
                             ) -> Call[Connected]:
        """Passive open on ``local_port``, waiting for one peer."""
        if not isinstance(session, UnconnectedSession):
            raise TypeError("accept needs an unconnected session.")
        socket = yield from self._resume(session, "accept", consume=True)
        entry = socket.state
        ep = self.endpoint
        if ep.port_in_use(local_port, socket):
            socket.guard.release(ep.user)
            raise ValueError(f"local port {local_port} is in use.")

        change_state(socket, _S.LISTEN)
        socket.local_port = local_port
        socket.reset_flag = False
        socket.fin_received = False
        socket.iss = ep.next_iss()
        ep.flush(socket)

        fired = yield from wait_for_events(
            ep, socket, EventMask.CONNECTED | EventMask.CLOSED_EVT,
            self._timeout(socket, timeout),
        )
        if fired is ErrorCode.ERROR_TIMEOUT:
            if socket.state is not _S.CLOSED:
                change_state(socket, _S.CLOSED)
            return self._fail(socket, "accept", entry,
                              ErrorCode.ERROR_TIMEOUT)
        if socket.state is _S.CLOSED:
            error = (ErrorCode.ERROR_CONNECTION_RESET if socket.reset_flag
                     else ErrorCode.ERROR_TIMEOUT)
            return self._fail(socket, "accept", entry, error)
        socket.remote_ip = ep.peer_ip
        connected = ConnectedSession(self, socket)
        self._leave(connected, "accept", entry)
        return connected

    def socket_send(self, session: ConnectedSession, data: bytes,
                    flags: int = 0,
                    timeout: ty.Optional[int] = None) -> Call[ApiResult[int]]:
        """Queue ``data`` for the peer, MSS-sized segments at a time.

        Blocks while the transmit queue is full. ``flags`` is accepted for
        interface compatibility and ignored.
        """
        if not isinstance(session, ConnectedSession):
            raise TypeError("send needs a connected session.")
        socket = yield from self._resume(session, "send", consume=False)
        entry = socket.state
        ep = self.endpoint
        data = bytes(data)
        written = 0
        error = ErrorCode.NO_ERROR
        while True:
            if socket.state is _S.CLOSED:
                error = self._closed_error(socket)
                break
            if socket.state not in (_S.ESTABLISHED, _S.CLOSE_WAIT):
                error = ErrorCode.ERROR_NOT_CONNECTED
                break
            if written == len(data):
                break
            room = TX_BUFFER_SIZE - len(socket.tx_buffer)
            if room <= 0:
                fired = yield from wait_for_events(
                    ep, socket,
                    EventMask.TX_READY | EventMask.LINK_RESET
                    | EventMask.CLOSED_EVT,
                    self._timeout(socket, timeout),
                )
                if fired is ErrorCode.ERROR_TIMEOUT:
                    error = fired
                    break
                continue
            chunk = data[written:written + min(room, MSS)]
            socket.emit(FlagSet.PSH | FlagSet.ACK, payload=chunk)
            socket.snd_nxt = seq_add(socket.snd_nxt, len(chunk))
            socket.check_guard()
            socket.tx_buffer.extend(chunk)
            written += len(chunk)
            ep.flush(socket)
        return self._settle(session, "send", entry, ApiResult(written, error))

    def socket_receive(self, session: ConnectedSession, flags: int = 0,
                       timeout: ty.Optional[int] = None
                       ) -> Call[ApiResult[bytes]]:
        """Take everything received so far; ``b""`` once the peer closed."""
        if not isinstance(session, ConnectedSession):
            raise TypeError("receive needs a connected session.")
        socket = yield from self._resume(session, "receive", consume=False)
        entry = socket.state
        while True:
            if socket.rx_buffer:
                socket.check_guard()
                data = bytes(socket.rx_buffer)
                socket.rx_buffer.clear()
                result = ApiResult(data)
                break
            if socket.fin_received:
                result = ApiResult(b"")
                break
            if socket.state is _S.CLOSED:
                result = ApiResult(error=self._closed_error(socket))
                break
            if socket.state not in (_S.ESTABLISHED, _S.FIN_WAIT_1,
                                    _S.FIN_WAIT_2):
                result = ApiResult(error=ErrorCode.ERROR_NOT_CONNECTED)
                break
            fired = yield from wait_for_events(
                self.endpoint, socket,
                EventMask.RX_READY | EventMask.LINK_RESET
                | EventMask.CLOSED_EVT,
                self._timeout(socket, timeout),
            )
            if fired is ErrorCode.ERROR_TIMEOUT:
                result = ApiResult(error=fired)
                break
        return self._settle(session, "receive", entry, result)

    def socket_shutdown(self, session: ConnectedSession, how: str = "both",
                        timeout: ty.Optional[int] = None
                        ) -> Call[ApiResult[None]]:
        """Flush the transmit queue, then send FIN.

        The state is read again once the queue drained: the peer may have
        closed or reset the connection in the meantime. With the harness in
        buggy-shutdown mode the state seen on entry is used instead.
        """
        if not isinstance(session, ConnectedSession):
            raise TypeError("shutdown needs a connected session.")
        if how != "both":
            raise ValueError("only full-duplex shutdown is supported.")
        socket = yield from self._resume(session, "shutdown", consume=False)
        entry = socket.state
        error = ErrorCode.NO_ERROR
        if entry in _NOT_CONNECTED:
            error = ErrorCode.ERROR_NOT_CONNECTED
        elif entry is _S.CLOSED:
            error = self._closed_error(socket)
        else:
            fired = yield from wait_for_events(
                self.endpoint, socket, EventMask.TX_DONE,
                self._timeout(socket, timeout),
            )
            if fired is ErrorCode.ERROR_TIMEOUT:
                error = fired
            else:
                state = (entry if self.config.buggy_shutdown
                         else socket.state)
                if state in (_S.SYN_RECEIVED, _S.ESTABLISHED):
                    self._send_fin(socket, _S.FIN_WAIT_1)
                elif state is _S.CLOSE_WAIT:
                    self._send_fin(socket, _S.LAST_ACK)
                elif socket.state is _S.CLOSED:
                    error = self._closed_error(socket)
                else:
                    error = ErrorCode.ERROR_NOT_CONNECTED
        return self._settle(session, "shutdown", entry, ApiResult(None, error))

    def socket_close(self, session: _Session) -> Call[None]:
        """Release the session. Total: never fails.

        An open connection is closed in an orderly way; the socket record
        stays with the endpoint until it reaches CLOSED.
        """
        if not isinstance(session, _Session):
            raise TypeError("close needs a session.")
        socket = yield from self._resume(session, "close", consume=True)
        entry = socket.state
        if entry in (_S.LISTEN, _S.SYN_SENT):
            change_state(socket, _S.CLOSED)
        elif entry in (_S.SYN_RECEIVED, _S.ESTABLISHED):
            self._send_fin(socket, _S.FIN_WAIT_1)
        elif entry is _S.CLOSE_WAIT:
            self._send_fin(socket, _S.LAST_ACK)
        socket.owned = False
        self._leave(socket, "close", entry)
        self.endpoint.release_socket(socket)

    @staticmethod
    def _send_fin(socket: Socket, new_state: TcpState):
        change_state(socket, new_state)
        socket.emit(FlagSet.FIN | FlagSet.ACK)
        socket.snd_nxt = seq_add(socket.snd_nxt, 1)

    @staticmethod
    def _closed_error(socket: Socket) -> ErrorCode:
        return (ErrorCode.ERROR_CONNECTION_RESET if socket.reset_flag
                else ErrorCode.ERROR_NOT_CONNECTED)

    @staticmethod
    def _timeout(socket: Socket, timeout: ty.Optional[int]) -> int:
        return socket.timeout if timeout is None else timeout

    def _fail(self, socket: Socket, call: str, entry: TcpState,
              error: ErrorCode) -> ConnectFailure:
        session = UnconnectedSession(self, socket)
        self._leave(session, call, entry, error)
        return ConnectFailure(session, error)

    def _settle(self, session: _Session, call: str, entry: TcpState,
                result: ApiResult) -> ApiResult:
        self._leave(session, call, entry, result._error)
        session._pending = result
        return result
