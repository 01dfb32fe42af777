# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

import unittest

from tcpconform.activity import Yield
from tcpconform.automaton import TcpState
from tcpconform.config import HarnessConfig
from tcpconform.errors import (
    ErrorCode,
    SessionConsumedError,
    UncheckedResultError,
)
from tcpconform.harness import run_pair
from tcpconform.segment import SocketProtocol, SockType
from tcpconform.socket_api import (
    ApiResult,
    ConnectedSession,
    ConnectFailure,
    UnconnectedSession,
)


def idle(api):
    yield Yield()


def listener(port=80):
    def task(api):
        session = yield from api.socket_open()
        yield from api.socket_listen_accept(session, port)
    return task


class TestApiResult(unittest.TestCase):
    def test_value_needs_inspection(self):
        result = ApiResult(5)
        with self.assertRaises(UncheckedResultError):
            result.value
        self.assertTrue(result.ok)
        self.assertEqual(result.value, 5)

    def test_error(self):
        result = ApiResult(error=ErrorCode.ERROR_TIMEOUT)
        self.assertFalse(result.ok)
        self.assertIs(result.error, ErrorCode.ERROR_TIMEOUT)


class TestSocketOpen(unittest.TestCase):
    def test_open(self):
        seen = {}

        def task(api):
            seen["session"] = yield from api.socket_open()

        run_pair(task, idle)
        session = seen["session"]
        self.assertIsInstance(session, UnconnectedSession)
        self.assertIs(session.state, TcpState.CLOSED)

    def test_table_full(self):
        seen = []

        def task(api):
            seen.append((yield from api.socket_open()))
            seen.append((yield from api.socket_open()))

        run_pair(task, idle, config=HarnessConfig(socket_table_capacity=1))
        self.assertIsInstance(seen[0], UnconnectedSession)
        self.assertIs(seen[1], ErrorCode.ERROR_INVALID_SOCKET)

    def test_only_stream_tcp(self):
        seen = []

        def task(api):
            try:
                yield from api.socket_open(SockType.DGRAM,
                                           SocketProtocol.UDP)
            except ValueError:
                seen.append("rejected")

        run_pair(task, idle)
        self.assertEqual(seen, ["rejected"])


class TestConnect(unittest.TestCase):
    def test_connect_and_accept(self):
        seen = {}

        def active(api):
            session = yield from api.socket_open()
            seen["a"] = yield from api.socket_connect(session, "10.0.0.2", 80)

        def passive(api):
            session = yield from api.socket_open()
            seen["b"] = yield from api.socket_listen_accept(session, 80)

        result = run_pair(active, passive)
        self.assertTrue(result.ok)
        self.assertIsInstance(seen["a"], ConnectedSession)
        self.assertIsInstance(seen["b"], ConnectedSession)
        self.assertEqual(seen["a"].model().remote_ip, "10.0.0.2")
        self.assertEqual(seen["b"].model().remote_ip, "10.0.0.1")
        self.assertEqual(seen["a"].model().remote_port, 80)

    def test_port_zero(self):
        seen = {}

        def task(api):
            session = yield from api.socket_open()
            failure = yield from api.socket_connect(session, "10.0.0.2", 0)
            seen["error"] = failure.error
            yield from api.socket_close(failure.session)

        run_pair(task, idle)
        self.assertIs(seen["error"], ErrorCode.ERROR_PORT_UNREACHABLE)

    def test_refused_with_reset(self):
        seen = {}

        def task(api):
            session = yield from api.socket_open()
            failure = yield from api.socket_connect(session, "10.0.0.2", 81)
            seen["failure"] = failure
            seen["error"] = failure.error

        result = run_pair(task, idle,
                          config=HarnessConfig(rst_unmatched=True))
        self.assertIsInstance(seen["failure"], ConnectFailure)
        self.assertIs(seen["error"], ErrorCode.ERROR_CONNECTION_RESET)
        self.assertEqual(result.trace.segments_sent("b"), ["RST+ACK"])
        self.assertIs(result.final_state("a"), TcpState.CLOSED)

    def test_timeout_retransmits_syn(self):
        seen = {}

        def task(api):
            session = yield from api.socket_open()
            failure = yield from api.socket_connect(session, "10.0.0.2", 81,
                                                    timeout=50)
            seen["error"] = failure.error

        result = run_pair(task, idle)
        self.assertIs(seen["error"], ErrorCode.ERROR_TIMEOUT)
        sent = result.trace.segments_sent("a")
        self.assertGreater(len(sent), 1)
        self.assertEqual(set(sent), {"SYN"})
        self.assertIs(result.final_state("a"), TcpState.CLOSED)

    def test_accept_timeout(self):
        seen = {}

        def task(api):
            session = yield from api.socket_open()
            failure = yield from api.socket_listen_accept(session, 80,
                                                          timeout=10)
            seen["error"] = failure.error

        result = run_pair(idle, task)
        self.assertIs(seen["error"], ErrorCode.ERROR_TIMEOUT)
        self.assertEqual(result.end_time, 10)
        self.assertEqual(result.trace.state_path("b"),
                         ["CLOSED", "LISTEN", "CLOSED"])


class TestSessionContract(unittest.TestCase):
    def test_consumed_session(self):
        seen = []

        def task(api):
            session = yield from api.socket_open()
            yield from api.socket_close(session)
            try:
                yield from api.socket_close(session)
            except SessionConsumedError:
                seen.append("consumed")

        run_pair(task, idle)
        self.assertEqual(seen, ["consumed"])

    def test_failure_must_be_inspected(self):
        seen = []

        def task(api):
            session = yield from api.socket_open()
            failure = yield from api.socket_connect(session, "10.0.0.2", 0)
            try:
                yield from api.socket_close(failure.session)
            except UncheckedResultError:
                seen.append("unchecked")
            seen.append(failure.error)
            yield from api.socket_close(failure.session)

        result = run_pair(task, idle)
        self.assertEqual(seen, ["unchecked",
                                ErrorCode.ERROR_PORT_UNREACHABLE])
        self.assertIs(result.final_state("a"), TcpState.CLOSED)

    def test_result_must_be_inspected(self):
        seen = []

        def active(api):
            session = yield from api.socket_open()
            connected = yield from api.socket_connect(session, "10.0.0.2", 80)
            yield from api.socket_send(connected, b"hi")
            try:
                yield from api.socket_send(connected, b"again")
            except UncheckedResultError:
                seen.append("unchecked")

        run_pair(active, listener())
        self.assertEqual(seen, ["unchecked"])

    def test_connect_needs_unconnected_session(self):
        seen = []

        def active(api):
            session = yield from api.socket_open()
            connected = yield from api.socket_connect(session, "10.0.0.2", 80)
            try:
                yield from api.socket_connect(connected, "10.0.0.2", 80)
            except TypeError:
                seen.append("rejected")

        run_pair(active, listener())
        self.assertEqual(seen, ["rejected"])


class TestDataTransfer(unittest.TestCase):
    def test_send_receive(self):
        seen = {}

        def active(api):
            session = yield from api.socket_open()
            connected = yield from api.socket_connect(session, "10.0.0.2", 80)
            result = yield from api.socket_send(connected, b"x" * 3000)
            seen["sent"] = result.value if result.ok else result.error

        def passive(api):
            session = yield from api.socket_open()
            connected = yield from api.socket_listen_accept(session, 80)
            data = bytearray()
            while len(data) < 3000:
                result = yield from api.socket_receive(connected)
                if not result.ok or not result.value:
                    break
                data.extend(result.value)
            seen["received"] = bytes(data)

        result = run_pair(active, passive)
        self.assertTrue(result.ok)
        self.assertEqual(seen["sent"], 3000)
        self.assertEqual(seen["received"], b"x" * 3000)
        data = [r for r in result.trace.filter(ep="a")
                if r.flags == "PSH+ACK"]
        self.assertTrue(all(r.detail["len"] <= 1460 for r in data))

    def test_receive_after_peer_close(self):
        seen = {}

        def active(api):
            session = yield from api.socket_open()
            connected = yield from api.socket_connect(session, "10.0.0.2", 80)
            result = yield from api.socket_shutdown(connected)
            seen["shutdown"] = result.error
            yield from api.socket_close(connected)

        def passive(api):
            session = yield from api.socket_open()
            connected = yield from api.socket_listen_accept(session, 80)
            result = yield from api.socket_receive(connected)
            seen["eof"] = result.value if result.ok else result.error
            seen["state"] = connected.state
            yield from api.socket_close(connected)

        result = run_pair(active, passive)
        self.assertTrue(result.ok)
        self.assertIs(seen["shutdown"], ErrorCode.NO_ERROR)
        self.assertEqual(seen["eof"], b"")
        self.assertIs(seen["state"], TcpState.CLOSE_WAIT)
        self.assertIs(result.final_state("a"), TcpState.CLOSED)
        self.assertIs(result.final_state("b"), TcpState.CLOSED)

    def test_shutdown_twice(self):
        seen = []

        def active(api):
            session = yield from api.socket_open()
            connected = yield from api.socket_connect(session, "10.0.0.2", 80)
            for _ in range(2):
                result = yield from api.socket_shutdown(connected)
                seen.append(result.error)
            yield from api.socket_close(connected)

        def passive(api):
            session = yield from api.socket_open()
            connected = yield from api.socket_listen_accept(session, 80)
            result = yield from api.socket_receive(connected)
            result.ok
            yield from api.socket_close(connected)

        run_pair(active, passive)
        self.assertEqual(seen, [ErrorCode.NO_ERROR,
                                ErrorCode.ERROR_NOT_CONNECTED])


if __name__ == "__main__":
    unittest.main()
