# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""Line-based scenario scripts.

One command per line, ``#`` starts a comment::

    [a]
    open
    connect 10.0.0.2 80
    send 68656c6c6f
    shutdown
    close

    [b]
    open
    accept 80
    receive
    close

A file without sections holds a single script.
"""

import ipaddress
import logging
import typing as ty
from dataclasses import dataclass

from tcpconform.activity import BlockingPoint, Sleep, Yield
from tcpconform.errors import ErrorCode, ScriptError
from tcpconform.socket_api import (
    ConnectedSession,
    ConnectFailure,
    SocketApi,
    UnconnectedSession,
)

log = logging.getLogger(__name__)

# command -> argument count
COMMANDS = {
    "open": 0,
    "connect": 2,
    "accept": 1,
    "send": 1,
    "receive": 0,
    "shutdown": 0,
    "close": 0,
    "sleep": 1,
    "inject-rst": 0,
    "drop-after": 1,
}


@dataclass(frozen=True)
class ScriptStep:
    command: str
    args: ty.Tuple[ty.Any, ...] = ()
    line: int = 0

    def __str__(self) -> str:
        return " ".join([self.command, *(_show(a) for a in self.args)])


def _show(arg: ty.Any) -> str:
    return arg.hex() if isinstance(arg, bytes) else str(arg)


def _port(text: str, line: int) -> int:
    value = _count(text, line)
    if value > 65535:
        raise ScriptError(f"line {line}: port {value} out of range")
    return value


def _count(text: str, line: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ScriptError(f"line {line}: expected a number, got {text!r}") \
            from None
    if value < 0:
        raise ScriptError(f"line {line}: {value} is negative")
    return value


def parse_step(text: str, line: int = 0) -> ty.Optional[ScriptStep]:
    """Parse one line; ``None`` for blank and comment lines."""
    text = text.split("#", 1)[0].strip()
    if not text:
        return None
    command, *words = text.split()
    command = command.lower()
    if command not in COMMANDS:
        raise ScriptError(f"line {line}: unknown command {command!r}")
    if len(words) != COMMANDS[command]:
        raise ScriptError(
            f"line {line}: {command} takes {COMMANDS[command]} argument(s)"
        )
    if command == "connect":
        try:
            ipaddress.ip_address(words[0])
        except ValueError:
            raise ScriptError(f"line {line}: bad address {words[0]!r}") \
                from None
        args: ty.Tuple[ty.Any, ...] = (words[0], _port(words[1], line))
    elif command == "accept":
        args = (_port(words[0], line),)
    elif command == "send":
        try:
            args = (bytes.fromhex(words[0]),)
        except ValueError:
            raise ScriptError(f"line {line}: bad hex data {words[0]!r}") \
                from None
    elif command in ("sleep", "drop-after"):
        args = (_count(words[0], line),)
    else:
        args = ()
    return ScriptStep(command, args, line)


def parse_script(text: str) -> ty.Dict[str, ty.List[ScriptStep]]:
    """Parse a script file into its sections.

    Lines before the first ``[name]`` header belong to section 'a'.
    """
    sections: ty.Dict[str, ty.List[ScriptStep]] = {}
    current = "a"
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip().lower()
            if not current:
                raise ScriptError(f"line {number}: empty section name")
            sections.setdefault(current, [])
            continue
        step = parse_step(raw, number)
        if step is not None:
            sections.setdefault(current, []).append(step)
    return sections


def parse_steps(lines: ty.Iterable[str]) -> ty.List[ScriptStep]:
    steps = []
    for number, raw in enumerate(lines, start=1):
        step = parse_step(raw, number)
        if step is not None:
            steps.append(step)
    return steps


class ScriptRunner:
    def __init__(self, steps: ty.Sequence[ScriptStep]):
        """User task executing script steps in order.

        Every result is inspected. After a failed connect or accept the
        data calls are skipped and ``close`` still frees the socket.
        """
        self.steps = list(steps)
        self.received = bytearray()
        self.errors: ty.List[ty.Tuple[str, ErrorCode]] = []

    def __call__(self, api: SocketApi
                 ) -> ty.Generator[BlockingPoint, ty.Any, None]:
        ep = api.endpoint
        unconnected: ty.Optional[UnconnectedSession] = None
        connected: ty.Optional[ConnectedSession] = None
        for step in self.steps:
            command = step.command
            if command == "open":
                opened = yield from api.socket_open()
                if isinstance(opened, ErrorCode):
                    self._failed(step, opened)
                else:
                    unconnected = opened
            elif command in ("connect", "accept"):
                if unconnected is None:
                    self._skipped(step)
                    continue
                if command == "connect":
                    outcome = yield from api.socket_connect(unconnected,
                                                            *step.args)
                else:
                    outcome = yield from api.socket_listen_accept(
                        unconnected, *step.args)
                if isinstance(outcome, ConnectFailure):
                    self._failed(step, outcome.error)
                    unconnected = outcome.session
                else:
                    connected, unconnected = outcome, None
            elif command in ("send", "receive", "shutdown"):
                if connected is None:
                    self._skipped(step)
                    continue
                if command == "send":
                    result = yield from api.socket_send(connected, *step.args)
                elif command == "receive":
                    result = yield from api.socket_receive(connected)
                else:
                    result = yield from api.socket_shutdown(connected)
                if not result.ok:
                    self._failed(step, result.error)
                elif command == "receive":
                    self.received.extend(result.value)
            elif command == "close":
                session = connected or unconnected
                if session is None:
                    self._skipped(step)
                    continue
                yield from api.socket_close(session)
                connected = unconnected = None
            elif command == "sleep":
                yield Sleep(ep.now + step.args[0])
            elif command == "inject-rst":
                if connected is None:
                    self._skipped(step)
                    continue
                yield Yield()
                ep.inject_rst(connected.descriptor)
            elif command == "drop-after":
                ep.drop_after = step.args[0]

    def _failed(self, step: ScriptStep, error: ErrorCode):
        log.info("step '%s' (line %s) failed: %s", step, step.line,
                 error.value)
        self.errors.append((step.command, error))

    @staticmethod
    def _skipped(step: ScriptStep):
        log.info("step '%s' (line %s) skipped: no matching session", step,
                 step.line)


def as_task(script: ty.Any) -> ty.Callable:
    """Turn a script into a user task.

    Accepts a callable task, script text, a sequence of lines or a
    sequence of :class:`ScriptStep`.
    """
    if callable(script):
        return script
    if isinstance(script, str):
        return ScriptRunner(parse_steps(script.splitlines()))
    steps = list(script)
    if all(isinstance(s, ScriptStep) for s in steps):
        return ScriptRunner(steps)
    if all(isinstance(s, str) for s in steps):
        return ScriptRunner(parse_steps(steps))
    raise ScriptError("a script is a callable, text or a list of steps")
