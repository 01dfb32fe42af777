# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

from tcpconform.automaton import TcpState, change_state, transition_table
from tcpconform.fsm import (
    SegmentEngine,
    process_one_segment,
    reachable_states,
    wait_for_events_states,
)
from tcpconform.harness import run_pair
from tcpconform.socket_api import SocketApi

__all__ = [
    "SegmentEngine",
    "SocketApi",
    "TcpState",
    "change_state",
    "process_one_segment",
    "reachable_states",
    "run_pair",
    "transition_table",
    "wait_for_events_states",
]
