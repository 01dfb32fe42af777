# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""Scenario traces, written as JSON lines."""

import enum
import typing as ty

from pydantic import BaseModel, ConfigDict, Field


class TraceKind(str, enum.Enum):
    STATE_CHANGE = "StateChange"
    SEGMENT_SENT = "SegmentSent"
    SEGMENT_RECEIVED = "SegmentReceived"
    USER_CALL = "UserCall"
    TIMER_FIRED = "TimerFired"
    EVENT_RAISED = "EventRaised"
    VIOLATION = "Violation"


class TraceRecord(BaseModel):
    """One trace event. Serialized keys keep the declaration order."""

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    t: int = Field(..., ge=0, description="Virtual time of the event")
    ep: str = Field(..., description="Endpoint name")
    kind: TraceKind
    from_: ty.Optional[str] = Field(None, alias="from")
    to: ty.Optional[str] = None
    flags: ty.Optional[str] = None
    detail: ty.Dict[str, ty.Any] = Field(default_factory=dict)

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True)


class ScenarioTrace:
    def __init__(self, records: ty.Optional[ty.Iterable[TraceRecord]] = None):
        """Ordered trace of a scenario run."""
        self.records: ty.List[TraceRecord] = list(records or [])

    def __iter__(self) -> ty.Iterator[TraceRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScenarioTrace):
            return NotImplemented
        return self.records == other.records

    def add(self, t: int, ep: str, kind: TraceKind,
            from_: ty.Optional[str] = None, to: ty.Optional[str] = None,
            flags: ty.Optional[str] = None,
            detail: ty.Optional[ty.Dict[str, ty.Any]] = None) -> TraceRecord:
        record = TraceRecord(t=t, ep=ep, kind=kind, from_=from_, to=to,
                             flags=flags, detail=detail or {})
        self.records.append(record)
        return record

    def filter(self, kind: ty.Optional[TraceKind] = None,
               ep: ty.Optional[str] = None) -> ty.List[TraceRecord]:
        return [r for r in self.records
                if (kind is None or r.kind == kind)
                and (ep is None or r.ep == ep)]

    def segments_sent(self, ep: ty.Optional[str] = None) -> ty.List[str]:
        """Flag labels of the segments put on the wire, in order."""
        return [r.flags for r in self.filter(TraceKind.SEGMENT_SENT, ep)
                if not r.detail.get("dropped")]

    def state_path(self, ep: str,
                   descriptor: ty.Optional[int] = None) -> ty.List[str]:
        """States an endpoint went through, starting with the first
        recorded source state."""
        changes = [r for r in self.filter(TraceKind.STATE_CHANGE, ep)
                   if descriptor is None or r.detail.get("sd") == descriptor]
        if not changes:
            return []
        return [changes[0].from_] + [r.to for r in changes]

    def violations(self) -> ty.List[TraceRecord]:
        return self.filter(TraceKind.VIOLATION)

    def user_calls(self) -> ty.Dict[ty.Tuple[str, int], ty.List[TraceRecord]]:
        """User calls grouped per (endpoint, descriptor)."""
        calls: ty.Dict[ty.Tuple[str, int], ty.List[TraceRecord]] = {}
        for record in self.filter(TraceKind.USER_CALL):
            key = (record.ep, record.detail.get("sd"))
            calls.setdefault(key, []).append(record)
        return calls

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def write(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "ScenarioTrace":
        return cls(TraceRecord.model_validate_json(line)
                   for line in text.splitlines() if line.strip())
