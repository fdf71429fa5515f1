"""Histories of set operations, crashes and recoveries.

A history is a flat list of events with global sequence numbers.  Operations
are reconstructed from matching invoke/respond pairs; an invoke with no
response before the next crash is *pending* at that crash.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, TextIO

EVENT_KINDS = ("invoke", "respond", "crash", "recovery_done")


@dataclass(frozen=True)
class HistoryEvent:
    kind: str
    seq: int
    thread: int | None = None
    op: str | None = None
    key: int | None = None
    value: int | None = None
    result: bool | None = None
    recovered: tuple[int, ...] | None = None  # recovery_done only

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if "recovered" in d:
            d["recovered"] = list(d["recovered"])
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "HistoryEvent":
        d = json.loads(line)
        if "recovered" in d:
            d["recovered"] = tuple(d["recovered"])
        return cls(**d)


@dataclass(frozen=True)
class Operation:
    """One invocation, completed or pending, within one era."""

    id: int
    thread: int
    name: str
    key: int
    value: int
    invoke: int                 # sequence number
    respond: int | None         # None when pending at a crash
    result: bool | None
    era: int

    @property
    def pending(self) -> bool:
        return self.respond is None

    def __str__(self) -> str:
        res = "?" if self.pending else str(self.result).lower()
        return f"t{self.thread}:{self.name}({self.key})={res}"


class MalformedHistory(ValueError):
    pass


@dataclass
class History:
    events: list[HistoryEvent] = field(default_factory=list)

    # -- recording -------------------------------------------------------
    def _add(self, kind: str, **kw) -> HistoryEvent:
        ev = HistoryEvent(kind, len(self.events), **kw)
        self.events.append(ev)
        return ev

    def invoke(self, thread: int, op: str, key: int, value: int = 0) -> HistoryEvent:
        return self._add("invoke", thread=thread, op=op, key=key, value=value)

    def respond(self, thread: int, op: str, key: int, result: bool) -> HistoryEvent:
        return self._add("respond", thread=thread, op=op, key=key, result=bool(result))

    def crash(self) -> HistoryEvent:
        return self._add("crash")

    def recovery_done(self, recovered: Iterable[int]) -> HistoryEvent:
        return self._add("recovery_done", recovered=tuple(sorted(recovered)))

    # -- views -----------------------------------------------------------
    def __iter__(self) -> Iterator[HistoryEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def operations(self) -> list[Operation]:
        """Pair invokes with responses, checking well-formedness."""
        ops: list[Operation] = []
        open_: dict[int, HistoryEvent] = {}
        era = 0
        awaiting_recovery = False
        for ev in self.events:
            if ev.kind not in EVENT_KINDS:
                raise MalformedHistory(f"unknown event kind {ev.kind!r}")
            if awaiting_recovery and ev.kind != "recovery_done":
                raise MalformedHistory(f"event {ev.seq} between a crash and its recovery")
            if ev.kind == "invoke":
                if ev.thread in open_:
                    raise MalformedHistory(f"thread {ev.thread} invokes twice without responding")
                open_[ev.thread] = ev
            elif ev.kind == "respond":
                inv = open_.pop(ev.thread, None)
                if inv is None or inv.op != ev.op or inv.key != ev.key:
                    raise MalformedHistory(f"response {ev.seq} matches no open invocation")
                ops.append(Operation(len(ops), inv.thread, inv.op, inv.key, inv.value or 0,
                                     inv.seq, ev.seq, ev.result, era))
            elif ev.kind == "crash":
                for inv in open_.values():
                    ops.append(Operation(len(ops), inv.thread, inv.op, inv.key, inv.value or 0,
                                         inv.seq, None, None, era))
                open_.clear()
                awaiting_recovery = True
            else:
                if not awaiting_recovery:
                    raise MalformedHistory(f"recovery_done {ev.seq} without a crash")
                awaiting_recovery = False
                era += 1
        # invocations still open at the end are pending too (no crash needed)
        for inv in open_.values():
            ops.append(Operation(len(ops), inv.thread, inv.op, inv.key, inv.value or 0,
                                 inv.seq, None, None, era))
        ops.sort(key=lambda o: o.invoke)
        return [Operation(i, o.thread, o.name, o.key, o.value, o.invoke, o.respond, o.result, o.era)
                for i, o in enumerate(ops)]

    def recovered_sets(self) -> list[frozenset[int]]:
        return [frozenset(ev.recovered) for ev in self.events if ev.kind == "recovery_done"]

    def crash_count(self) -> int:
        return sum(ev.kind == "crash" for ev in self.events)

    # -- serialisation ---------------------------------------------------
    def dump_jsonl(self, sink: TextIO) -> None:
        for ev in self.events:
            sink.write(ev.to_json() + "\n")

    def to_jsonl(self) -> str:
        return "".join(ev.to_json() + "\n" for ev in self.events)

    @classmethod
    def from_jsonl(cls, text: str | TextIO) -> "History":
        lines = text.splitlines() if isinstance(text, str) else text
        return cls([HistoryEvent.from_json(l) for l in lines if l.strip()])


def apply_op(state: frozenset, name: str, key: int) -> tuple[frozenset, bool]:
    """Sequential set semantics: the new state and the expected result."""
    if name == "insert":
        return (state, False) if key in state else (state | {key}, True)
    if name == "remove":
        return (state - {key}, True) if key in state else (state, False)
    if name == "contains":
        return state, key in state
    raise ValueError(f"unknown operation {name!r}")
