"""Brute-force linearizability and durable-linearizability checking.

The search is depth-first over linearization prefixes, memoised on
(set of linearized operations, abstract set state).  An operation may be
linearized next only when every operation that responded before it was invoked
is already linearized.  Pending operations may be linearized with any result or
left out.

For durable linearizability the history is cut at its crashes.  Because the
recovered key set is observed in full, each era can be checked on its own: it
starts from the previous recovered set and its linearization must end in the set
recovered after its crash.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .history import History, Operation, apply_op

DEFAULT_BUDGET = 10 ** 7


class BudgetExceeded(Exception):
    pass


@dataclass
class Verdict:
    linearizable: bool | None           # None means inconclusive
    witness: list[list[Operation]] = field(default_factory=list)   # one order per era
    omitted: list[Operation] = field(default_factory=list)         # pending ops left out
    window: list[Operation] = field(default_factory=list)          # minimal failing prefix
    era: int | None = None
    states: int = 0
    reason: str = ""

    @property
    def inconclusive(self) -> bool:
        return self.linearizable is None

    def __bool__(self) -> bool:
        return self.linearizable is True

    def describe(self) -> str:
        if self.linearizable:
            return " | ".join(" ".join(map(str, w)) for w in self.witness)
        if self.inconclusive:
            return f"inconclusive: {self.reason}"
        return f"era {self.era}: {self.reason}; window: " + " ".join(map(str, self.window))


class _Search:
    def __init__(self, budget: int):
        self.budget = budget
        self.states = 0

    def era(self, ops: Sequence[Operation], start: frozenset, target: frozenset | None,
            require: set[int] = frozenset(), forbid: set[int] = frozenset()) -> list[int] | None:
        """Indices into ``ops`` of a valid linearization, or None."""
        n = len(ops)
        pred = [0] * n
        for i, a in enumerate(ops):
            for j, b in enumerate(ops):
                if b.respond is not None and b.respond < a.invoke:
                    pred[i] |= 1 << j
        must = 0
        allowed = 0
        for i, o in enumerate(ops):
            if not o.pending or o.id in require:
                must |= 1 << i
            if o.id not in forbid:
                allowed |= 1 << i
        if must & ~allowed:
            return None
        seen: set = set()

        def dfs(mask: int, state: frozenset):
            if mask & must == must and (target is None or state == target):
                return []
            memo = (mask, state)
            if memo in seen:
                return None
            seen.add(memo)
            self.states += 1
            if self.states > self.budget:
                raise BudgetExceeded
            for i in range(n):
                bit = 1 << i
                if mask & bit or not allowed & bit or pred[i] & ~mask:
                    continue
                o = ops[i]
                new, res = apply_op(state, o.name, o.key)
                if not o.pending and res != o.result:
                    continue
                rest = dfs(mask | bit, new)
                if rest is not None:
                    return [i] + rest
            return None

        limit = sys.getrecursionlimit()
        if n + 50 > limit:
            sys.setrecursionlimit(n + 100)
        return dfs(0, frozenset(start))


def replay(order: Sequence[Operation], start: frozenset, target: frozenset | None) -> str | None:
    """Re-execute a witness sequentially; returns a complaint or None."""
    state = frozenset(start)
    for o in order:
        state, res = apply_op(state, o.name, o.key)
        if not o.pending and res != o.result:
            return f"{o} replays as {str(res).lower()}"
    if target is not None and state != target:
        return f"replay ends in {sorted(state)}, recovered {sorted(target)}"
    return None


def _failing_window(search: _Search, ops: Sequence[Operation], start: frozenset) -> list[Operation]:
    """Shortest prefix (cut after some response) that already admits no linearization."""
    cuts = sorted(o.respond for o in ops if o.respond is not None)
    for cut in cuts:
        prefix = []
        for o in ops:
            if o.invoke > cut:
                continue
            if o.respond is not None and o.respond > cut:
                o = Operation(o.id, o.thread, o.name, o.key, o.value, o.invoke, None, None, o.era)
            prefix.append(o)
        if search.era(prefix, start, None) is None:
            return [next(x for x in ops if x.id == p.id) for p in prefix]
    return list(ops)


def _eras(history: History) -> tuple[list[list[Operation]], list[frozenset]]:
    ops = history.operations()
    targets = history.recovered_sets()
    eras: list[list[Operation]] = [[] for _ in range(len(targets) + 1)]
    for o in ops:
        eras[o.era].append(o)
    return eras, targets


def check_durable(history: History, initial: Iterable[int] = (), budget: int = DEFAULT_BUDGET,
                  require: Iterable[int] = (), forbid: Iterable[int] = ()) -> Verdict:
    """Durable linearizability of a history with crashes and observed recovered sets.

    ``require`` and ``forbid`` name pending operation ids that the witness must
    include or leave out.
    """
    eras, targets = _eras(history)
    require, forbid = set(require), set(forbid)
    search = _Search(budget)
    start = frozenset(initial)
    verdict = Verdict(True)
    try:
        for e, ops in enumerate(eras):
            target = targets[e] if e < len(targets) else None
            idx = search.era(ops, start, target, require, forbid)
            if idx is None:
                if search.era(ops, start, None) is None:
                    window = _failing_window(search, ops, start)
                    reason = "no linearization of the completed operations"
                else:
                    window = list(ops)
                    reason = f"no linearization ends in recovered set {sorted(target)}"
                return Verdict(False, window=window, era=e, states=search.states, reason=reason)
            order = [ops[i] for i in idx]
            complaint = replay(order, start, target)
            if complaint:
                return Verdict(False, era=e, states=search.states, reason=f"witness failed replay: {complaint}")
            verdict.witness.append(order)
            chosen = {o.id for o in order}
            verdict.omitted.extend(o for o in ops if o.pending and o.id not in chosen)
            if target is not None:
                start = target
    except BudgetExceeded:
        return Verdict(None, states=search.states, reason=f"search budget of {budget} states exhausted")
    verdict.states = search.states
    return verdict


def check_linearizable(history: History, initial: Iterable[int] = (), budget: int = DEFAULT_BUDGET) -> Verdict:
    """Plain linearizability; the history must not contain crashes."""
    if history.crash_count():
        raise ValueError("history contains crashes; use check_durable")
    return check_durable(history, initial, budget)
