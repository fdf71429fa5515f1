"""Scripted crash scenarios run under a deterministic cooperative scheduler.

Scenario text format, one directive per line (``#`` starts a comment)::

    seed 7
    variant soft-list          # lf-list, soft-list, lf-hash or soft-hash
    eviction adversarial       # none, adversarial or random:<rate>
    keys 0 1 2 3
    buckets 4                  # hash variants only
    area_slots 8
    phase crash=23             # crash after 23 scheduler steps
    op 0 insert 1 10           # thread, operation, key[, value]
    op 1 remove 1
    phase                      # next phase runs on the recovered set
    op 0 contains 1

Each phase starts one generator per thread and advances a randomly chosen one
by a single step at a time, seeded from the scenario seed and the phase index.
A phase with ``crash=N`` crashes the heap after N steps (or when every thread
has finished, whichever comes first), recovers, and probes every key with
``contains`` to observe the recovered set.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from ..hashmap import make_structure, recover_structure, structure_variant
from ..pmem import CrashPlan, PersistentHeap, PersistentSnapshot
from .history import History

EVICTIONS = ("none", "adversarial")


@dataclass(frozen=True)
class ScriptOp:
    thread: int
    name: str
    key: int
    value: int = 0


@dataclass(frozen=True)
class Phase:
    ops: tuple[ScriptOp, ...]
    crash: int | None = None

    def scripts(self) -> dict[int, list[ScriptOp]]:
        out: dict[int, list[ScriptOp]] = {}
        for op in self.ops:
            out.setdefault(op.thread, []).append(op)
        return dict(sorted(out.items()))


@dataclass(frozen=True)
class Scenario:
    seed: int
    variant: str
    eviction: str
    keys: tuple[int, ...]
    phases: tuple[Phase, ...]
    buckets: int = 4
    area_slots: int = 8

    def plan(self) -> CrashPlan:
        if self.eviction == "none":
            return CrashPlan(self.seed)
        if self.eviction == "adversarial":
            return CrashPlan.adversarial(self.seed)
        if self.eviction.startswith("random:"):
            return CrashPlan.random_rate(float(self.eviction.split(":", 1)[1]), self.seed)
        raise ValueError(f"unknown eviction policy {self.eviction!r}")

    def op_count(self) -> int:
        return sum(len(p.ops) for p in self.phases)


def format_scenario(sc: Scenario) -> str:
    lines = [f"seed {sc.seed}", f"variant {sc.variant}", f"eviction {sc.eviction}",
             "keys " + " ".join(map(str, sc.keys)), f"buckets {sc.buckets}", f"area_slots {sc.area_slots}"]
    for ph in sc.phases:
        lines.append("phase" if ph.crash is None else f"phase crash={ph.crash}")
        for op in ph.ops:
            lines.append(f"op {op.thread} {op.name} {op.key}" + (f" {op.value}" if op.value else ""))
    return "\n".join(lines) + "\n"


def parse_scenario(text: str) -> Scenario:
    fields: dict = {"buckets": 4, "area_slots": 8}
    phases: list[Phase] = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *args = line.split()
        try:
            if word in ("seed", "buckets", "area_slots"):
                fields[word] = int(args[0])
            elif word in ("variant", "eviction"):
                fields[word] = args[0]
            elif word == "keys":
                fields["keys"] = tuple(int(a) for a in args)
            elif word == "phase":
                crash = None
                for a in args:
                    k, _, v = a.partition("=")
                    if k != "crash":
                        raise ValueError(f"unknown phase option {k!r}")
                    crash = int(v)
                phases.append(Phase((), crash))
            elif word == "op":
                if not phases:
                    phases.append(Phase(()))
                if args[1] not in ("insert", "remove", "contains"):
                    raise ValueError(f"unknown operation {args[1]!r}")
                op = ScriptOp(int(args[0]), args[1], int(args[2]), int(args[3]) if len(args) > 3 else 0)
                phases[-1] = replace(phases[-1], ops=phases[-1].ops + (op,))
            else:
                raise ValueError(f"unknown directive {word!r}")
        except (IndexError, ValueError) as e:
            raise ValueError(f"scenario line {n}: {e}") from None
    for req in ("seed", "variant", "eviction", "keys"):
        if req not in fields:
            raise ValueError(f"scenario lacks a {req!r} line")
    structure_variant(fields["variant"])
    sc = Scenario(phases=tuple(phases), **fields)
    sc.plan()
    return sc


@dataclass
class ScenarioRun:
    scenario: Scenario
    history: History
    recovered: list[frozenset] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)          # steps executed per phase
    traces: dict[int, dict] = field(default_factory=dict)   # invoke seq -> operation trace
    flush_logs: list[list] = field(default_factory=list)    # one per era
    snapshots: list[PersistentSnapshot] = field(default_factory=list)
    recovery_psyncs: list[int] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    structure: object = None


def _thread(structure, ctx, script, history: History, traces: dict, current: dict):
    for op in script:
        ev = history.invoke(op.thread, op.name, op.key, op.value)
        current[op.thread] = (ev.seq, ctx)
        result = yield from structure.operation(ctx, op.name, op.key, op.value)
        history.respond(op.thread, op.name, op.key, result)
        traces[ev.seq] = dict(ctx.trace)
        del current[op.thread]
        yield


def run_phase(structure, phase: Phase, rng: random.Random, history: History, traces: dict,
              crash_at: int | None) -> tuple[int, dict]:
    """Step the phase's threads; returns (steps executed, still-open operations)."""
    alloc = structure.allocator
    current: dict = {}
    gens = {}
    ctxs = []
    for tid, script in phase.scripts().items():
        ctx = alloc.register(tid)
        ctxs.append(ctx)
        gens[tid] = _thread(structure, ctx, script, history, traces, current)
    steps = 0
    while gens and (crash_at is None or steps < crash_at):
        tid = rng.choice(sorted(gens))
        steps += 1
        try:
            next(gens[tid])
        except StopIteration:
            del gens[tid]
    for ctx in ctxs:
        alloc.release(ctx)
    return steps, current


def _probe(structure, keys) -> frozenset:
    ctx = structure.allocator.register()
    try:
        return frozenset(k for k in keys if structure.contains(k, ctx))
    finally:
        structure.allocator.release(ctx)


def run_scenario(sc: Scenario, audit: bool = True, uncrash: int | None = None) -> ScenarioRun:
    """Execute a scenario; ``uncrash`` disables the crash of that phase (for step counting)."""
    plan = sc.plan()
    heap = PersistentHeap(plan=plan, track_history=True)
    kw = dict(area_slots=sc.area_slots)
    structure = make_structure(sc.variant, sc.buckets, heap=heap, audit=audit, **kw)
    history = History()
    run = ScenarioRun(sc, history)
    for i, phase in enumerate(sc.phases):
        rng = random.Random(f"{sc.seed}:{i}")
        crash_at = None if i == uncrash else phase.crash
        steps, pending = run_phase(structure, phase, rng, history, run.traces, crash_at)
        run.steps.append(steps)
        if crash_at is None:
            continue
        for seq, ctx in pending.values():
            run.traces[seq] = dict(ctx.trace)
        # mid-operation states are not quiescent; only the audit log applies then
        run.violations.extend(structure.violations if pending else structure.check_invariants())
        run.flush_logs.append(structure.heap.flush_log)
        snap = structure.crash(plan)
        history.crash()
        run.snapshots.append(snap)
        structure = recover_structure(sc.variant, snap, sc.buckets, plan=plan, track_history=True,
                                      audit=audit, **kw)
        run.recovery_psyncs.append(structure.recovery_stats.psync_count)
        run.violations.extend(structure.check_invariants())
        recovered = _probe(structure, sc.keys)
        run.recovered.append(recovered)
        history.recovery_done(recovered)
    run.flush_logs.append(structure.heap.flush_log)
    run.violations.extend(structure.check_invariants())
    run.structure = structure
    return run


inject_crash = run_scenario


def count_steps(sc: Scenario, phase: int) -> int:
    """Steps the given phase takes when run to completion without crashing."""
    return run_scenario(replace(sc, phases=sc.phases[:phase + 1]), audit=False, uncrash=phase).steps[phase]


def random_scenario(seed: int, variant: str = "lf-list", eviction: str = "adversarial",
                    threads: tuple[int, int] = (2, 4), max_ops: int = 12, key_range: int = 6,
                    crashes: tuple[int, int] = (1, 2), buckets: int = 4, area_slots: int = 8) -> Scenario:
    """A random scenario whose crash points are drawn uniformly over each phase's steps."""
    rng = random.Random(seed)
    nthreads = rng.randint(*threads)
    nkeys = rng.randint(2, key_range)
    keys = tuple(range(nkeys))
    ncrash = rng.randint(*crashes)
    total = rng.randint(max(nthreads, 2), max_ops)
    # split the op budget over the crashed phases and one final phase
    cuts = sorted(rng.sample(range(1, total), min(ncrash, total - 1)))
    sizes = [b - a for a, b in zip([0] + cuts, cuts + [total])]
    names = ("insert", "insert", "remove", "remove", "contains")
    phases = []
    for size in sizes:
        ops = tuple(ScriptOp(rng.randrange(nthreads), rng.choice(names), rng.choice(keys),
                             rng.randrange(1, 100)) for _ in range(size))
        phases.append(Phase(ops))
    sc = Scenario(seed, variant, eviction, keys, tuple(phases), buckets, area_slots)
    crash_phases = 0 if ncrash == 0 else max(1, len(phases) - 1)
    for i in range(crash_phases):
        n = count_steps(sc, i)
        ph = list(sc.phases)
        ph[i] = replace(ph[i], crash=rng.randint(0, n))
        sc = replace(sc, phases=tuple(ph))
    return sc
