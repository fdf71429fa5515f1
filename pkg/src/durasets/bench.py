"""Throughput and persistence-cost benchmark over the four set structures.

Each iteration builds a fresh structure, fills it with half of the key range,
then runs worker threads that draw uniform keys and an op mix of
``read_pct`` contains and an even split of inserts and removes.  A run is either
time-bound (``duration``) or count-bound (``ops_per_thread``); only the latter
gives reproducible per-thread op counts.

Throughput here measures the simulator under the GIL and says nothing about
real hardware; the psync and fence counts are exact.

CSV columns, in order::

    structure threads duration key_range read_pct seed iteration
    ops seconds mops insert_ops remove_ops contains_ops insert_ok remove_ok contains_ok
    insert_psyncs remove_psyncs contains_psyncs alloc_psyncs psyncs_per_op
    fences max_insert_psyncs max_remove_psyncs max_contains_psyncs thread_ops
"""

from __future__ import annotations

import argparse
import csv
import sys
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, TextIO

import numpy as np
from scipy import stats as sstats

from .hashmap import STRUCTURES, make_structure

OPS = ("insert", "remove", "contains")
CHUNK = 4096

CSV_COLUMNS = (
    "structure", "threads", "duration", "key_range", "read_pct", "seed", "iteration",
    "ops", "seconds", "mops", "insert_ops", "remove_ops", "contains_ops",
    "insert_ok", "remove_ok", "contains_ok",
    "insert_psyncs", "remove_psyncs", "contains_psyncs", "alloc_psyncs", "psyncs_per_op",
    "fences", "max_insert_psyncs", "max_remove_psyncs", "max_contains_psyncs", "thread_ops",
)


@dataclass(frozen=True)
class WorkloadSpec:
    structure: str = "soft-list"
    threads: int = 1
    duration: float = 1.0
    key_range: int = 256
    read_pct: float = 90.0
    seed: int = 0
    iterations: int = 1
    ops_per_thread: int | None = None
    bucket_count: int | None = None   # hash structures; default gives load factor 1
    warmup: bool = True               # one contains sweep over the range before timing

    def validate(self) -> None:
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {', '.join(STRUCTURES)}")
        if not 1 <= self.threads <= 64:
            raise ValueError("threads must be between 1 and 64")
        if self.ops_per_thread is None and not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.ops_per_thread is not None and self.ops_per_thread < 1:
            raise ValueError("ops_per_thread must be positive")
        if self.key_range < 2:
            raise ValueError("key range must be at least 2")
        if not 0 <= self.read_pct <= 100:
            raise ValueError("read percentage must be within [0, 100]")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")

    def buckets(self) -> int:
        return self.bucket_count or max(1, self.key_range // 2)


@dataclass
class StressReport:
    """What the worker threads did, with per-operation psync accounting."""

    thread_ops: list[int]
    elapsed: float
    ops_by_type: Counter = field(default_factory=Counter)
    ok_by_type: Counter = field(default_factory=Counter)     # calls that returned true
    psyncs_by_type: Counter = field(default_factory=Counter)
    max_psyncs: Counter = field(default_factory=Counter)
    alloc_psyncs: int = 0
    fences: int = 0
    budget_violations: list[str] = field(default_factory=list)
    sweep_violations: list[str] = field(default_factory=list)
    sweeps: int = 0
    errors: list[BaseException] = field(default_factory=list)

    @property
    def ops(self) -> int:
        return sum(self.thread_ops)


@dataclass
class IterationResult:
    spec: WorkloadSpec
    iteration: int
    report: StressReport

    @property
    def mops(self) -> float:
        return self.report.ops / self.report.elapsed / 1e6 if self.report.elapsed > 0 else 0.0

    def psync_per_op(self, op: str | None = None, successful: bool = False) -> float:
        """Mean psyncs per call; ``successful`` divides by calls that returned true."""
        r = self.report
        counts = r.ok_by_type if successful else r.ops_by_type
        if op is None:
            n = sum(counts.values())
            return (sum(r.psyncs_by_type.values()) / n) if n else 0.0
        n = counts[op]
        return r.psyncs_by_type[op] / n if n else 0.0

    def row(self) -> dict:
        r, s = self.report, self.spec
        return {
            "structure": s.structure, "threads": s.threads, "duration": s.duration,
            "key_range": s.key_range, "read_pct": s.read_pct, "seed": s.seed, "iteration": self.iteration,
            "ops": r.ops, "seconds": f"{r.elapsed:.6f}", "mops": f"{self.mops:.6f}",
            **{f"{op}_ops": r.ops_by_type[op] for op in OPS},
            **{f"{op}_ok": r.ok_by_type[op] for op in OPS},
            **{f"{op}_psyncs": r.psyncs_by_type[op] for op in OPS},
            "alloc_psyncs": r.alloc_psyncs, "psyncs_per_op": f"{self.psync_per_op():.6f}",
            "fences": r.fences, **{f"max_{op}_psyncs": r.max_psyncs[op] for op in OPS},
            "thread_ops": ";".join(map(str, r.thread_ops)),
        }


@dataclass
class BenchResult:
    spec: WorkloadSpec
    iterations: list[IterationResult]

    @property
    def mops(self) -> float:
        return float(np.mean([it.mops for it in self.iterations]))

    def mops_ci(self, level: float = 0.99) -> tuple[float, float]:
        xs = np.array([it.mops for it in self.iterations])
        if len(xs) < 2 or np.all(xs == xs[0]):
            return float(xs.mean()), float(xs.mean())
        lo, hi = sstats.t.interval(level, len(xs) - 1, loc=xs.mean(), scale=sstats.sem(xs))
        return float(lo), float(hi)

    def psync_per_op(self, op: str | None = None, successful: bool = False) -> float:
        num = den = 0
        for it in self.iterations:
            r = it.report
            counts = r.ok_by_type if successful else r.ops_by_type
            if op is None:
                num += sum(r.psyncs_by_type.values())
                den += sum(counts.values())
            else:
                num += r.psyncs_by_type[op]
                den += counts[op]
        return num / den if den else 0.0

    @property
    def fences(self) -> int:
        return sum(it.report.fences for it in self.iterations)

    def summary(self) -> str:
        lo, hi = self.mops_ci()
        per = ", ".join(f"{op} {self.psync_per_op(op):.3f}" for op in OPS)
        return (f"{self.spec.structure} threads={self.spec.threads}: {self.mops:.4f} Mops/s "
                f"(99% CI {lo:.4f}..{hi:.4f}); psyncs per op {self.psync_per_op():.3f} ({per})")


def op_stream(rng: np.random.Generator, n: int, key_range: int, read_pct: float):
    """n (op index, key) pairs: reads with probability read_pct, updates split evenly."""
    u = rng.random(n)
    keys = rng.integers(0, key_range, n)
    reads = u < read_pct / 100.0
    upd = np.where(rng.random(n) < 0.5, 0, 1)
    kinds = np.where(reads, 2, upd)
    return kinds.tolist(), keys.tolist()


def build(spec: WorkloadSpec, audit: bool = False, **alloc_kwargs):
    """A fresh structure prefilled with key_range/2 distinct keys (and warmed up)."""
    s = make_structure(spec.structure, spec.buckets(), audit=audit, **alloc_kwargs)
    rng = np.random.default_rng([spec.seed, 0x5EED])
    ctx = s.allocator.register()
    try:
        for k in rng.choice(spec.key_range, spec.key_range // 2, replace=False).tolist():
            s.insert(k, k, ctx)
        if spec.warmup:
            for k in range(spec.key_range):
                s.contains(k, ctx)
    finally:
        s.allocator.release(ctx)
    return s


def stress(structure, threads: int, key_range: int, read_pct: float, seed: int = 0,
           ops_per_thread: int | None = None, duration: float | None = None,
           sweep_every: int | None = None, check: Callable[[], list[str]] | None = None,
           psync_budget: dict[str, int] | None = None, switch_interval: float | None = 1e-5) -> StressReport:
    """Run worker threads against ``structure``.

    With ``sweep_every`` (count-bound runs only) all threads meet at a barrier
    after each ``sweep_every`` operations in total and ``check`` runs on the
    quiescent structure.  ``psync_budget`` maps an op name to the most psyncs
    one call may issue; overruns are reported, not raised.
    """
    if ops_per_thread is None and duration is None:
        raise ValueError("need ops_per_thread or duration")
    streams = np.random.SeedSequence(seed).spawn(threads)
    thread_ops = [0] * threads
    per_thread = [dict(ops=Counter(), ok=Counter(), psyncs=Counter(), max=Counter(), over=[])
                  for _ in range(threads)]
    report = StressReport(thread_ops, 0.0)
    stop = threading.Event()
    lock = threading.Lock()

    def sweep():
        report.sweeps += 1
        if check is not None:
            report.sweep_violations.extend(check())

    batch = None
    barrier = None
    if sweep_every and ops_per_thread is not None:
        batch = max(1, sweep_every // threads)
        barrier = threading.Barrier(threads, action=sweep)
    contexts = [structure.allocator.register() for _ in range(threads)]

    def worker(i: int):
        ctx = contexts[i]
        mine = per_thread[i]
        rng = np.random.default_rng(streams[i])
        st = ctx.stats
        done = 0
        try:
            while not stop.is_set():
                n = CHUNK if ops_per_thread is None else min(CHUNK, ops_per_thread - done)
                if n <= 0:
                    break
                kinds, keys = op_stream(rng, n, key_range, read_pct)
                for kind, key in zip(kinds, keys):
                    name = OPS[kind]
                    p0, a0 = st.psync_count, st.psyncs_by_tag["alloc"]
                    if kind == 0:
                        res = structure.insert(key, key, ctx)
                    elif kind == 1:
                        res = structure.remove(key, ctx)
                    else:
                        res = structure.contains(key, ctx)
                    d = st.psync_count - p0 - (st.psyncs_by_tag["alloc"] - a0)
                    mine["ops"][name] += 1
                    mine["ok"][name] += res
                    mine["psyncs"][name] += d
                    if d > mine["max"][name]:
                        mine["max"][name] = d
                    if psync_budget is not None and d > psync_budget.get(name, d):
                        mine["over"].append(f"thread {i}: {name}({key}) issued {d} psyncs")
                    done += 1
                    thread_ops[i] = done
                    if barrier is not None and done % batch == 0:
                        barrier.wait()
                    if stop.is_set():
                        break
        except threading.BrokenBarrierError:
            pass
        except BaseException as e:  # surfaced through the report
            with lock:
                report.errors.append(e)
            stop.set()
            if barrier is not None:
                barrier.abort()

    old = sys.getswitchinterval()
    if switch_interval:
        sys.setswitchinterval(switch_interval)
    workers = [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(threads)]
    t0 = time.perf_counter()
    try:
        for w in workers:
            w.start()
        if duration is not None and ops_per_thread is None:
            stop.wait(duration)
            stop.set()
        for w in workers:
            w.join()
    finally:
        report.elapsed = time.perf_counter() - t0
        sys.setswitchinterval(old)
    if barrier is not None and not report.errors:
        sweep()
    for i, ctx in enumerate(contexts):
        m = per_thread[i]
        report.ops_by_type.update(m["ops"])
        report.ok_by_type.update(m["ok"])
        report.psyncs_by_type.update(m["psyncs"])
        for op, v in m["max"].items():
            report.max_psyncs[op] = max(report.max_psyncs[op], v)
        report.budget_violations.extend(m["over"])
        report.alloc_psyncs += ctx.stats.psyncs_by_tag["alloc"]
        report.fences += ctx.stats.fence_count
        structure.allocator.release(ctx)
    return report


def run(spec: WorkloadSpec, psync_budget: dict[str, int] | None = None) -> BenchResult:
    spec.validate()
    out = []
    for it in range(spec.iterations):
        s = build(spec)
        report = stress(s, spec.threads, spec.key_range, spec.read_pct, seed=spec.seed * 1000 + it,
                        ops_per_thread=spec.ops_per_thread,
                        duration=None if spec.ops_per_thread else spec.duration,
                        psync_budget=psync_budget)
        if report.errors:
            raise report.errors[0]
        out.append(IterationResult(spec, it, report))
    return BenchResult(spec, out)


def emit_csv(results: Iterable[BenchResult], sink: TextIO) -> None:
    w = csv.DictWriter(sink, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for res in results:
        for it in res.iterations:
            w.writerow(it.row())


def read_csv(source: TextIO) -> list[dict]:
    return list(csv.DictReader(source))


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="durasets-bench", description=__doc__.split("\n\n")[0])
    p.add_argument("--structure", default="soft-list", help=f"one of {', '.join(STRUCTURES)}")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--duration", type=float, default=1.0, help="seconds per iteration")
    p.add_argument("--range", dest="key_range", type=int, default=256, help="key range")
    p.add_argument("--reads", dest="read_pct", type=float, default=90.0, help="percentage of contains")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--ops-per-thread", type=int, default=None,
                   help="run a fixed number of operations per thread instead of a duration")
    p.add_argument("--out", default=None, help="CSV file (default: standard output)")
    return p


def main(argv: list[str] | None = None) -> int:
    p = _parser()
    a = p.parse_args(argv)
    spec = WorkloadSpec(a.structure, a.threads, a.duration, a.key_range, a.read_pct, a.seed,
                        a.iterations, a.ops_per_thread)
    try:
        spec.validate()
    except ValueError as e:
        p.error(str(e))
    res = run(spec)
    if a.out:
        with open(a.out, "w", newline="") as f:
            emit_csv([res], f)
        print(res.summary())
    else:
        emit_csv([res], sys.stdout)
        print(res.summary(), file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
