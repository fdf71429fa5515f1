"""Durable lock-free sets on a simulated persistent-memory heap.

Two list algorithms, a hash set over either, an epoch-reclaiming durable-area
allocator, a crash-injecting durable-linearizability checker and a benchmark.
"""

from .alloc import Allocator, EpochClock, ThreadContext, scan_area_lists, scan_areas
from .hashmap import HashSet, fib_hash, make_structure, recover_structure
from .linkfree import LinkFreeList
from .pmem import (AllocationError, CrashPlan, IntegrityError, PersistentHeap, PersistentSnapshot,
                   PsyncStats, SnapshotError, snapshot_dump, snapshot_load)
from .soft import SoftList
from ._base import KEY_MAX, KEY_MIN, DurableSet

__version__ = "0.1.0"

__all__ = [
    "Allocator", "EpochClock", "ThreadContext", "scan_area_lists", "scan_areas",
    "HashSet", "fib_hash", "make_structure", "recover_structure",
    "LinkFreeList", "SoftList", "DurableSet", "KEY_MAX", "KEY_MIN",
    "AllocationError", "CrashPlan", "IntegrityError", "PersistentHeap", "PersistentSnapshot",
    "PsyncStats", "SnapshotError", "snapshot_dump", "snapshot_load",
]
