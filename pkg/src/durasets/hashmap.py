"""Hash set: a fixed table of buckets, each bucket one durable list.

All buckets share one allocator and one set of durable areas, so recovery is a
single area scan whose survivors are re-hashed into a fresh table of any size.
"""

from __future__ import annotations

import numpy as np

from .linkfree import LinkFreeList
from .soft import SoftList
from ._base import DurableSet

FIB_MULTIPLIER = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1

VARIANTS: dict[str, type[DurableSet]] = {"link-free": LinkFreeList, "soft": SoftList}


def table_bits(bucket_count: int) -> int:
    """log2 of the table size: bucket_count rounded up to a power of two."""
    if bucket_count < 1:
        raise ValueError("bucket_count must be positive")
    return (bucket_count - 1).bit_length()


def fib_hash(key: int, bits: int) -> int:
    """Multiplicative (Fibonacci) hash of a signed 64-bit key into ``bits`` bits."""
    if bits == 0:
        return 0
    return ((key * FIB_MULTIPLIER) & _MASK64) >> (64 - bits)


def fib_hash_array(keys, bits: int) -> np.ndarray:
    """Vectorised fib_hash for an int64 array."""
    k = np.asarray(keys, dtype=np.int64).view(np.uint64)
    if bits == 0:
        return np.zeros(k.shape, dtype=np.uint64)
    return (k * np.uint64(FIB_MULTIPLIER)) >> np.uint64(64 - bits)


def variant_class(variant: str) -> type[DurableSet]:
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown list variant {variant!r}; expected one of {sorted(VARIANTS)}") from None


class HashSet:
    """Durable hash set over link-free or SOFT buckets.

    ``bucket_count`` is rounded up to a power of two.  Extra keyword arguments
    go to the allocator.
    """

    def __init__(self, variant: str = "link-free", bucket_count: int = 1024, heap=None,
                 allocator=None, audit: bool = False, _impl: DurableSet | None = None, **alloc_kwargs):
        self.variant = variant
        self.bits = table_bits(bucket_count)
        self.bucket_count = 1 << self.bits
        if _impl is None:
            _impl = variant_class(variant)(heap, allocator, bucket_count=self.bucket_count,
                                           route=self.bucket_of, audit=audit, **alloc_kwargs)
        self.impl = _impl
        self.heap = _impl.heap
        self.allocator = _impl.allocator

    def bucket_of(self, key: int) -> int:
        return fib_hash(key, self.bits)

    def insert(self, key: int, value: int = 0, ctx=None) -> bool:
        return self.impl.insert(key, value, ctx)

    def remove(self, key: int, ctx=None) -> bool:
        return self.impl.remove(key, ctx)

    def contains(self, key: int, ctx=None) -> bool:
        return self.impl.contains(key, ctx)

    def __contains__(self, key: int) -> bool:
        return self.impl.contains(key)

    def operation(self, ctx, name: str, key: int, value: int = 0):
        return self.impl.operation(ctx, name, key, value)

    def context(self):
        return self.impl.context()

    def release_context(self) -> None:
        self.impl.release_context()

    def items(self) -> list[tuple[int, int]]:
        return self.impl.items()

    def keys(self) -> list[int]:
        return self.impl.keys()

    def __len__(self) -> int:
        return len(self.impl)

    def bucket_sizes(self) -> list[int]:
        return [len(self.impl.walk(h)) for h in self.impl.heads()]

    def check_invariants(self) -> list[str]:
        return self.impl.check_invariants()

    @property
    def recovery_stats(self):
        return self.impl.recovery_stats

    @property
    def violations(self) -> list[str]:
        return self.impl.violations

    def crash(self, plan=None):
        return self.impl.crash(plan)

    @classmethod
    def recover(cls, snapshot, variant: str = "link-free", bucket_count: int = 1024, *,
                plan=None, track_history: bool = False, audit: bool = False, **alloc_kwargs) -> "HashSet":
        bits = table_bits(bucket_count)
        impl = variant_class(variant).recover(snapshot, bucket_count=1 << bits,
                                              route=lambda k: fib_hash(k, bits), plan=plan,
                                              track_history=track_history, audit=audit, **alloc_kwargs)
        return cls(variant, bucket_count, _impl=impl)

    def __repr__(self) -> str:
        return f"<HashSet {self.variant} buckets={self.bucket_count}>"


STRUCTURES = ("lf-list", "soft-list", "lf-hash", "soft-hash")
_STRUCTURE_VARIANT = {"lf-list": "link-free", "soft-list": "soft", "lf-hash": "link-free", "soft-hash": "soft",
                      "link-free": "link-free", "soft": "soft"}


def structure_variant(structure: str) -> tuple[str, bool]:
    """(list variant, is_hash) for a structure name."""
    try:
        return _STRUCTURE_VARIANT[structure], structure.endswith("-hash")
    except KeyError:
        raise ValueError(f"unknown structure {structure!r}; expected one of {STRUCTURES}") from None


def make_structure(structure: str, bucket_count: int = 1024, heap=None, audit: bool = False,
                   **alloc_kwargs):
    """A fresh set: ``lf-list``, ``soft-list``, ``lf-hash`` or ``soft-hash``."""
    variant, is_hash = structure_variant(structure)
    if is_hash:
        return HashSet(variant, bucket_count, heap=heap, audit=audit, **alloc_kwargs)
    return variant_class(variant)(heap, audit=audit, **alloc_kwargs)


def recover_structure(structure: str, snapshot, bucket_count: int = 1024, **kwargs):
    variant, is_hash = structure_variant(structure)
    if is_hash:
        return HashSet.recover(snapshot, variant, bucket_count, **kwargs)
    return variant_class(variant).recover(snapshot, **kwargs)
