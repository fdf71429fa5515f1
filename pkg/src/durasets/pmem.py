"""Simulated persistent memory.

Every durable region keeps two byte images per cache line: the volatile image
that running threads read and write, and the persistent image that survives a
crash.  A line only reaches the persistent image through a write-back, which is
always a whole-line copy of the volatile image at one instant:

* ``psync`` writes back every line of a slot (explicit flush + fence),
* ``random_rate`` eviction may write a line back right after any store,
* ``adversarial_at_crash`` lets every dirty line advance, at crash time, to any
  whole-line snapshot it held since its last write-back.

Addresses are plain integers: ``region_id << 32 | byte_offset``.  Slots are
line aligned, so the low bits of a slot address are free for tags.
"""

from __future__ import annotations

import io
import random
import struct
import threading
import zlib
from collections import Counter
from dataclasses import dataclass, field
from os import PathLike
from typing import BinaryIO, Iterable

LINE_SIZE = 64
OFFSET_BITS = 32
OFFSET_MASK = (1 << OFFSET_BITS) - 1

EVICTION_POLICIES = ("none", "random_rate", "adversarial_at_crash")

SNAPSHOT_MAGIC = b"DURASNAP"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<8sHHIII")  # magic, version, reserved, line size, next region id, region count
_REGION_HEADER = struct.Struct("<IIIQ")  # id, slot size, slot count, byte length
_TRAILER = struct.Struct("<I")  # crc32 of everything before it


class AllocationError(MemoryError):
    """Raised when a region, area or slot cannot be provided."""


class IntegrityError(RuntimeError):
    """Raised when persistent content violates a structural invariant."""


class SnapshotError(ValueError):
    """Raised when a snapshot file cannot be decoded."""


class Field:
    """A fixed-offset, fixed-format field inside a slot."""

    __slots__ = ("name", "offset", "st", "size")

    def __init__(self, name: str, offset: int, fmt: str):
        self.name = name
        self.offset = offset
        self.st = struct.Struct(fmt)
        self.size = self.st.size

    def unpack(self, image, base: int = 0):
        return self.st.unpack_from(image, base + self.offset)[0]

    def __repr__(self) -> str:
        return f"Field({self.name!r}, {self.offset}, {self.st.format!r})"


@dataclass(frozen=True)
class CrashPlan:
    """How implicit write-backs behave for one execution and its crash."""

    rng_seed: int = 0
    eviction_policy: str = "none"
    rate: float = 0.0
    crash_point: int | None = None

    def __post_init__(self):
        if self.eviction_policy not in EVICTION_POLICIES:
            raise ValueError(f"unknown eviction policy {self.eviction_policy!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("eviction rate must lie in [0, 1]")

    @classmethod
    def random_rate(cls, p: float, seed: int = 0) -> "CrashPlan":
        return cls(rng_seed=seed, eviction_policy="random_rate", rate=p)

    @classmethod
    def adversarial(cls, seed: int = 0) -> "CrashPlan":
        return cls(rng_seed=seed, eviction_policy="adversarial_at_crash")


@dataclass
class PsyncStats:
    """Per-thread persistence counters, attributed to the current operation tag."""

    tag: str = "idle"
    psync_count: int = 0
    flush_count: int = 0
    fence_count: int = 0
    psyncs_by_tag: Counter = field(default_factory=Counter)
    fences_by_tag: Counter = field(default_factory=Counter)

    def record_psync(self, lines: int) -> None:
        self.psync_count += 1
        self.flush_count += lines
        self.psyncs_by_tag[self.tag] += 1

    def record_fence(self) -> None:
        self.fence_count += 1
        self.fences_by_tag[self.tag] += 1

    def copy(self) -> "PsyncStats":
        return PsyncStats(self.tag, self.psync_count, self.flush_count, self.fence_count,
                          Counter(self.psyncs_by_tag), Counter(self.fences_by_tag))

    @classmethod
    def merge(cls, stats: Iterable["PsyncStats"]) -> "PsyncStats":
        out = cls(tag="merged")
        for s in stats:
            out.psync_count += s.psync_count
            out.flush_count += s.flush_count
            out.fence_count += s.fence_count
            out.psyncs_by_tag.update(s.psyncs_by_tag)
            out.fences_by_tag.update(s.fences_by_tag)
        return out


@dataclass(frozen=True)
class LineShadow:
    """Read-only view of one cache line's two images."""

    line_id: tuple[int, int]
    volatile_image: bytes
    persistent_image: bytes
    version: int
    last_flush_version: int

    @property
    def dirty(self) -> bool:
        return self.version != self.last_flush_version


@dataclass(frozen=True)
class FlushRecord:
    """One write-back of a line, kept when history tracking is on."""

    seq: int
    line_addr: int
    version: int
    image: bytes
    cause: str  # "psync", "evict" or "crash"
    tag: str


class Region:
    """A contiguous run of equally sized slots."""

    __slots__ = ("id", "slot_size", "slot_count", "durable", "base", "line_size",
                 "volatile", "persistent", "versions", "flushed", "pending")

    def __init__(self, region_id: int, slot_size: int, slot_count: int, durable: bool,
                 line_size: int, data: bytes | None = None):
        self.id = region_id
        self.slot_size = slot_size
        self.slot_count = slot_count
        self.durable = durable
        self.line_size = line_size
        self.base = region_id << OFFSET_BITS
        size = slot_size * slot_count
        self.volatile = bytearray(data) if data is not None else bytearray(size)
        if durable:
            self.persistent = bytearray(self.volatile)
            nlines = size // line_size
            self.versions = [0] * nlines
            self.flushed = [0] * nlines
        else:
            self.persistent = None
            self.versions = self.flushed = None
        self.pending: dict[int, list[tuple[int, bytes]]] = {}

    def slot_addr(self, slot: int) -> int:
        if not 0 <= slot < self.slot_count:
            raise IndexError(f"slot {slot} outside region {self.id}")
        return self.base + slot * self.slot_size

    def slot_of(self, addr: int) -> int:
        return (addr & OFFSET_MASK) // self.slot_size

    def addresses(self) -> range:
        return range(self.base, self.base + self.slot_size * self.slot_count, self.slot_size)

    def __repr__(self) -> str:
        kind = "durable" if self.durable else "volatile"
        return f"<Region {self.id} {kind} {self.slot_count}x{self.slot_size}B>"


@dataclass(frozen=True)
class RegionImage:
    id: int
    slot_size: int
    slot_count: int
    data: bytes


@dataclass(frozen=True)
class PersistentSnapshot:
    """Frozen persistent images of every durable region at a crash."""

    line_size: int
    next_region_id: int
    regions: tuple[RegionImage, ...]

    def region(self, region_id: int) -> RegionImage:
        for r in self.regions:
            if r.id == region_id:
                return r
        raise KeyError(region_id)

    def has_region(self, region_id: int) -> bool:
        return any(r.id == region_id for r in self.regions)

    def image(self, region_id: int) -> bytes:
        return self.region(region_id).data

    def load(self, addr: int, fld: Field):
        return fld.st.unpack_from(self.image(addr >> OFFSET_BITS), (addr & OFFSET_MASK) + fld.offset)[0]

    def slot_bytes(self, addr: int) -> bytes:
        r = self.region(addr >> OFFSET_BITS)
        off = addr & OFFSET_MASK
        return r.data[off:off + r.slot_size]


class PersistentHeap:
    """Cache-line shadowing over a set of regions.

    Mutations hold one heap lock so that a field store, its version bump and
    any eviction it triggers form a single atomic step; loads are single C-level
    unpacks and need no lock under the GIL.
    """

    def __init__(self, line_size: int = LINE_SIZE, plan: CrashPlan | None = None,
                 track_history: bool = False, max_bytes: int = 1 << 31):
        if line_size <= 0 or line_size & (line_size - 1):
            raise ValueError("line size must be a power of two")
        self.line_size = line_size
        self.plan = plan or CrashPlan()
        self.track_history = track_history
        self.max_bytes = max_bytes
        self.crashed = False
        self.flush_log: list[FlushRecord] = []
        self.psync_total = 0
        self._regions: dict[int, Region] = {}
        self._next_id = 0
        self._bytes = 0
        self._lock = threading.Lock()
        self._evict_rng = random.Random(self.plan.rng_seed)
        self._evicting = self.plan.eviction_policy == "random_rate" and self.plan.rate > 0

    # -- regions ---------------------------------------------------------
    def allocate_region(self, slot_size: int, slot_count: int, durable: bool = True) -> Region:
        if slot_size <= 0 or slot_size % self.line_size:
            raise ValueError(f"slot size {slot_size} is not a multiple of the line size {self.line_size}")
        if slot_count <= 0 or slot_size * slot_count > OFFSET_MASK:
            raise ValueError("bad slot count")
        with self._lock:
            size = slot_size * slot_count
            if self._bytes + size > self.max_bytes:
                raise AllocationError("persistent heap capacity exhausted")
            region = Region(self._next_id, slot_size, slot_count, durable, self.line_size)
            self._regions[region.id] = region
            self._next_id += 1
            self._bytes += size
            return region

    def release_region(self, region_id: int) -> None:
        with self._lock:
            r = self._regions.pop(region_id)
            self._bytes -= r.slot_size * r.slot_count

    def region(self, region_id: int) -> Region:
        return self._regions[region_id]

    def region_of(self, addr: int) -> Region:
        return self._regions[addr >> OFFSET_BITS]

    def has_region(self, region_id: int) -> bool:
        return region_id in self._regions

    def regions(self) -> list[Region]:
        return [self._regions[k] for k in sorted(self._regions)]

    @property
    def next_region_id(self) -> int:
        return self._next_id

    # -- typed field access ----------------------------------------------
    def load(self, addr: int, fld: Field):
        r = self._regions[addr >> OFFSET_BITS]
        return fld.st.unpack_from(r.volatile, (addr & OFFSET_MASK) + fld.offset)[0]

    def load_persistent(self, addr: int, fld: Field):
        r = self._regions[addr >> OFFSET_BITS]
        return fld.st.unpack_from(r.persistent, (addr & OFFSET_MASK) + fld.offset)[0]

    def store(self, addr: int, fld: Field, value) -> None:
        r = self._regions[addr >> OFFSET_BITS]
        off = (addr & OFFSET_MASK) + fld.offset
        with self._lock:
            fld.st.pack_into(r.volatile, off, value)
            if r.durable:
                self._touch(r, off // self.line_size)

    def cas(self, addr: int, fld: Field, expected, new) -> bool:
        r = self._regions[addr >> OFFSET_BITS]
        off = (addr & OFFSET_MASK) + fld.offset
        with self._lock:
            if fld.st.unpack_from(r.volatile, off)[0] != expected:
                return False
            fld.st.pack_into(r.volatile, off, new)
            if r.durable:
                self._touch(r, off // self.line_size)
            return True

    # -- raw byte access -------------------------------------------------
    def store_field(self, region: Region, slot: int, field_offset: int, data: bytes) -> None:
        off = self._checked_offset(region, slot, field_offset, len(data))
        with self._lock:
            region.volatile[off:off + len(data)] = data
            if region.durable:
                self._touch(region, off // self.line_size)

    def load_field(self, region: Region, slot: int, field_offset: int, size: int) -> bytes:
        off = self._checked_offset(region, slot, field_offset, size)
        return bytes(region.volatile[off:off + size])

    def _checked_offset(self, region: Region, slot: int, field_offset: int, size: int) -> int:
        if not 0 <= slot < region.slot_count:
            raise IndexError(f"slot {slot} outside region {region.id}")
        if size <= 0 or field_offset < 0 or field_offset + size > region.slot_size:
            raise IndexError("field outside slot")
        if field_offset // self.line_size != (field_offset + size - 1) // self.line_size:
            raise IndexError("field straddles a cache line")
        return slot * region.slot_size + field_offset

    # -- persistence -----------------------------------------------------
    def _touch(self, r: Region, line: int) -> None:
        # caller holds the lock
        r.versions[line] += 1
        if self.track_history:
            a = line * self.line_size
            r.pending.setdefault(line, []).append((r.versions[line], bytes(r.volatile[a:a + self.line_size])))
        if self._evicting and self._evict_rng.random() < self.plan.rate:
            self._writeback(r, line, "evict", "evict")

    def _writeback(self, r: Region, line: int, cause: str, tag: str, image: bytes | None = None,
                   version: int | None = None) -> None:
        a = line * self.line_size
        if image is None:
            image = bytes(r.volatile[a:a + self.line_size])
            version = r.versions[line]
        r.persistent[a:a + self.line_size] = image
        r.flushed[line] = version
        r.pending.pop(line, None)
        if self.track_history:
            self.flush_log.append(FlushRecord(len(self.flush_log), r.base + a, version, image, cause, tag))

    def psync(self, addr: int, stats: PsyncStats | None = None) -> None:
        """Write back every line of the slot holding ``addr``; acts as a fence."""
        r = self._regions[addr >> OFFSET_BITS]
        if not r.durable:
            raise ValueError("psync on a volatile region")
        start = ((addr & OFFSET_MASK) // r.slot_size) * r.slot_size
        nlines = r.slot_size // self.line_size
        first = start // self.line_size
        tag = stats.tag if stats is not None else "untracked"
        with self._lock:
            for line in range(first, first + nlines):
                self._writeback(r, line, "psync", tag)
            self.psync_total += 1
        if stats is not None:
            stats.record_psync(nlines)

    def fence(self, stats: PsyncStats | None = None) -> None:
        # sequentially consistent simulation: ordering is already total
        if stats is not None:
            stats.record_fence()

    # -- inspection ------------------------------------------------------
    def line_shadow(self, addr: int) -> LineShadow:
        r = self._regions[addr >> OFFSET_BITS]
        line = (addr & OFFSET_MASK) // self.line_size
        a = line * self.line_size
        if not r.durable:
            raise ValueError("volatile regions have no persistent image")
        return LineShadow((r.id, line), bytes(r.volatile[a:a + self.line_size]),
                          bytes(r.persistent[a:a + self.line_size]), r.versions[line], r.flushed[line])

    def legal_images(self, addr: int) -> list[bytes]:
        """Persistent images a crash may legally leave for this line."""
        r = self._regions[addr >> OFFSET_BITS]
        line = (addr & OFFSET_MASK) // self.line_size
        a = line * self.line_size
        images = [bytes(r.persistent[a:a + self.line_size])]
        if self.track_history:
            images.extend(img for _, img in r.pending.get(line, ()))
        elif r.versions[line] != r.flushed[line]:
            images.append(bytes(r.volatile[a:a + self.line_size]))
        return images

    def dirty_lines(self) -> list[int]:
        out = []
        for r in self.regions():
            if r.durable:
                out.extend(r.base + i * self.line_size
                           for i, (v, f) in enumerate(zip(r.versions, r.flushed)) if v != f)
        return out

    # -- crash and restart -----------------------------------------------
    def crash(self, plan: CrashPlan | None = None) -> PersistentSnapshot:
        """Freeze the persistent images and discard everything volatile."""
        plan = plan or self.plan
        with self._lock:
            if self.crashed:
                raise RuntimeError("heap already crashed")
            if plan.eviction_policy == "adversarial_at_crash":
                rng = random.Random(plan.rng_seed * 2654435761 + 97)
                for r in self.regions():
                    if not r.durable:
                        continue
                    for line, (v, f) in enumerate(zip(r.versions, r.flushed)):
                        if v == f:
                            continue
                        a = line * self.line_size
                        if self.track_history:
                            choices = r.pending.get(line, [])
                        else:
                            choices = [(v, bytes(r.volatile[a:a + self.line_size]))]
                        pick = rng.randrange(len(choices) + 1)
                        if pick:
                            version, image = choices[pick - 1]
                            self._writeback(r, line, "crash", "crash", image, version)
            snap = PersistentSnapshot(
                self.line_size, self._next_id,
                tuple(RegionImage(r.id, r.slot_size, r.slot_count, bytes(r.persistent))
                      for r in self.regions() if r.durable))
            self._regions = {}
            self.crashed = True
        return snap

    @classmethod
    def from_snapshot(cls, snapshot: PersistentSnapshot, plan: CrashPlan | None = None,
                      track_history: bool = False, max_bytes: int = 1 << 31) -> "PersistentHeap":
        """Restart: every durable region comes back with volatile = persistent."""
        heap = cls(snapshot.line_size, plan, track_history, max_bytes)
        for img in snapshot.regions:
            r = Region(img.id, img.slot_size, img.slot_count, True, snapshot.line_size, img.data)
            heap._regions[r.id] = r
            heap._bytes += len(img.data)
        heap._next_id = snapshot.next_region_id
        return heap


def snapshot_dump(snapshot: PersistentSnapshot, sink: BinaryIO | str | PathLike) -> None:
    """Write ``snapshot`` in the versioned little-endian snapshot format."""
    buf = io.BytesIO()
    buf.write(_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, 0, snapshot.line_size,
                           snapshot.next_region_id, len(snapshot.regions)))
    for r in snapshot.regions:
        buf.write(_REGION_HEADER.pack(r.id, r.slot_size, r.slot_count, len(r.data)))
        buf.write(r.data)
    payload = buf.getvalue()
    payload += _TRAILER.pack(zlib.crc32(payload))
    if isinstance(sink, (str, PathLike)):
        with open(sink, "wb") as fh:
            fh.write(payload)
    else:
        sink.write(payload)


def snapshot_load(source: BinaryIO | str | PathLike | bytes) -> PersistentSnapshot:
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif isinstance(source, (str, PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    if len(data) < _HEADER.size + _TRAILER.size:
        raise SnapshotError("snapshot truncated")
    body, (crc,) = data[:-_TRAILER.size], _TRAILER.unpack(data[-_TRAILER.size:])
    magic, version, _, line_size, next_id, count = _HEADER.unpack_from(body, 0)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError("not a snapshot file")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    if zlib.crc32(body) != crc:
        raise SnapshotError("snapshot checksum mismatch (truncated or corrupt)")
    pos = _HEADER.size
    regions = []
    for _ in range(count):
        if pos + _REGION_HEADER.size > len(body):
            raise SnapshotError("snapshot truncated in region table")
        rid, slot_size, slot_count, length = _REGION_HEADER.unpack_from(body, pos)
        pos += _REGION_HEADER.size
        if length != slot_size * slot_count or pos + length > len(body):
            raise SnapshotError(f"region {rid} has inconsistent length")
        regions.append(RegionImage(rid, slot_size, slot_count, body[pos:pos + length]))
        pos += length
    if pos != len(body):
        raise SnapshotError("trailing bytes after region table")
    return PersistentSnapshot(line_size, next_id, tuple(regions))
