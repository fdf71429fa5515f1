"""Link-free durable sorted list.

Every node lives in one 64-byte durable slot and is the only representation of
its key.  Links are never persisted: recovery finds nodes by scanning the
durable areas and keeps those that are valid and unmarked.

Slot layout (little-endian)::

    0   u8   validity bits: bit 0 = v1, bit 1 = v2 (valid iff v1 == v2)
    1   u8   insert flush flag
    2   u8   delete flush flag
    8   i64  key
    16  i64  value
    24  u64  next node address; bit 0 is the deletion mark

A slot whose next field is zero has never been initialised and is always free.
"""

from __future__ import annotations

from .alloc import ThreadContext
from .pmem import Field, IntegrityError
from ._base import KEY_MAX, KEY_MIN, DurableSet, Steps

VALIDITY = Field("validity", 0, "<B")
INSERT_FLAG = Field("insert_flag", 1, "<B")
DELETE_FLAG = Field("delete_flag", 2, "<B")
KEY = Field("key", 8, "<q")
VALUE = Field("value", 16, "<q")
NEXT = Field("next", 24, "<Q")

MARK = 1


def is_marked(ref: int) -> bool:
    return bool(ref & MARK)


def get_ref(ref: int) -> int:
    return ref & ~MARK


def mark(ref: int) -> int:
    return ref | MARK


def bits_valid(bits: int) -> bool:
    return (bits ^ (bits >> 1)) & 1 == 0


def image_state(image: bytes, base: int = 0) -> tuple[bool, bool, bool]:
    """(pristine, valid, marked) for a slot image."""
    nxt = NEXT.unpack(image, base)
    return nxt == 0, bits_valid(VALIDITY.unpack(image, base)), is_marked(nxt)


class LinkFreeList(DurableSet):
    """Lock-free durable set; ``contains`` is wait-free."""

    variant = "link-free"

    def _init_sentinels(self) -> None:
        h = self.heap
        for head in self.heads():
            h.store(head, VALIDITY, 0)
            h.store(head, KEY, KEY_MIN)
            h.store(head, NEXT, self.tail)
        h.store(self.tail, KEY, KEY_MAX)
        h.store(self.tail, NEXT, 0)

    # -- node helpers ----------------------------------------------------
    def is_valid(self, node: int) -> bool:
        return bits_valid(self.heap.load(node, VALIDITY))

    def flip_v1(self, node: int) -> Steps:
        h = self.heap
        yield
        bits = h.load(node, VALIDITY)
        if bits_valid(bits):
            yield
            h.store(node, VALIDITY, bits ^ 1)

    def make_valid(self, node: int) -> Steps:
        h = self.heap
        yield
        bits = h.load(node, VALIDITY)
        if not bits_valid(bits):
            yield
            h.cas(node, VALIDITY, bits, (bits & 1) * 3)

    def flush_insert(self, ctx: ThreadContext, node: int) -> Steps:
        return self._flush(ctx, node, INSERT_FLAG)

    def flush_delete(self, ctx: ThreadContext, node: int) -> Steps:
        return self._flush(ctx, node, DELETE_FLAG)

    def _flush(self, ctx: ThreadContext, node: int, flag: Field) -> Steps:
        h = self.heap
        yield
        if not h.load(node, flag):
            yield
            h.psync(node, ctx.stats)
            yield
            h.store(node, flag, 1)

    def trim(self, ctx: ThreadContext, pred: int, curr: int) -> Steps:
        """Persist curr's mark, then try to unlink it from pred."""
        h = self.heap
        yield from self.flush_delete(ctx, curr)
        yield
        succ = get_ref(h.load(curr, NEXT))
        yield
        if self.audit and not is_marked(h.load_persistent(curr, NEXT)):
            self.violations.append(f"node {curr:#x} unlinked before its mark was persisted")
        if h.cas(pred, NEXT, curr, succ):
            self.allocator.retire(ctx, curr)
            return True
        return False

    def find(self, ctx: ThreadContext, head: int, key: int) -> Steps:
        h = self.heap
        pred = head
        yield
        curr = h.load(head, NEXT)
        while True:
            yield
            nxt = h.load(curr, NEXT)
            if not is_marked(nxt):
                if h.load(curr, KEY) >= key:
                    break
                pred = curr
            else:
                yield from self.trim(ctx, pred, curr)
            yield
            curr = get_ref(h.load(curr, NEXT))
        return pred, curr

    # -- set operations --------------------------------------------------
    def _contains(self, ctx: ThreadContext, head: int, key: int) -> Steps:
        h = self.heap
        yield
        curr = h.load(head, NEXT)
        while h.load(curr, KEY) < key:
            yield
            curr = get_ref(h.load(curr, NEXT))
        if h.load(curr, KEY) != key:
            return False
        yield
        if is_marked(h.load(curr, NEXT)):
            yield from self.flush_delete(ctx, curr)
            return False
        yield from self.make_valid(curr)
        yield from self.flush_insert(ctx, curr)
        return True

    def _insert(self, ctx: ThreadContext, head: int, key: int, value: int) -> Steps:
        h = self.heap
        node = 0
        while True:
            pred, curr = yield from self.find(ctx, head, key)
            if h.load(curr, KEY) == key:
                if node:
                    yield from self._discard(ctx, node, curr)
                yield from self.make_valid(curr)
                yield from self.flush_insert(ctx, curr)
                return False
            if not node:
                node = self.allocator.alloc(ctx)
                yield from self.flip_v1(node)
                h.fence(ctx.stats)
                yield
                h.store(node, KEY, key)
                yield
                h.store(node, VALUE, value)
                yield
                h.store(node, INSERT_FLAG, 0)
                yield
                h.store(node, DELETE_FLAG, 0)
            yield
            h.store(node, NEXT, curr)
            yield
            if h.cas(pred, NEXT, curr, node):
                ctx.trace["node"] = node
                ctx.trace["log_at"] = len(h.flush_log)
                yield from self.make_valid(node)
                yield from self.flush_insert(ctx, node)
                return True

    def _discard(self, ctx: ThreadContext, node: int, curr: int) -> Steps:
        # never linked: leave it valid and marked so neither recovery nor a
        # later allocation can mistake it for a member
        yield
        self.heap.store(node, NEXT, mark(curr))
        yield from self.make_valid(node)
        self.allocator.free(ctx, node)

    def _remove(self, ctx: ThreadContext, head: int, key: int) -> Steps:
        h = self.heap
        while True:
            pred, curr = yield from self.find(ctx, head, key)
            if h.load(curr, KEY) != key:
                return False
            yield
            succ = get_ref(h.load(curr, NEXT))
            yield from self.make_valid(curr)
            yield
            if self.audit and not self.is_valid(curr):
                self.violations.append(f"node {curr:#x} marked while invalid")
            if h.cas(curr, NEXT, succ, mark(succ)):
                break
        ctx.trace["node"] = curr
        ctx.trace["log_at"] = len(h.flush_log)
        yield from self.trim(ctx, pred, curr)
        return True

    # -- inspection ------------------------------------------------------
    def walk(self, head: int) -> list[int]:
        """Node addresses reachable from ``head``, sentinels excluded."""
        h = self.heap
        out = []
        curr = get_ref(h.load(head, NEXT))
        while curr != self.tail:
            out.append(curr)
            curr = get_ref(h.load(curr, NEXT))
        return out

    def items(self) -> list[tuple[int, int]]:
        h = self.heap
        out = []
        for head in self.heads():
            for node in self.walk(head):
                if not is_marked(h.load(node, NEXT)):
                    out.append((h.load(node, KEY), h.load(node, VALUE)))
        return sorted(out)

    def check_invariants(self) -> list[str]:
        """Quiescent sweep: order, uniqueness, sentinels, marked=>valid, reachability."""
        h = self.heap
        bad = []
        if h.load(self.tail, KEY) != KEY_MAX or h.load(self.tail, NEXT) != 0:
            bad.append("tail sentinel damaged")
        reachable = set()
        for b, head in enumerate(self.heads()):
            if h.load(head, KEY) != KEY_MIN or is_marked(h.load(head, NEXT)):
                bad.append(f"head sentinel of bucket {b} damaged")
            prev_key = KEY_MIN
            for node in self.walk(head):
                k = h.load(node, KEY)
                if k <= prev_key:
                    bad.append(f"bucket {b}: key {k} after {prev_key}")
                if self.bucket_count > 1 and self.route(k) != b:
                    bad.append(f"key {k} found in bucket {b}")
                prev_key = k
                reachable.add(node)
        for addr, status in self.allocator.census().items():
            pristine, valid, marked = image_state(self._slot(addr))
            if marked and not valid:
                bad.append(f"node {addr:#x} is marked but invalid")
            if status == "allocated" and valid and not marked and not pristine and addr not in reachable:
                bad.append(f"valid unmarked node {addr:#x} (key {h.load(addr, KEY)}) is unreachable")
            if status in ("free", "limbo") and addr in reachable:
                bad.append(f"reachable node {addr:#x} is on a free-list")
        bad.extend(self.allocator.violations)
        bad.extend(self.violations)
        return bad

    def _slot(self, addr: int) -> bytes:
        r = self.heap.region_of(addr)
        off = addr - r.base
        return bytes(r.volatile[off:off + r.slot_size])

    # -- recovery --------------------------------------------------------
    @staticmethod
    def _is_live(heap, addr: int) -> bool:
        nxt = heap.load(addr, NEXT)
        return nxt != 0 and not is_marked(nxt) and bits_valid(heap.load(addr, VALIDITY))

    def _rebuild(self, ctx: ThreadContext, live: list[int], free: list[int]) -> None:
        h = self.heap
        for addr in free:
            nxt = h.load(addr, NEXT)
            if nxt and not bits_valid(h.load(addr, VALIDITY)):
                # interrupted initialisation: mark first, then validate
                if not is_marked(nxt):
                    h.store(addr, NEXT, mark(nxt))
                bits = h.load(addr, VALIDITY)
                h.store(addr, VALIDITY, (bits & 1) * 3)
        buckets: list[list[tuple[int, int]]] = [[] for _ in range(self.bucket_count)]
        for addr in live:
            k = h.load(addr, KEY)
            buckets[self.route(k)].append((k, addr))
        for b, nodes in enumerate(buckets):
            nodes.sort()
            prev = self.head(b)
            for i, (k, addr) in enumerate(nodes):
                if i and nodes[i - 1][0] == k:
                    raise IntegrityError(f"two valid unmarked nodes hold key {k}")
                h.store(addr, INSERT_FLAG, 1)
                h.store(addr, DELETE_FLAG, 0)
                h.store(prev, NEXT, addr)
                prev = addr
            h.store(prev, NEXT, self.tail)
