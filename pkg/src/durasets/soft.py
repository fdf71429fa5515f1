"""SOFT: a durable sorted list that persists only keys and values.

Each key has a persistent node (PNode) in a durable area and a volatile node
(VNode) that carries the links.  The low two bits of a VNode's next reference
hold the node's state, and every update issues at most one psync: the PNode is
written (create or destroy) between announcing an intention and completing it,
and any thread that sees the intention helps.

PNode slot layout (64 bytes, little-endian)::

    0   u8   validStart
    1   u8   validEnd
    2   u8   deleted
    8   i64  key
    16  i64  value

A PNode is valid iff validStart == validEnd, and a member iff additionally
deleted != validStart.  All-equal flags (including a zeroed slot) mean
valid-and-removed, which is also the state allocation expects.

VNode slot layout (volatile)::

    0   i64  key
    8   i64  value
    16  u64  PNode address
    24  u8   pValidity
    32  u64  next VNode address | state
"""

from __future__ import annotations

import threading

from .alloc import ThreadContext
from .pmem import Field, IntegrityError
from ._base import KEY_MAX, KEY_MIN, DurableSet, Steps

VALID_START = Field("validStart", 0, "<B")
VALID_END = Field("validEnd", 1, "<B")
DELETED_FLAG = Field("deleted", 2, "<B")
P_KEY = Field("key", 8, "<q")
P_VALUE = Field("value", 16, "<q")

V_KEY = Field("key", 0, "<q")
V_VALUE = Field("value", 8, "<q")
V_PPTR = Field("pptr", 16, "<Q")
V_PVALIDITY = Field("pValidity", 24, "<B")
V_NEXT = Field("next", 32, "<Q")

# state tags; DELETED is zero so a zeroed link never reads as live
DELETED = 0b00
INTEND_TO_INSERT = 0b01
INSERTED = 0b10
INTEND_TO_DELETE = 0b11
STATE_MASK = 0b11

STATE_NAMES = {DELETED: "DELETED", INTEND_TO_INSERT: "INTEND_TO_INSERT",
               INSERTED: "INSERTED", INTEND_TO_DELETE: "INTEND_TO_DELETE"}
# position of each state in the only legal progression
STATE_RANK = {INTEND_TO_INSERT: 0, INSERTED: 1, INTEND_TO_DELETE: 2, DELETED: 3}


def create_ref(addr: int, state: int) -> int:
    return addr | state


def get_ref(ref: int) -> int:
    return ref & ~STATE_MASK


def get_state(ref: int) -> int:
    return ref & STATE_MASK


def pnode_state(vs: int, ve: int, deleted: int) -> str:
    """'invalid', 'member' or 'removed' for a PNode's three flags."""
    if vs != ve:
        return "invalid"
    return "member" if deleted != vs else "removed"


def image_state(image: bytes, base: int = 0) -> str:
    return pnode_state(VALID_START.unpack(image, base), VALID_END.unpack(image, base),
                       DELETED_FLAG.unpack(image, base))


class SoftList(DurableSet):
    """Lock-free durable set with at most one psync per update."""

    variant = "soft"

    def __init__(self, *args, **kwargs):
        self._audit_lock = threading.Lock()
        self._seen: dict[int, int] = {}
        super().__init__(*args, **kwargs)

    def _init_sentinels(self) -> None:
        h = self.heap
        for head in self.heads():
            h.store(head, V_KEY, KEY_MIN)
            h.store(head, V_NEXT, create_ref(self.tail, INSERTED))
        h.store(self.tail, V_KEY, KEY_MAX)
        h.store(self.tail, V_NEXT, create_ref(0, INSERTED))

    # -- PNode -----------------------------------------------------------
    def pnode_alloc(self, pnode: int) -> int:
        return 1 - self.heap.load(pnode, VALID_START)

    def pnode_create(self, ctx: ThreadContext, pnode: int, key: int, value: int, pvalid: int) -> Steps:
        h = self.heap
        yield
        h.store(pnode, VALID_START, pvalid)
        h.fence(ctx.stats)
        yield
        h.store(pnode, P_KEY, key)
        yield
        h.store(pnode, P_VALUE, value)
        yield
        h.store(pnode, VALID_END, pvalid)
        yield
        h.psync(pnode, ctx.stats)

    def pnode_destroy(self, ctx: ThreadContext, pnode: int, pvalid: int) -> Steps:
        h = self.heap
        yield
        h.store(pnode, DELETED_FLAG, pvalid)
        yield
        h.psync(pnode, ctx.stats)

    # -- tagged links ----------------------------------------------------
    def load_next(self, vnode: int) -> int:
        if not self.audit:
            return self.heap.load(vnode, V_NEXT)
        with self._audit_lock:
            ref = self.heap.load(vnode, V_NEXT)
            self._observe(vnode, get_state(ref))
        return ref

    def _observe(self, vnode: int, state: int) -> None:
        if vnode == self.tail or vnode in self._sentinel_set:
            return
        rank = STATE_RANK[state]
        prev = self._seen.get(vnode, 0)
        if rank < prev:
            self.violations.append(f"vnode {vnode:#x} went back to {STATE_NAMES[state]}")
        else:
            self._seen[vnode] = rank

    def state_cas(self, vnode: int, old: int, new: int) -> bool:
        h = self.heap
        if not self.audit:
            ref = h.load(vnode, V_NEXT)
            return h.cas(vnode, V_NEXT, create_ref(get_ref(ref), old), create_ref(get_ref(ref), new))
        with self._audit_lock:
            ref = h.load(vnode, V_NEXT)
            ok = h.cas(vnode, V_NEXT, create_ref(get_ref(ref), old), create_ref(get_ref(ref), new))
            if ok:
                if STATE_RANK[new] != STATE_RANK[old] + 1:
                    self.violations.append(f"illegal transition {STATE_NAMES[old]} -> {STATE_NAMES[new]}")
                self._observe(vnode, new)
                self._check_durable(vnode, new)
        return ok

    def _check_durable(self, vnode: int, state: int) -> None:
        # a state becomes visible only after the PNode write it stands for is persistent
        h = self.heap
        pnode, pv = h.load(vnode, V_PPTR), h.load(vnode, V_PVALIDITY)
        vs, ve, d = (h.load_persistent(pnode, f) for f in (VALID_START, VALID_END, DELETED_FLAG))
        if state == INSERTED and not (vs == ve == pv and d != pv):
            self.violations.append(f"vnode {vnode:#x} INSERTED before its PNode create was persisted")
        if state == DELETED and d != pv:
            self.violations.append(f"vnode {vnode:#x} DELETED before its PNode destroy was persisted")

    @property
    def _sentinel_set(self) -> frozenset:
        s = getattr(self, "_sentinels_cache", None)
        if s is None:
            s = self._sentinels_cache = frozenset(self.heads())
        return s

    # -- traversal -------------------------------------------------------
    def trim(self, ctx: ThreadContext, pred: int, curr: int) -> Steps:
        h = self.heap
        pred_state = get_state(curr)
        curr_ref = get_ref(curr)
        yield
        succ = create_ref(get_ref(self.load_next(curr_ref)), pred_state)
        yield
        if h.cas(pred, V_NEXT, curr, succ):
            self.allocator.retire(ctx, curr_ref)
            self.allocator.retire(ctx, h.load(curr_ref, V_PPTR))
            return True
        return False

    def find(self, ctx: ThreadContext, head: int, key: int) -> Steps:
        """Returns (pred, curr, curr_state); curr carries pred's state tag."""
        h = self.heap
        pred = head
        yield
        curr = self.load_next(head)
        curr_ref = get_ref(curr)
        pred_state = get_state(curr)
        while True:
            yield
            succ = self.load_next(curr_ref)
            succ_ref = get_ref(succ)
            c_state = get_state(succ)
            if c_state != DELETED:
                if h.load(curr_ref, V_KEY) >= key:
                    break
                pred = curr_ref
                pred_state = c_state
            else:
                yield from self.trim(ctx, pred, curr)
            curr = create_ref(succ_ref, pred_state)
            curr_ref = succ_ref
        return pred, curr, c_state

    # -- set operations --------------------------------------------------
    def _contains(self, ctx: ThreadContext, head: int, key: int) -> Steps:
        h = self.heap
        yield
        curr = get_ref(self.load_next(head))
        while h.load(curr, V_KEY) < key:
            yield
            curr = get_ref(self.load_next(curr))
        yield
        state = get_state(self.load_next(curr))
        if h.load(curr, V_KEY) != key:
            return False
        return state in (INSERTED, INTEND_TO_DELETE)

    def _insert(self, ctx: ThreadContext, head: int, key: int, value: int) -> Steps:
        h = self.heap
        vnode = pnode = 0
        while True:
            pred, curr, curr_state = yield from self.find(ctx, head, key)
            curr_ref = get_ref(curr)
            pred_state = get_state(curr)
            if h.load(curr_ref, V_KEY) == key:
                if vnode:
                    self.allocator.free(ctx, vnode)
                    self.allocator.free(ctx, pnode)
                if curr_state != INTEND_TO_INSERT:
                    return False
                result_node, result = curr_ref, False
                break
            if not vnode:
                pnode = self.allocator.alloc(ctx)
                vnode = self.allocator.alloc(ctx, durable=False)
                if self.audit:
                    self._seen.pop(vnode, None)
                h.store(vnode, V_KEY, key)
                h.store(vnode, V_VALUE, value)
                h.store(vnode, V_PPTR, pnode)
                h.store(vnode, V_PVALIDITY, self.pnode_alloc(pnode))
            h.store(vnode, V_NEXT, create_ref(curr_ref, INTEND_TO_INSERT))
            yield
            if h.cas(pred, V_NEXT, curr, create_ref(vnode, pred_state)):
                result_node, result = vnode, True
                break
        ctx.trace.update(pnode=h.load(result_node, V_PPTR), pvalidity=h.load(result_node, V_PVALIDITY),
                         linked=result, log_at=len(h.flush_log))
        yield from self.pnode_create(ctx, h.load(result_node, V_PPTR), h.load(result_node, V_KEY),
                                     h.load(result_node, V_VALUE), h.load(result_node, V_PVALIDITY))
        while True:
            yield
            if get_state(self.load_next(result_node)) != INTEND_TO_INSERT:
                break
            yield
            self.state_cas(result_node, INTEND_TO_INSERT, INSERTED)
        return result

    def _remove(self, ctx: ThreadContext, head: int, key: int) -> Steps:
        h = self.heap
        pred, curr, curr_state = yield from self.find(ctx, head, key)
        curr_ref = get_ref(curr)
        if h.load(curr_ref, V_KEY) != key:
            return False
        if curr_state == INTEND_TO_INSERT:
            return False
        result = False
        while not result:
            yield
            if get_state(self.load_next(curr_ref)) != INSERTED:
                break
            yield
            result = self.state_cas(curr_ref, INSERTED, INTEND_TO_DELETE)
        pnode, pvalid = h.load(curr_ref, V_PPTR), h.load(curr_ref, V_PVALIDITY)
        ctx.trace.update(pnode=pnode, pvalidity=pvalid, won=result, log_at=len(h.flush_log))
        yield from self.pnode_destroy(ctx, pnode, pvalid)
        while True:
            yield
            if get_state(self.load_next(curr_ref)) != INTEND_TO_DELETE:
                break
            yield
            self.state_cas(curr_ref, INTEND_TO_DELETE, DELETED)
        if result:
            yield from self.trim(ctx, pred, curr)
        return result

    # -- inspection ------------------------------------------------------
    def walk(self, head: int) -> list[tuple[int, int]]:
        """(vnode, state) pairs reachable from ``head``, sentinels excluded."""
        h = self.heap
        out = []
        curr = get_ref(h.load(head, V_NEXT))
        while curr != self.tail:
            ref = h.load(curr, V_NEXT)
            out.append((curr, get_state(ref)))
            curr = get_ref(ref)
        return out

    def items(self) -> list[tuple[int, int]]:
        h = self.heap
        out = []
        for head in self.heads():
            for vnode, state in self.walk(head):
                if state in (INSERTED, INTEND_TO_DELETE):
                    out.append((h.load(vnode, V_KEY), h.load(vnode, V_VALUE)))
        return sorted(out)

    def check_invariants(self) -> list[str]:
        """Quiescent sweep: order, uniqueness, sentinels, PNode agreement, reachability."""
        h = self.heap
        bad = []
        if h.load(self.tail, V_KEY) != KEY_MAX or h.load(self.tail, V_NEXT) != create_ref(0, INSERTED):
            bad.append("tail sentinel damaged")
        members = set()
        for b, head in enumerate(self.heads()):
            ref = h.load(head, V_NEXT)
            if h.load(head, V_KEY) != KEY_MIN or get_state(ref) != INSERTED:
                bad.append(f"head sentinel of bucket {b} damaged")
            prev_key = KEY_MIN
            for vnode, state in self.walk(head):
                k = h.load(vnode, V_KEY)
                if k <= prev_key:
                    bad.append(f"bucket {b}: key {k} after {prev_key}")
                if self.bucket_count > 1 and self.route(k) != b:
                    bad.append(f"key {k} found in bucket {b}")
                prev_key = k
                pnode, pv = h.load(vnode, V_PPTR), h.load(vnode, V_PVALIDITY)
                ps = pnode_state(*(h.load_persistent(pnode, f) for f in (VALID_START, VALID_END, DELETED_FLAG)))
                if state == INSERTED:
                    members.add(pnode)
                    if ps != "member" or h.load(pnode, VALID_START) != pv or h.load(pnode, P_KEY) != k:
                        bad.append(f"INSERTED key {k} has PNode in state {ps}")
                elif state == DELETED and ps == "member":
                    bad.append(f"DELETED key {k} still has a member PNode")
                elif state != INSERTED and state != DELETED:
                    bad.append(f"key {k} left in transient state {STATE_NAMES[state]} while quiescent")
        for addr, status in self.allocator.census().items():
            if addr in members and status != "allocated":
                bad.append(f"PNode {addr:#x} of a member is on a free-list")
            if addr not in members and status == "allocated" and image_state(self._slot(addr)) == "member":
                bad.append(f"member PNode {addr:#x} (key {h.load(addr, P_KEY)}) has no VNode")
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
        return pnode_state(heap.load(addr, VALID_START), heap.load(addr, VALID_END),
                           heap.load(addr, DELETED_FLAG)) == "member"

    def _rebuild(self, ctx: ThreadContext, live: list[int], free: list[int]) -> None:
        h = self.heap
        for addr in free:
            vs = h.load(addr, VALID_START)
            if h.load(addr, VALID_END) != vs:
                # interrupted create: make every flag agree, i.e. removed
                h.store(addr, DELETED_FLAG, vs)
                h.store(addr, VALID_END, vs)
        buckets: list[list[tuple[int, int]]] = [[] for _ in range(self.bucket_count)]
        for addr in live:
            k = h.load(addr, P_KEY)
            buckets[self.route(k)].append((k, addr))
        for b, nodes in enumerate(buckets):
            nodes.sort()
            prev = self.head(b)
            for i, (k, pnode) in enumerate(nodes):
                if i and nodes[i - 1][0] == k:
                    raise IntegrityError(f"two member PNodes hold key {k}")
                vnode = self.allocator.alloc(ctx, durable=False)
                h.store(vnode, V_KEY, k)
                h.store(vnode, V_VALUE, h.load(pnode, P_VALUE))
                h.store(vnode, V_PPTR, pnode)
                h.store(vnode, V_PVALIDITY, h.load(pnode, VALID_START))
                h.store(prev, V_NEXT, create_ref(vnode, INSERTED))
                prev = vnode
            h.store(prev, V_NEXT, create_ref(self.tail, INSERTED))
