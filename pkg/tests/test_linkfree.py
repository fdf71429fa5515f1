import random

import pytest
from hypothesis import given, strategies as st

from durasets.linkfree import (DELETE_FLAG, INSERT_FLAG, KEY, NEXT, VALIDITY, LinkFreeList,
                               bits_valid, is_marked, mark)
from durasets.pmem import CrashPlan, IntegrityError
from oracles import SortedSetModel


def run_interleaved(gens, seed):
    """Step generators in a seeded random order; returns their results."""
    rng = random.Random(seed)
    live = dict(enumerate(gens))
    out = {}
    while live:
        i = rng.choice(sorted(live))
        try:
            next(live[i])
        except StopIteration as stop:
            out[i] = stop.value
            del live[i]
    return [out[i] for i in range(len(gens))]


def node_of(s, key):
    return next(n for n in s.walk(s.head()) if s.heap.load(n, KEY) == key)


def test_basic_set_semantics():
    s = LinkFreeList()
    assert s.insert(5, 50)
    assert s.contains(5) and 5 in s
    assert not s.insert(5, 99)
    assert s.items() == [(5, 50)]
    assert s.remove(5)
    assert not s.remove(5)
    assert not s.contains(5)
    assert s.check_invariants() == []


def test_keys_stay_sorted():
    s = LinkFreeList()
    for k in (7, -3, 12, 0, 5):
        s.insert(k)
    assert s.keys() == [-3, 0, 5, 7, 12]
    assert [s.heap.load(n, KEY) for n in s.walk(s.head())] == [-3, 0, 5, 7, 12]


def test_extreme_keys_are_rejected():
    s = LinkFreeList()
    with pytest.raises(ValueError):
        s.insert(2 ** 63 - 1)
    with pytest.raises(ValueError):
        s.contains(-2 ** 63)


def test_psync_discipline_per_operation():
    s = LinkFreeList()
    ctx = s.allocator.register()
    s.insert(1, 0, ctx)
    by = ctx.stats.psyncs_by_tag
    assert by["insert"] == 1 and by["alloc"] == 2
    s.insert(1, 0, ctx)        # already present, flag set: nothing to persist
    s.contains(1, ctx)
    s.contains(2, ctx)
    assert by["insert"] == 1 and by["contains"] == 0
    s.remove(1, ctx)
    assert by["remove"] == 1
    s.remove(1, ctx)
    s.contains(1, ctx)
    assert by["remove"] == 1 and by["contains"] == 0


def test_contains_persists_a_node_whose_insert_flag_is_clear():
    s = LinkFreeList()
    s.insert(4)
    n = node_of(s, 4)
    s.heap.store(n, INSERT_FLAG, 0)   # as if the inserter stalled before its psync
    ctx = s.allocator.register()
    assert s.contains(4, ctx)
    assert ctx.stats.psyncs_by_tag["contains"] == 1
    assert s.heap.load(n, INSERT_FLAG) == 1
    assert s.contains(4, ctx) and ctx.stats.psync_count == 1


def test_contains_helps_an_invalid_reachable_node():
    s = LinkFreeList()
    s.insert(4)
    n = node_of(s, 4)
    s.heap.store(n, VALIDITY, 1)  # v1 flipped, v2 not yet
    s.heap.store(n, INSERT_FLAG, 0)
    assert s.contains(4)
    assert bits_valid(s.heap.load(n, VALIDITY))
    assert s.heap.load_persistent(n, VALIDITY) == s.heap.load(n, VALIDITY)


def test_find_trims_marked_nodes_on_the_way():
    s = LinkFreeList()
    for k in (1, 2, 3):
        s.insert(k)
    n2 = node_of(s, 2)
    s.heap.store(n2, NEXT, mark(s.heap.load(n2, NEXT)))
    assert s.keys() == [1, 3]
    ctx = s.allocator.register()
    s.insert(5, 0, ctx)
    assert n2 not in s.walk(s.head())
    assert s.heap.load(n2, DELETE_FLAG) == 1
    assert is_marked(s.heap.load_persistent(n2, NEXT))
    assert any(n2 in b for b in s.allocator.free_list(ctx.tid).limbo.values())


def test_concurrent_trims_unlink_exactly_once():
    s = LinkFreeList()
    for k in (1, 2):
        s.insert(k)
    n1, n2 = node_of(s, 1), node_of(s, 2)
    s.heap.store(n2, NEXT, mark(s.heap.load(n2, NEXT)))
    c1, c2 = s.allocator.register(), s.allocator.register()
    g1, g2 = s.trim(c1, n1, n2), s.trim(c2, n1, n2)
    live = [g1, g2]
    done = {}
    while live:
        for g in list(live):
            try:
                next(g)
            except StopIteration as stop:
                done[id(g)] = stop.value
                live.remove(g)
    results = [done[id(g1)], done[id(g2)]]
    assert sorted(results) == [False, True]
    assert s.walk(s.head()) == [n1]
    retired = sum(len(b) for c in (c1, c2) for b in s.allocator.free_list(c.tid).limbo.values())
    assert retired == 1


@pytest.mark.parametrize("op", ["insert", "remove"])
def test_same_key_race_has_one_winner(op):
    for seed in range(60):
        s = LinkFreeList()
        if op == "remove":
            s.insert(7)
        ctxs = [s.allocator.register() for _ in range(3)]
        gens = [s.operation(c, op, 7, i) for i, c in enumerate(ctxs)]
        res = run_interleaved(gens, seed)
        assert res.count(True) == 1
        assert s.keys() == ([7] if op == "insert" else [])
        assert s.check_invariants() == []


def test_losing_insert_node_is_left_valid_and_marked():
    # the losers' nodes were never linked; recovery must not resurrect them
    for seed in range(40):
        s = LinkFreeList(area_slots=4)
        ctxs = [s.allocator.register() for _ in range(3)]
        run_interleaved([s.operation(c, "insert", 3, i) for i, c in enumerate(ctxs)], seed)
        r = LinkFreeList.recover(s.crash())
        assert r.keys() == [3]


def test_recovery_rebuilds_the_persisted_set():
    s = LinkFreeList()
    for k in range(1, 6):
        s.insert(k, k * 10)
    s.remove(2)
    r = LinkFreeList.recover(s.crash())
    assert r.items() == [(1, 10), (3, 30), (4, 40), (5, 50)]
    assert r.recovery_stats.psync_count == 0
    assert r.check_invariants() == []
    assert r.insert(2) and r.keys() == [1, 2, 3, 4, 5]


def test_recovery_of_an_empty_heap():
    r = LinkFreeList.recover(LinkFreeList().crash())
    assert r.keys() == [] and r.check_invariants() == []


def test_recovery_rejects_duplicate_members():
    s = LinkFreeList()
    s.insert(1)
    ctx = s.allocator.register()
    dup = s.allocator.alloc(ctx)
    h = s.heap
    h.store(dup, VALIDITY, 3)
    h.store(dup, KEY, 1)
    h.store(dup, NEXT, s.tail)
    h.psync(dup)
    with pytest.raises(IntegrityError):
        LinkFreeList.recover(s.crash())


def test_crash_between_mark_and_flush_keeps_the_key():
    s = LinkFreeList()
    s.insert(3)
    ctx = s.allocator.register()
    g = s.operation(ctx, "remove", 3)
    while "node" not in ctx.trace:   # step until the mark CAS has happened
        next(g)
    assert is_marked(s.heap.load(node_of_any(s, 3), NEXT))
    r = LinkFreeList.recover(s.crash(CrashPlan()))
    assert r.keys() == [3]


def node_of_any(s, key):
    r = s.allocator.areas()[0].region
    return next(a for a in r.addresses() if s.heap.load(a, KEY) == key)


def test_crash_after_remove_psync_drops_the_key():
    s = LinkFreeList()
    s.insert(3)
    ctx = s.allocator.register()
    g = s.operation(ctx, "remove", 3)
    while ctx.stats.psyncs_by_tag["remove"] == 0:
        next(g)
    assert LinkFreeList.recover(s.crash()).keys() == []


@pytest.mark.parametrize("seed", range(10))
def test_crash_mid_insert_before_link_leaves_nothing(seed):
    s = LinkFreeList()
    s.insert(1)
    ctx = s.allocator.register()
    g = s.operation(ctx, "insert", 9, 1)
    for _ in range(6):          # allocation and v1 flip, not linked
        next(g)
    assert s.walk(s.head()) == [node_of(s, 1)]
    r = LinkFreeList.recover(s.crash(CrashPlan.adversarial(seed)))
    assert r.keys() == [1] and r.check_invariants() == []


def test_adversarial_crash_after_completed_ops_is_exact():
    for seed in range(30):
        s = LinkFreeList(area_slots=4)
        for k in range(6):
            s.insert(k)
        for k in (1, 4):
            s.remove(k)
        s.contains(2)
        r = LinkFreeList.recover(s.crash(CrashPlan.adversarial(seed)), area_slots=4)
        assert r.keys() == [0, 2, 3, 5]
        assert r.check_invariants() == []


def test_invariant_sweep_spots_damage():
    s = LinkFreeList()
    for k in (1, 2):
        s.insert(k)
    n1, n2 = node_of(s, 1), node_of(s, 2)
    s.heap.store(n1, KEY, 5)
    assert any("after" in v for v in s.check_invariants())
    s.heap.store(n1, KEY, 1)
    s.heap.store(n2, NEXT, mark(s.tail))
    s.heap.store(n2, VALIDITY, 1)
    assert any("marked but invalid" in v for v in s.check_invariants())


ops = st.lists(st.tuples(st.sampled_from(["insert", "remove", "contains"]), st.integers(-5, 5),
                         st.integers(0, 99)), max_size=60)


@given(ops)
def test_matches_the_sorted_set_model(seq):
    s = LinkFreeList(area_slots=4)
    m = SortedSetModel()
    for name, k, v in seq:
        if name == "insert":
            assert s.insert(k, v) == m.insert(k, v)
        elif name == "remove":
            assert s.remove(k) == m.remove(k)
        else:
            assert s.contains(k) == m.contains(k)
    assert s.items() == m.items()
    assert s.check_invariants() == []


@given(ops, st.integers(0, 10 ** 6))
def test_recovery_after_quiescent_crash_matches_the_model(seq, seed):
    s = LinkFreeList(area_slots=4)
    m = SortedSetModel()
    for name, k, v in seq:
        getattr(m, name)(*((k, v) if name == "insert" else (k,)))
        getattr(s, name)(*((k, v) if name == "insert" else (k,)))
    r = LinkFreeList.recover(s.crash(CrashPlan.adversarial(seed)), area_slots=4)
    assert r.items() == m.items()
    assert r.recovery_stats.psync_count == 0
    assert r.check_invariants() == []
