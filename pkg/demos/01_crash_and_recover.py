# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Crashing a durable set and bringing it back
#
# Both list variants live on a simulated persistent heap. Every store lands in
# a volatile image first and only reaches the persistent image through a psync
# (or an eviction the crash plan allows). A crash keeps the persistent image and
# throws the rest away.

# %%
from durasets import LinkFreeList, SoftList
from durasets.pmem import CrashPlan

# %% [markdown]
# ## Fill, remove, crash
#
# With no pending writes left, any crash plan gives back exactly the set we had.

# %%
for cls in (LinkFreeList, SoftList):
    s = cls()
    ctx = s.allocator.register()
    for k in range(10):
        s.insert(k, k * k, ctx)
    for k in range(0, 10, 3):
        s.remove(k, ctx)
    snap = s.crash(CrashPlan.adversarial(seed=1))
    r = cls.recover(snap)
    print(cls.__name__, r.keys(), "recovery psyncs:", r.recovery_stats.psync_count)
    print("  psyncs by tag:", dict(ctx.stats.psyncs_by_tag))

# %% [markdown]
# Ten inserts and four removes cost fourteen psyncs in both variants. The two
# extra `alloc` psyncs pay for the one durable area the thread carved out.
#
# ## Crashing in the middle of an operation
#
# Operations are step generators, so we can stop one part-way. A SOFT insert
# first links its volatile node in an intend-to-insert state, then persists the
# PNode. A crash before that psync loses the key. A crash after it keeps the key,
# even though the volatile node never reached the inserted state.

# %%
def crash_after(steps):
    s = SoftList()
    ctx = s.allocator.register()
    g = s.operation(ctx, "insert", 42, 7)
    for _ in range(steps):
        next(g, None)
    return SoftList.recover(s.crash()).items(), ctx.stats.psyncs_by_tag["insert"]


for steps in range(0, 12, 2):
    items, psyncs = crash_after(steps)
    print(f"crash after {steps:2d} steps: recovered {items}  (insert psyncs so far: {psyncs})")

# %% [markdown]
# The link-free list differs: the node itself is persistent, and a remove
# counts only once its mark has been flushed.

# %%
from durasets.linkfree import NEXT, is_marked

s = LinkFreeList()
s.insert(5)
ctx = s.allocator.register()
g = s.operation(ctx, "remove", 5)
while "node" not in ctx.trace:
    next(g)
node = ctx.trace["node"]
print("marked in volatile memory:", is_marked(s.heap.load(node, NEXT)))
print("marked in persistent memory:", is_marked(s.heap.load_persistent(node, NEXT)))
print("recovered:", LinkFreeList.recover(s.crash()).keys())

# %% [markdown]
# ## Hash sets recover into any table size
#
# Only node payloads are durable, so the table can be rebuilt with a different
# bucket count.

# %%
from durasets import HashSet

m = HashSet("soft", bucket_count=8)
for k in range(100):
    m.insert(k)
r = HashSet.recover(m.crash(), "soft", bucket_count=64)
print(len(r), "keys in", r.bucket_count, "buckets; longest bucket:", max(r.bucket_sizes()))
