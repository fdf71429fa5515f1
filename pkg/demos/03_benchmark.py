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
# # Persistence cost per operation
#
# Throughput from the simulator is bounded by the interpreter and only useful
# for relative comparisons on one machine. The psync counts are exact.

# %%
import io

from durasets.bench import WorkloadSpec, emit_csv, run

results = []
for structure in ("lf-list", "soft-list", "lf-hash", "soft-hash"):
    for reads in (50.0, 90.0):
        res = run(WorkloadSpec(structure, threads=2, key_range=256, read_pct=reads, seed=0,
                               ops_per_thread=2000))
        results.append(res)
        print(f"{structure:9s} reads={reads:4.0f}%  psyncs/op={res.psync_per_op():.3f}  "
              f"per successful update: insert {res.psync_per_op('insert', successful=True):.2f} "
              f"remove {res.psync_per_op('remove', successful=True):.2f}  "
              f"contains {res.psync_per_op('contains'):.2f}")

# %% [markdown]
# Contains never flushes once the set is warm, and every successful update
# costs one psync in both variants. Link-free updates that fail can still flush
# on behalf of another thread. Failed SOFT updates never do.
#
# The same numbers go to CSV, one row per iteration:

# %%
buf = io.StringIO()
emit_csv(results[:2], buf)
print(buf.getvalue())
