import io
import subprocess
import sys

import numpy as np
import pytest

from durasets.bench import (CSV_COLUMNS, WorkloadSpec, build, emit_csv, main, op_stream, read_csv,
                            run, stress)


def count_run(structure="soft-list", read_pct=50.0, threads=1, ops=400, seed=3, **kw):
    return run(WorkloadSpec(structure, threads, key_range=64, read_pct=read_pct, seed=seed,
                            ops_per_thread=ops, **kw))


def test_prefill_is_half_the_range():
    s = build(WorkloadSpec("lf-hash", key_range=100, seed=1))
    assert len(s.keys()) == 50 and all(0 <= k < 100 for k in s.keys())
    assert s.bucket_count == 64   # 50 rounded up to a power of two


def test_op_stream_mix():
    kinds, keys = op_stream(np.random.default_rng(0), 20000, 10, 90.0)
    frac = np.bincount(kinds, minlength=3) / 20000
    assert abs(frac[2] - 0.9) < 0.01 and abs(frac[0] - frac[1]) < 0.01
    assert set(keys) == set(range(10))


@pytest.mark.parametrize("structure", ["soft-list", "soft-hash", "lf-list", "lf-hash"])
def test_read_only_runs_issue_no_psyncs(structure):
    res = count_run(structure, read_pct=100.0)
    assert res.psync_per_op() == 0.0
    assert res.iterations[0].report.ops == 400


def test_soft_update_only_is_one_psync_per_successful_update():
    res = count_run("soft-list", read_pct=0.0, ops=1000)
    r = res.iterations[0].report
    assert r.ops_by_type["contains"] == 0
    assert res.psync_per_op(successful=True) == 1.0
    assert res.psync_per_op("insert", successful=True) == 1.0
    assert res.psync_per_op("remove", successful=True) == 1.0
    ok = r.ok_by_type["insert"] + r.ok_by_type["remove"]
    assert res.psync_per_op() == pytest.approx(ok / r.ops)
    assert r.max_psyncs["insert"] == 1 and r.max_psyncs["remove"] == 1


def test_link_free_contains_is_free_after_warm_up():
    spec = WorkloadSpec("lf-list", 1, key_range=64, read_pct=100.0, ops_per_thread=300)
    s = build(spec)
    rep = stress(s, 1, 64, 100.0, ops_per_thread=300)
    assert rep.psyncs_by_type["contains"] == 0


def test_link_free_contains_without_warm_up_is_also_free_after_prefill():
    # prefill inserts already set the insert flag of every present key
    spec = WorkloadSpec("lf-list", 1, key_range=64, read_pct=100.0, ops_per_thread=300, warmup=False)
    rep = stress(build(spec), 1, 64, 100.0, ops_per_thread=300)
    assert rep.psyncs_by_type["contains"] == 0


def test_csv_has_header_and_one_row_and_round_trips():
    res = count_run()
    buf = io.StringIO()
    emit_csv([res], buf)
    text = buf.getvalue()
    assert len(text.splitlines()) == 2
    assert text.splitlines()[0].split(",") == list(CSV_COLUMNS)
    rows = read_csv(io.StringIO(text))
    assert rows[0]["structure"] == "soft-list"
    assert int(rows[0]["ops"]) == res.iterations[0].report.ops
    assert float(rows[0]["psyncs_per_op"]) == pytest.approx(res.psync_per_op(), abs=1e-6)


def test_same_seed_same_per_thread_counts():
    a = count_run(threads=3, seed=9)
    b = count_run(threads=3, seed=9)
    ra, rb = a.iterations[0].report, b.iterations[0].report
    assert ra.thread_ops == rb.thread_ops == [400, 400, 400]
    assert ra.ops_by_type == rb.ops_by_type
    c = count_run(threads=3, seed=10)
    assert c.iterations[0].report.ops_by_type != ra.ops_by_type


def test_total_ops_is_sum_of_thread_ops():
    res = run(WorkloadSpec("lf-hash", 2, duration=0.2, key_range=32, read_pct=80))
    r = res.iterations[0].report
    assert r.ops == sum(r.thread_ops) == sum(r.ops_by_type.values())
    assert all(n > 0 for n in r.thread_ops)


def test_confidence_interval_over_iterations():
    res = count_run(iterations=3, ops=100)
    lo, hi = res.mops_ci()
    assert len(res.iterations) == 3
    assert lo <= res.mops <= hi
    assert "Mops/s" in res.summary()


def test_sweeps_run_at_quiescent_points():
    s = build(WorkloadSpec("soft-list", key_range=32))
    rep = stress(s, 4, 32, 50.0, ops_per_thread=250, sweep_every=200, check=s.check_invariants)
    assert rep.sweeps == 1000 // 200 + 1
    assert rep.sweep_violations == [] and rep.errors == []


def test_psync_budget_overruns_are_reported():
    s = build(WorkloadSpec("lf-list", key_range=16))
    rep = stress(s, 1, 16, 0.0, ops_per_thread=50, psync_budget={"insert": 0, "remove": 0})
    assert rep.budget_violations


def test_worker_errors_surface_in_the_report():
    s = build(WorkloadSpec("soft-list", key_range=16))
    rep = stress(s, 2, 2 ** 64, 50.0, ops_per_thread=10)   # keys outside int64 break the codec
    assert rep.errors


@pytest.mark.parametrize("spec", [
    WorkloadSpec("btree"), WorkloadSpec(threads=0), WorkloadSpec(duration=0),
    WorkloadSpec(key_range=1), WorkloadSpec(read_pct=101), WorkloadSpec(iterations=0),
    WorkloadSpec(ops_per_thread=0),
])
def test_invalid_specs(spec):
    with pytest.raises(ValueError):
        spec.validate()


def test_cli_writes_csv(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert main(["--structure", "lf-list", "--threads", "2", "--range", "32", "--reads", "90",
                 "--ops-per-thread", "50", "--out", str(out)]) == 0
    rows = read_csv(open(out))
    assert len(rows) == 1 and rows[0]["thread_ops"] == "50;50"
    assert "Mops/s" in capsys.readouterr().out


def test_cli_rejects_bad_input_with_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["--structure", "skiplist"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["--threads", "many"])
    assert e.value.code == 2


def test_module_entry_point():
    p = subprocess.run([sys.executable, "-m", "durasets.bench", "--structure", "soft-hash", "--range", "16",
                        "--ops-per-thread", "20"], capture_output=True, text=True, timeout=60)
    assert p.returncode == 0
    assert p.stdout.splitlines()[0].startswith("structure,threads")
    bad = subprocess.run([sys.executable, "-m", "durasets.bench", "--reads", "150"],
                         capture_output=True, text=True, timeout=60)
    assert bad.returncode == 2 and "read percentage" in bad.stderr
