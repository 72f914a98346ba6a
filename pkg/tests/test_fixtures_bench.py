from pathlib import Path

import numpy as np
import pytest

from taskdb import bench, kernels
from taskdb.backends.zoo import IMAGE_SHAPE, SERIES_LEN
from taskdb.executor.table import load_table, save_table
from taskdb.fixtures import big_product_table, demo_tables, review_table


def test_fixtures_deterministic_and_shaped():
    a, b = demo_tables(), demo_tables()
    for name in a:
        assert a[name].column_names == b[name].column_names
        for col in a[name].column_names:
            assert a[name].columns[col] == b[name].columns[col]
    assert a["product"].columns["img"][0].shape == IMAGE_SHAPE
    assert a["series"].columns["window"][0].shape == (SERIES_LEN,)
    r = review_table(50, n_users=5, n_products=3)
    assert set(r.columns["uid"]) <= set(range(1, 6)) and set(r.columns["pid"]) <= set(range(1, 4))
    assert big_product_table(25).row_count == 25


def test_fixture_tables_survive_disk(tmp_path):
    t = demo_tables()["review"]
    back = load_table(save_table(t, tmp_path))
    assert back.columns == t.columns


@pytest.mark.parametrize("values,expected", [([3, 2, 1, 2, 3], True), ([1, 1, 1], True), ([1, 2, 1, 2], False),
                                             ([5], True), ([], True), ([2, 1, 2, 1], False)])
def test_is_unimodal(values, expected):
    assert bench.is_unimodal(values) is expected


def test_report_rendering():
    rep = bench.BenchReport("demo", ["a", "b"], [[1, 0.5], [22, 1 / 3]], ["hello"])
    csv = rep.to_csv()
    assert csv.splitlines() == ["a,b", "1,0.5", f"22,{1 / 3!r}"]
    txt = rep.to_text()
    assert txt.startswith("== demo ==") and "note: hello" in txt
    assert rep.column("a") == [1, 22]


def test_devices_suite_agrees_with_choice():
    rep = bench.bench_devices()
    for prof, n, cpu, gpu, chosen in rep.rows:
        assert chosen == ("cpu" if cpu <= gpu else "gpu")
    from taskdb.backends.cost import CPU_DEFAULT, GPU_DEFAULT, find_crossover
    from taskdb.backends.zoo import PROFILES
    x = find_crossover(PROFILES["series"], CPU_DEFAULT, GPU_DEFAULT)
    for prof, n, _, _, chosen in rep.rows:
        if prof == "series":
            assert chosen == ("gpu" if n >= x else "cpu")


def test_cache_suite():
    rep = bench.bench_cache(n_reviews=300)
    calls = dict(zip(rep.column("run"), rep.column("extractor_calls")))
    assert calls["no-cache"] == 300 and calls["warm"] == 0
    assert "identical results across runs: True" in rep.notes


def test_kernels_suite_lists_every_backend():
    rep = bench.bench_kernels(repeats=1)
    from taskdb import kernels
    assert set(rep.column("backend")) == set(kernels.available_backends())
    assert all(v > 0 for v in rep.column("best_ms"))


def test_failing_suite_is_flagged(tmp_path, monkeypatch):
    def boom(**kw):
        raise RuntimeError("no luck")
    monkeypatch.setattr(bench, "bench_storage", boom)
    reps = bench.run_suites(["storage", "devices"], tmp_path)
    assert reps[0].notes == ["partial: suite failed"] and "RuntimeError" in reps[0].rows[0][0]
    assert reps[1].rows and (tmp_path / "devices.csv").exists() and (tmp_path / "storage.txt").exists()


def test_simulated_suites_are_deterministic():
    assert bench.bench_devices().to_csv() == bench.bench_devices().to_csv()
    assert bench.bench_storage().to_csv() == bench.bench_storage().to_csv()
    assert np.isfinite(bench.bench_batch(executed_rows=64).column("objective_s")).all()


def test_benchmark_script_runs_and_backends_agree(tmp_path, capsys):
    import importlib.util

    path = Path(__file__).resolve().parent.parent / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels_script", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    assert mod.main(["--repeats", "1", "--csv", str(tmp_path / "k.csv")]) == 0
    out = capsys.readouterr().out
    assert "hash_features" in out
    if "compiled" in kernels.available_backends():
        assert "hash_features identical: True" in out
    assert (tmp_path / "k.csv").read_text().startswith("kernel,backend,best_ms")
