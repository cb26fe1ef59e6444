import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from apswitch.harness import (AGGREGATE_COLUMNS, COLUMNS, DEFAULT_SE_GRID, ExperimentPlan, ResultRow,
                              aggregate, aggregates_path, drop_seed, energy_efficiency, main, read_rows,
                              run_experiment)
from apswitch.scenario import ScenarioConfig

TINY = ScenarioConfig(num_users=2, num_aps=4, area_side=200.0, num_channel_realizations=60)
GRID = (0.5, 1.0, 6.0)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "rows.csv"
    plan = ExperimentPlan(config=TINY, se_grid=GRID, num_drops=3, output=out, timing=False)
    return plan, run_experiment(plan), out


class TestMetrics:
    def test_energy_efficiency_example(self):
        assert energy_efficiency(1.0, 20e6, 16.2, num_users=7) == pytest.approx(140 / 16.2)
        assert energy_efficiency(1.0, 20e6, 16.2, num_users=7) == pytest.approx(8.64, abs=5e-3)

    @given(st.floats(0.01, 5.0), st.floats(0.1, 100.0), st.integers(1, 10))
    def test_doubling_power_halves(self, se, power, users):
        assert energy_efficiency(se, 20e6, 2 * power, users) == pytest.approx(
            energy_efficiency(se, 20e6, power, users) / 2)

    def test_per_user_targets(self):
        assert energy_efficiency([1.0, 2.0], 1e6, 3.0) == pytest.approx(1.0)

    def test_zero_se(self):
        assert energy_efficiency(0.0, 20e6, 10.0, num_users=7) == 0.0

    @pytest.mark.parametrize("power", [0.0, -1.0])
    def test_rejects_non_positive_power(self, power):
        with pytest.raises(ValueError):
            energy_efficiency(1.0, 20e6, power, num_users=7)

    def test_scalar_needs_user_count(self):
        with pytest.raises(ValueError):
            energy_efficiency(1.0, 20e6, 5.0)


class TestPlan:
    def test_default_grid(self):
        np.testing.assert_allclose(DEFAULT_SE_GRID, np.arange(1, 10) * 0.25)
        assert ExperimentPlan().num_drops == 50

    @pytest.mark.parametrize("kwargs", [dict(se_grid=(0.5, -1.0)), dict(se_grid=()), dict(num_drops=0),
                                        dict(methods="neither"), dict(workers=0)])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            ExperimentPlan(**kwargs)

    def test_fingerprint_ignores_output(self, tmp_path):
        a = ExperimentPlan(config=TINY, output=tmp_path / "a.csv")
        b = ExperimentPlan(config=TINY, output=tmp_path / "b.csv", cache_dir=tmp_path)
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != ExperimentPlan(config=TINY.replace(rng_seed=1)).fingerprint()

    def test_drop_seeds(self):
        seeds = [drop_seed(0, d) for d in range(100)]
        assert len(set(seeds)) == 100
        assert seeds == [drop_seed(0, d) for d in range(100)]
        assert drop_seed(1, 0) != drop_seed(0, 0)


class TestRunExperiment:
    def test_schema(self, tiny_run):
        plan, rows, out = tiny_run
        with open(out, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh))
        assert tuple(header) == COLUMNS
        assert COLUMNS[:13] == ("drop_id", "seed", "target_se", "method", "measuring_aps", "serving_aps",
                                "transmit_power", "scaled_transmit_power", "total_power",
                                "achieved_min_se", "energy_efficiency", "conic_solves", "wall_time")
        assert len(rows) == 3 * len(GRID) * 2
        assert [r.drop_id for r in rows] == sorted(r.drop_id for r in rows)

    def test_rows_consistent(self, tiny_run):
        _, rows, _ = tiny_run
        for row in rows:
            if row.status != "ok":
                continue
            assert row.total_power == pytest.approx(TINY.fixed_ap_power * row.serving_aps
                                                    + row.scaled_transmit_power, abs=1e-9)
            assert row.scaled_transmit_power == pytest.approx(TINY.pa_inefficiency * row.transmit_power)
            assert row.energy_efficiency == pytest.approx(
                TINY.bandwidth * TINY.num_users * row.target_se / row.total_power / 1e6)
            assert row.achieved_min_se >= row.target_se - 1e-6
            assert row.serving_aps <= row.measuring_aps
            if row.method == "mbsocp":
                assert row.measuring_aps == TINY.num_aps and row.bnb_nodes >= 0

    def test_skip_rule(self, tiny_run):
        _, rows, _ = tiny_run
        assert any(r.skipped for r in rows)
        for row in rows:
            assert row.skipped == (2.0**row.target_se - 1 > 2.0**row.max_min_se - 1)
            assert row.skipped == (row.status == "skipped")

    def test_optimality_ordering(self, tiny_run):
        _, rows, _ = tiny_run
        by_key = {(r.drop_id, r.target_se, r.method): r for r in rows}
        for (d, se, method), row in by_key.items():
            if method == "proposed" and row.status == "ok":
                assert row.total_power >= by_key[(d, se, "mbsocp")].total_power - 1e-6
        for se in GRID:
            agg = {r["method"]: r for r in aggregate(rows) if r["target_se"] == se}
            if agg["proposed"]["count"]:
                assert agg["proposed"]["total_power_mean"] >= agg["mbsocp"]["total_power_mean"] - 1e-6

    def test_aggregates_file(self, tiny_run):
        _, rows, out = tiny_run
        path = aggregates_path(out)
        assert path.name == "rows_aggregates.csv"
        with open(path, newline="", encoding="utf-8") as fh:
            records = list(csv.DictReader(fh))
        assert tuple(records[0]) == AGGREGATE_COLUMNS
        assert len(records) == len(GRID) * 2

    def test_byte_identical_rerun(self, tiny_run, tmp_path):
        plan, _, out = tiny_run
        again = tmp_path / "again.csv"
        run_experiment(ExperimentPlan(config=TINY, se_grid=GRID, num_drops=3, output=again, timing=False))
        assert again.read_bytes() == out.read_bytes()
        assert aggregates_path(again).read_bytes() == aggregates_path(out).read_bytes()

    def test_read_rows_round_trip(self, tiny_run):
        _, rows, out = tiny_run
        parsed = read_rows(out)
        assert len(parsed) == len(rows)
        for rec, row in zip(parsed, rows):
            assert rec["method"] == row.method and rec["drop_id"] == row.drop_id
            if row.total_power is not None:
                assert rec["total_power"] == row.total_power

    def test_cache_reused(self, tmp_path):
        plan = ExperimentPlan(config=TINY, se_grid=(0.5,), num_drops=2, methods="proposed",
                              cache_dir=tmp_path / "cache", timing=False)
        first = run_experiment(plan)
        files = sorted((tmp_path / "cache").iterdir())
        assert len(files) == 2
        assert run_experiment(plan) == first

    def test_workers_match_serial(self, tmp_path):
        serial = ExperimentPlan(config=TINY, se_grid=(0.5,), num_drops=2, methods="proposed", timing=False)
        parallel = ExperimentPlan(config=TINY, se_grid=(0.5,), num_drops=2, methods="proposed", timing=False,
                                  workers=2)
        assert run_experiment(serial) == run_experiment(parallel)

    def test_single_method(self):
        rows = run_experiment(ExperimentPlan(config=TINY, se_grid=(0.5,), num_drops=1, methods="proposed"))
        assert {r.method for r in rows} == {"proposed"}

    def test_failure_rows(self):
        rows = [ResultRow(0, 1, 0.5, "proposed", status="infeasible"),
                ResultRow(0, 1, 0.5, "mbsocp", total_power=10.0, serving_aps=2)]
        agg = aggregate(rows)
        assert all(r["count"] == 0 for r in agg)


class TestCli:
    def test_end_to_end(self, tmp_path):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("num_users: 2\nnum_aps: 4\narea_side: 200\n")
        out = tmp_path / "out.csv"
        code = main(["--config", str(cfg), "--seed", "5", "--se-grid", "0.5,1.0", "--drops", "1",
                     "--realizations", "40", "--out", str(out), "--timing", "off", "--methods", "both"])
        assert code == 0
        rows = read_rows(out)
        assert len(rows) == 4
        assert all(r["wall_time"] == 0.0 for r in rows if r["status"] == "ok")
        assert aggregates_path(out).exists()

    def test_no_aggregates(self, tmp_path):
        out = tmp_path / "out.csv"
        main(["--se-grid", "0.5", "--drops", "1", "--realizations", "20", "--out", str(out),
              "--methods", "proposed", "--emit-aggregates", "false"])
        assert out.exists() and not aggregates_path(out).exists()

    def test_bad_grid(self, tmp_path, capsys):
        assert main(["--se-grid", "0.5,-1", "--out", str(tmp_path / "x.csv")]) == 2
        assert "error" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("nonsense: 3\n")
        assert main(["--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == 2
        assert "nonsense" in capsys.readouterr().err
