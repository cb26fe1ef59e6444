import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from apswitch.scenario import (NetworkGeometry, ScenarioConfig, dbm_to_watt, generate_geometry,
                               pathloss_db)


class TestScenarioConfig:
    def test_reference_defaults(self):
        cfg = ScenarioConfig()
        assert (cfg.num_users, cfg.num_aps, cfg.antennas_per_ap) == (7, 15, 4)
        assert (cfg.fixed_ap_power, cfg.pa_inefficiency, cfg.max_tx_power) == (5.0, 2.0, 1.0)
        assert cfg.dl_noise_power == pytest.approx(10 ** (-12.4))
        assert cfg.ul_noise_power == cfg.dl_noise_power
        assert cfg.shadow_std == 4.0
        assert cfg.bandwidth == 20e6

    def test_dbm_conversion(self):
        assert dbm_to_watt(30.0) == pytest.approx(1.0)
        assert dbm_to_watt(0.0) == pytest.approx(1e-3)

    @pytest.mark.parametrize("field,value", [("num_users", 0), ("num_aps", 0), ("antennas_per_ap", 0),
                                             ("num_channel_realizations", 0), ("fixed_ap_power", 0.0),
                                             ("max_tx_power", -1.0), ("area_side", 0.0),
                                             ("dl_noise_power", float("nan")), ("shadow_std", -1.0)])
    def test_rejects_invalid(self, field, value):
        with pytest.raises(ValueError):
            ScenarioConfig(**{field: value})

    def test_from_file_partial_keys(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("num_aps: 6\nfixed_ap_power: 2.5\n")
        cfg = ScenarioConfig.from_file(path)
        assert cfg.num_aps == 6 and isinstance(cfg.num_aps, int)
        assert cfg.fixed_ap_power == 2.5
        assert cfg.num_users == 7

    def test_from_file_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"num_users": 3}))
        assert ScenarioConfig.from_file(path).num_users == 3

    def test_unknown_key_is_error(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("num_aps: 6\nbogus: 1\n")
        with pytest.raises(ValueError, match="bogus"):
            ScenarioConfig.from_file(path)

    def test_json_round_trip(self):
        cfg = ScenarioConfig(num_aps=9, rng_seed=4)
        assert ScenarioConfig.from_mapping(json.loads(cfg.to_json())) == cfg


class TestPathLoss:
    def test_unit_distance(self):
        cfg = ScenarioConfig()
        assert pathloss_db(1.0, cfg) == pytest.approx(-35.4)
        geo = NetworkGeometry.from_positions([[0, 0]], [[1, 0]], cfg)
        assert geo.large_scale[0, 0] == pytest.approx(10 ** -3.54)

    def test_pythagoras(self):
        geo = NetworkGeometry.from_positions([[0, 0]], [[3, 4]], ScenarioConfig())
        assert geo.distances[0, 0] == pytest.approx(5.0)

    def test_floor_clamps(self):
        cfg = ScenarioConfig()
        assert pathloss_db(0.0, cfg) == pathloss_db(cfg.min_distance, cfg)
        geo = NetworkGeometry.from_positions([[1, 1]], [[1, 1]], cfg)
        assert np.isfinite(geo.large_scale).all()

    @given(st.floats(1.0, 1e4), st.floats(1.0, 1e4))
    def test_strictly_decreasing(self, d1, d2):
        cfg = ScenarioConfig()
        if d1 == d2:
            return
        near, far = sorted((d1, d2))
        assert pathloss_db(near, cfg) > pathloss_db(far, cfg)

    def test_angle(self):
        geo = NetworkGeometry.from_positions([[0, 0]], [[0, 10]], ScenarioConfig())
        assert geo.nominal_angles[0, 0] == pytest.approx(np.pi / 2)


class TestGenerateGeometry:
    def test_shapes_and_bounds(self):
        cfg = ScenarioConfig()
        geo = generate_geometry(cfg, np.random.default_rng(0))
        assert geo.distances.shape == geo.large_scale.shape == (15, 7)
        for pos in (geo.ap_positions, geo.user_positions):
            assert pos.min() >= 0 and pos.max() <= 500
        assert np.all(geo.large_scale > 0)

    def test_distances_match_positions(self):
        geo = generate_geometry(ScenarioConfig(), np.random.default_rng(1))
        diff = geo.ap_positions[:, None, :] - geo.user_positions[None, :, :]
        np.testing.assert_allclose(geo.distances, np.linalg.norm(diff, axis=-1))

    def test_deterministic(self):
        cfg = ScenarioConfig()
        a = generate_geometry(cfg, np.random.default_rng(7))
        b = generate_geometry(cfg, np.random.default_rng(7))
        for name in ("ap_positions", "user_positions", "large_scale", "nominal_angles"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_immutable(self):
        geo = generate_geometry(ScenarioConfig(), np.random.default_rng(0))
        with pytest.raises(ValueError):
            geo.large_scale[0, 0] = 1.0

    def test_shadowing_matches_config(self):
        cfg = ScenarioConfig(num_aps=200, num_users=50)
        geo = generate_geometry(cfg, np.random.default_rng(2))
        shadow = 10 * np.log10(geo.large_scale) - pathloss_db(geo.distances, cfg)
        assert abs(shadow.mean()) < 0.1
        assert shadow.std() == pytest.approx(4.0, rel=0.03)

    def test_positions_uniform(self):
        cfg = ScenarioConfig(num_aps=10, num_users=10)
        rng = np.random.default_rng(3)
        pts = np.concatenate([generate_geometry(cfg, rng).user_positions for _ in range(500)])
        counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=5, range=[[0, 500], [0, 500]])
        assert sps.chisquare(counts.ravel()).pvalue > 0.01
