import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inr_change import change, network as nn
from inr_change.change import (AmbiguousOrderingError, ChangeField, DegenerateDataError, GmmParams,
                               ModeMismatchError, decode_dz, fit_gmm3, label_changes, regular_grid)
from inr_change.core_types import PointCloud, fit_normalizer
from inr_change.encoding import Encoding
from inr_change.synth import ADDITION, DELETION, UNCHANGED
from inr_change.training import TrainConfig, fit


def _norm(include_time):
    pc = PointCloud(np.array([[0, 0, 100.0], [50, 40, 130.0]]))
    return fit_normalizer(pc, include_time=include_time)


def _gmm(means, var=1.0):
    return GmmParams(np.full(3, 1 / 3), np.asarray(means, float), np.full(3, var), [])


class TestDecode:
    def test_time_invariant_model_gives_zero(self, rng):
        m = nn.build_model("default", Encoding.identity(3), "tanh", max_width=8, seed=1)
        m.params[0]["W"][:, 2] = 0.0
        fld = decode_dz([m], _norm(True), rng.uniform(0, 50, (40, 2)), "S")
        assert np.all(fld.dz == 0.0)

    def test_copied_dual_models_give_zero(self, rng):
        m = nn.build_model("default", Encoding.fourier(2, 8, 2.0), "sine", max_width=8)
        fld = decode_dz([m, m.copy()], _norm(False), rng.uniform(0, 50, (40, 2)), "D")
        assert np.all(fld.dz == 0.0)

    def test_linear_head_difference(self, rng):
        # f(x, y, t) = a.u + c t + b  =>  dz = c * (t1 - t0) / z_scale, exactly
        layers = [nn.LayerSpec("fc", 1, "none")]
        m = nn.FieldModel(Encoding.identity(3), layers, [{"W": np.array([[0.3, -0.1, 0.25]]), "b": np.array([0.2])}])
        norm = _norm(True)
        fld = decode_dz([m], norm, rng.uniform(0, 50, (10, 2)), "S")
        np.testing.assert_allclose(fld.dz, 0.25 * 2 / norm.scale[2], rtol=1e-12)

    def test_mode_mismatch(self, rng):
        m2 = nn.build_model("default", Encoding.identity(2), max_width=4)
        m3 = nn.build_model("default", Encoding.identity(3), max_width=4)
        xy = rng.uniform(0, 1, (3, 2))
        with pytest.raises(ModeMismatchError):
            decode_dz([m2, m2], _norm(True), xy, "S")
        with pytest.raises(ModeMismatchError):
            decode_dz([m3], _norm(False), xy, "D")

    def test_box_scene_recovers_step(self):
        r = np.random.default_rng(0)
        clouds = []
        for t in (0, 1):
            xy = r.uniform(0, 1, (3000, 2))
            inside = np.all((xy > 0.3) & (xy < 0.7), axis=1)
            clouds.append(PointCloud(np.column_stack([xy, 5.0 * inside * t]), t))
        cfg = TrainConfig(mode="D", epochs=60, batch_size=256, lr=3e-3, rff_features=64, rff_sigma=0.6,
                          max_width=64, lr_decay=0.97, early_stop_patience=40)
        res = fit(clouds, cfg)
        g = regular_grid((0, 1, 0, 1), 0.05).xy
        fld = decode_dz(res.models, res.normalizer, g, "D")
        core = np.all((g > 0.4) & (g < 0.6), axis=1)
        outside = np.any((g < 0.2) | (g > 0.8), axis=1)
        assert np.all(np.abs(fld.dz[core] - 5.0) < 0.25)
        assert np.all(np.abs(fld.dz[outside]) < 0.25)


class TestGrid:
    def test_unit_square_half_resolution(self):
        g = regular_grid((0, 1, 0, 1), 0.5)
        np.testing.assert_array_equal(g.xy, [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])

    def test_resolution_larger_than_extent(self):
        with pytest.raises(ValueError):
            regular_grid((0, 1, 0, 1), 2.0)

    def test_raster_size(self):
        assert regular_grid((0, 100, 0, 100), 0.5).shape == (200, 200)

    def test_bounds_roundtrip_through_normalizer(self, rng):
        pc = PointCloud(rng.uniform(-30, 70, (100, 3)))
        norm = fit_normalizer(pc)
        lo = norm.invert(np.array([[-1.0, -1.0]]), axes=(0, 1))[0]
        hi = norm.invert(np.array([[1.0, 1.0]]), axes=(0, 1))[0]
        xmin, xmax, ymin, ymax = pc.bounds()
        np.testing.assert_allclose([lo[0], hi[0], lo[1], hi[1]], [xmin, xmax, ymin, ymax], rtol=1e-12)


class TestGmm:
    def test_recovers_three_modes(self):
        r = np.random.default_rng(0)
        x = np.concatenate([r.normal(mu, 0.5, 1000) for mu in (-10, 0, 10)])
        g = fit_gmm3(x)
        np.testing.assert_allclose(np.sort(g.means), [-10, 0, 10], atol=0.2)
        assert abs(g.weights.sum() - 1) < 1e-9 and g.converged

    def test_degenerate(self):
        with pytest.raises(DegenerateDataError, match="no change structure"):
            fit_gmm3(np.full(100, 4.2))

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            fit_gmm3(np.arange(10.0))

    def test_dominant_value_with_tied_quantiles(self, rng):
        x = np.concatenate([np.zeros(900), rng.normal(8, 0.3, 50), rng.normal(-8, 0.3, 50)])
        g = fit_gmm3(x)
        assert np.all(np.diff(g.log_likelihood) >= -1e-9 * np.abs(g.log_likelihood[1:]))
        assert np.all(g.variances >= change.VAR_FLOOR)

    @given(st.integers(0, 10 ** 6), st.integers(30, 400), st.floats(0.1, 20))
    def test_em_monotone_and_valid(self, seed, n, spread):
        r = np.random.default_rng(seed)
        x = np.concatenate([r.normal(0, 1, n), r.normal(spread, 1, n // 3 + 1), r.standard_cauchy(5)])
        g = fit_gmm3(x, seed=seed)
        ll = np.array(g.log_likelihood)
        assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[1:]) - 1e-9)
        assert abs(g.weights.sum() - 1) < 1e-9
        assert np.all(g.variances >= change.VAR_FLOOR)


class TestLabels:
    def _field(self, dz):
        dz = np.asarray(dz, float)
        return ChangeField(np.zeros((len(dz), 2)), dz, "S")

    def test_nearest_mean_addition(self):
        assert label_changes(self._field([8.0]), _gmm([-6, 0.1, 7])).labels[0] == ADDITION

    def test_small_change_filtered(self):
        lab = label_changes(self._field([1.5, -1.9]), _gmm([1.0, 1.5, 3.0], 0.01))
        assert np.all(lab.labels == UNCHANGED)

    def test_filter_disabled(self):
        lab = label_changes(self._field([1.5]), _gmm([-1.5, 0.0, 1.5], 0.01), None)
        assert lab.labels[0] == ADDITION

    def test_symmetric_outer_responsibilities(self):
        lab = label_changes(self._field([0.0]), _gmm([-5, 0, 5], 4.0))
        assert lab.responsibilities[0, 0] == lab.responsibilities[0, 2]

    def test_equal_means(self):
        with pytest.raises(AmbiguousOrderingError):
            label_changes(self._field([0.0]), _gmm([1.0, 1.0, 3.0]))

    @given(st.permutations([0, 1, 2]), st.lists(st.floats(-20, 20), min_size=1, max_size=30))
    def test_permutation_invariance_and_idempotence(self, perm, dz):
        g = GmmParams(np.array([0.2, 0.5, 0.3]), np.array([-6.0, 0.2, 7.0]), np.array([2.0, 0.5, 3.0]), [])
        p = list(perm)
        g2 = GmmParams(g.weights[p], g.means[p], g.variances[p], [])
        fld = self._field(dz)
        a, b = label_changes(fld, g), label_changes(fld, g2)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.labels, label_changes(fld, g).labels)
        assert set(a.labels[np.abs(fld.dz) < 2.0]) <= {UNCHANGED}

    def test_deletion_for_large_negative(self):
        assert label_changes(self._field([-9.0]), _gmm([-6, 0.1, 7])).labels[0] == DELETION


class TestOutputs:
    def test_change_csv_roundtrip(self, tmp_path, rng):
        dz = rng.normal(0, 5, 40)
        fld = ChangeField(rng.uniform(0, 9, (40, 2)), dz, "S")
        lab = label_changes(fld, fit_gmm3(np.concatenate([dz, rng.normal(0, 5, 40)])))
        z = rng.normal(size=40)
        change.write_change_csv(tmp_path / "c.csv", fld, lab, z)
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "x,y,z,dz,label,resp_del,resp_unch,resp_add"
        back = change.read_change_csv(tmp_path / "c.csv")
        np.testing.assert_array_equal(back["dz"], dz)
        np.testing.assert_array_equal(back["label"], lab.labels)

    def test_pgm_north_up_and_sidecar(self, tmp_path):
        g = regular_grid((0, 3, 0, 2), 1.0)
        vals = np.arange(6.0)  # row 0 = lowest y
        change.write_pgm(tmp_path / "a.pgm", vals, g, 0.0, 5.0)
        img = change.read_pgm(tmp_path / "a.pgm")
        assert img.shape == (2, 3)
        np.testing.assert_array_equal(img[1], [0, 13107, 26214])  # bottom row on the last line
        meta = json.loads((tmp_path / "a.pgm.json").read_text())
        back = meta["value_min"] + img * meta["value_per_level"]
        np.testing.assert_allclose(back[::-1].ravel(), vals, atol=1e-9)
        assert meta["y_origin_top"] == 2.0
