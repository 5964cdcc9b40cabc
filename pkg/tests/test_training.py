import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inr_change import network as nn
from inr_change.config import ConfigError
from inr_change.core_types import PointCloud, split_train_val
from inr_change.encoding import Encoding
from inr_change.training import (OptimizerState, TrainConfig, _evaluate_mse, batch_loss, fit,
                                 flat_grads, optimizer_step, prepare_single, sample_tv_points,
                                 trust_ratio)

from oracles import fd_param_grad, flatten, rel_err


def _linear3(w, b=0.0):
    layers = [nn.LayerSpec("fc", 1, "none")]
    return nn.FieldModel(Encoding.identity(3), layers,
                         [{"W": np.array([w], dtype=float), "b": np.array([b], dtype=float)}])


def _cfg(**kw):
    return TrainConfig(**kw)


class TestBatchLoss:
    def test_plain_mse_when_unregularised(self, rng):
        m = nn.build_model("default", Encoding.fourier(3, 8, 1.0), "tanh", max_width=8)
        V, z = rng.uniform(-1, 1, (16, 3)), rng.normal(size=16)
        loss, _, parts, _ = batch_loss(m, V, z, _cfg())
        assert loss == float(np.mean((m(V) - z) ** 2)) == parts.data

    def test_perfect_model(self, rng):
        m = _linear3([0.3, -0.2, 0.1], 0.4)
        V = rng.uniform(-1, 1, (10, 3))
        loss, grads, _, _ = batch_loss(m, V, m(V), _cfg())
        assert loss == 0.0 and not np.any(flatten(grads))

    def test_time_constant_model_has_zero_td(self, rng):
        m = _linear3([0.3, -0.2, 0.0], 0.4)
        V = rng.uniform(-1, 1, (10, 3))
        _, _, parts, _ = batch_loss(m, V, np.zeros(10), _cfg(lambda_td=1.0), tv_points=V)
        assert parts.td == 0.0

    def test_linear_tv_hand_value(self):
        m = _linear3([2.0, 0.0, 0.0])
        V = np.array([[0.25, 0.2, -1.0]])
        z = np.array([1.0])
        loss, _, parts, _ = batch_loss(m, V, z, _cfg(lambda_tv=1.0), tv_points=V)
        assert parts.data == 0.25 and parts.tv == 2.0 and loss == 2.25

    def test_td_rejected_in_mode_d(self):
        with pytest.raises(ConfigError):
            _cfg(mode="D", lambda_td=0.1)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            batch_loss(_linear3([1, 0, 0]), np.empty((0, 3)), np.empty(0), _cfg())

    @pytest.mark.parametrize("lam_tv", [0.0, 0.1, 1.0])
    @pytest.mark.parametrize("lam_td", [0.0, 0.1, 1.0])
    @pytest.mark.parametrize("act", ["tanh", "sine"])
    def test_total_gradient_matches_finite_differences(self, lam_tv, lam_td, act, rng):
        m = nn.build_model("default", Encoding.fourier(3, 3, 1.0, seed=5), act,
                           siren_scale=3.0, seed=1, max_width=5)
        V, z = rng.uniform(-1, 1, (6, 3)), rng.normal(size=6)
        tv = sample_tv_points(V, 4, 0.05, seed=2)
        cfg = _cfg(lambda_tv=lam_tv, lambda_td=lam_td)
        _, grads, _, _ = batch_loss(m, V, z, cfg, tv)
        num = fd_param_grad(m, lambda: batch_loss(m, V, z, cfg, tv)[0])
        assert rel_err(flatten(grads), flatten(num)) < 1e-3


class TestTvSampling:
    def test_zero_noise_returns_cloud_rows(self, rng):
        X = rng.uniform(-1, 1, (30, 3))
        S = sample_tv_points(X, 50, 0.0, seed=1)
        assert all(any(np.array_equal(s, x) for x in X) for s in S)

    def test_time_not_perturbed(self, rng):
        X = np.column_stack([rng.uniform(-1, 1, (30, 2)), np.where(np.arange(30) % 2, 1.0, -1.0)])
        assert set(sample_tv_points(X, 200, 0.3, seed=1)[:, 2]) <= {-1.0, 1.0}

    def test_count_zero_rejected_by_config(self):
        with pytest.raises(ConfigError):
            _cfg(tv_sample_count=0)

    def test_sample_mean_clt_bound(self, rng):
        X = rng.uniform(-1, 1, (5000, 3))
        S = sample_tv_points(X, 1000, 0.0, seed=9)
        bound = 3 * X.std(axis=0) / np.sqrt(1000)
        assert np.all(np.abs(S.mean(axis=0) - X.mean(axis=0)) < bound)

    def test_deterministic(self, rng):
        X = rng.uniform(-1, 1, (30, 3))
        assert np.array_equal(sample_tv_points(X, 10, 0.1, 4), sample_tv_points(X, 10, 0.1, 4))


class TestOptimizer:
    def test_zero_gradients(self, rng):
        params = [rng.normal(size=(3, 2)), rng.normal(size=3)]
        before = [p.copy() for p in params]
        st_ = OptimizerState.for_params(params)
        optimizer_step(params, [np.zeros_like(p) for p in params], st_, 0.1)
        assert all(np.array_equal(a, b) for a, b in zip(params, before))
        assert not any(np.any(m) for m in st_.m + st_.v)

    def test_quadratic_converges(self):
        theta = np.array([0.0])
        st_ = OptimizerState.for_params([theta])
        for _ in range(500):
            optimizer_step([theta], [2 * (theta - 3)], st_, 0.1)
        assert abs(theta[0] - 3) < 1e-2

    def test_trust_ratio_formula(self):
        assert trust_ratio(1.0, 2.0, 0.01, 0.0, 0.0) == 0.005

    def test_trust_ratio_zero_param(self):
        assert trust_ratio(0.0, 5.0, 0.01) == 1.0

    def test_non_finite_gradient_skipped(self, rng, caplog):
        params = [rng.normal(size=(2, 2))]
        before = params[0].copy()
        st_ = OptimizerState.for_params(params)
        optimizer_step(params, [np.full((2, 2), np.nan)], st_, 0.1)
        assert np.array_equal(params[0], before) and st_.step == 0 and st_.skipped == 1
        assert "skipped" in caplog.text

    @given(st.floats(1e-6, 1e3), st.floats(0, 1e3), st.floats(1e-4, 1.0), st.floats(0, 1.0))
    def test_trust_ratio_matches_definition(self, pn, un, tc, wd):
        assert trust_ratio(pn, un, tc, wd, 1e-8) == pytest.approx(tc * pn / (un + wd * pn + 1e-8))

    def test_matrix_step_is_scaled_by_trust(self, rng):
        W = rng.normal(size=(4, 4))
        W0 = W.copy()
        st_ = OptimizerState.for_params([W], trust_coef=0.01)
        g = rng.normal(size=(4, 4))
        optimizer_step([W], [g], st_, 1.0)
        u = g / (np.abs(g) + 1e-8)  # first bias-corrected Adam direction
        expected = W0 - 0.01 * np.linalg.norm(W0) / (np.linalg.norm(u) + 1e-8) * u
        np.testing.assert_allclose(W, expected, rtol=1e-12)


def _plane_clouds(rng, n=400, noise=0.0):
    out = []
    for t in (0, 1):
        xy = rng.uniform(0, 50, (n, 2))
        z = 0.1 * xy[:, 0] + 0.2 * xy[:, 1] + rng.normal(0, noise, n)
        out.append(PointCloud(np.column_stack([xy, z]), t))
    return out


class TestFit:
    def test_plane_converges(self, rng):
        cfg = _cfg(encoding="identity", epochs=50, batch_size=128, lr=3e-3, seed=0)
        res = fit(_plane_clouds(rng), cfg)
        assert np.sqrt(res.reports[0].best_val_mse) < 0.01
        assert res.reports[0].epochs <= 50

    def test_default_epochs(self):
        assert TrainConfig().epochs == 50

    def test_zero_patience_stops_at_first_non_improving_epoch(self, rng):
        cfg = _cfg(encoding="identity", epochs=50, batch_size=64, lr=0.05, lr_decay=1.0,
                   early_stop_patience=0, max_width=16)
        rep = fit(_plane_clouds(rng, 200, noise=0.5), cfg).reports[0]
        assert rep.stop_reason == "early-stopped"
        v = rep.val_mse
        assert v[-1] >= min(v[:-1]) and all(b < a for a, b in zip(v[:-2], v[1:-1]))

    def test_restores_best_parameters(self, rng):
        clouds = _plane_clouds(rng, 200, noise=0.3)
        cfg = _cfg(encoding="identity", epochs=12, batch_size=32, lr=0.02, lr_decay=1.0, max_width=16)
        res = fit(clouds, cfg)
        V, z = prepare_single(*clouds, res.normalizer)
        split = split_train_val(len(V), cfg.train_fraction, cfg.seed)
        assert _evaluate_mse(res.models[0], V[split.val], z[split.val]) == min(res.reports[0].val_mse)

    def test_deterministic_reports(self, rng):
        clouds = _plane_clouds(rng, 150)
        cfg = _cfg(epochs=3, batch_size=64, rff_features=8, rff_sigma=1.0, max_width=8,
                   lambda_tv=0.1, lambda_td=0.1, tv_sample_count=16)
        a, b = fit(clouds, cfg), fit(clouds, cfg)
        assert a.reports[0].train_loss == b.reports[0].train_loss
        assert a.reports[0].val_mse == b.reports[0].val_mse

    def test_mode_d_trains_two_independent_models(self, rng):
        cfg = _cfg(mode="D", epochs=2, batch_size=64, rff_features=8, max_width=8)
        res = fit(_plane_clouds(rng, 100), cfg)
        assert len(res.models) == 2 and all(m.in_dim == 2 for m in res.models)
        assert not np.array_equal(res.models[0].encoding.rff.B, res.models[1].encoding.rff.B)
        assert res.val_rmse_m > 0

    def test_report_serialises(self, rng):
        rep = fit(_plane_clouds(rng, 60), _cfg(epochs=2, max_width=4, rff_features=4)).reports[0]
        d = rep.to_dict(include_time=False)
        assert "wall_time" not in d and d["best_val_mse"] == min(d["val_mse"])
