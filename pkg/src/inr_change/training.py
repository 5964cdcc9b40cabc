"""Loss assembly, Adam wrapped in layer-wise trust scaling, and the epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import network as nn
from .config import ConfigError
from .core_types import Normalizer, PointCloud, fit_normalizer, split_train_val
from .encoding import Encoding
from .parallel import pinned

log = logging.getLogger(__name__)

VAL_CHUNK = 65536


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    """Every knob of a reconstruction run: model, losses, optimiser, schedule."""

    mode: str = "S"
    epochs: int = 50
    batch_size: int = 4096
    lr: float = 1e-3
    lr_decay: float = 0.95
    early_stop_patience: int = 10
    lambda_tv: float = 0.0
    lambda_td: float = 0.0
    tv_sample_count: int = 256
    tv_noise_std: float = 0.01
    train_fraction: float = 0.8
    seed: int = 0
    # model
    preset: str = "default"
    activation: str = "tanh"
    encoding: str = "rff"
    rff_features: int = 256
    rff_sigma: float = 10.0
    siren_scale: float = 30.0
    max_width: Optional[int] = None
    # optimiser
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    trust_coef: float = 1.0
    weight_decay: float = 0.0
    lars_eps: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("D", "S"):
            raise ConfigError(f"mode must be 'D' or 'S', got {self.mode!r}")
        if self.mode == "D" and self.lambda_td > 0:
            raise ConfigError(
                "lambda_td > 0 requires mode S: the time-difference penalty needs "
                "time as a network input and cannot couple two independent models")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.tv_sample_count < 1:
            raise ConfigError("tv_sample_count must be >= 1")
        if self.lambda_tv < 0 or self.lambda_td < 0:
            raise ConfigError("regularisation weights must be >= 0")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be > 0 and lr_decay in (0, 1]")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if self.tv_noise_std < 0:
            raise ConfigError("tv_noise_std must be >= 0")
        if self.encoding not in ("rff", "identity"):
            raise ConfigError(f"encoding must be 'rff' or 'identity', got {self.encoding!r}")
        if self.activation not in nn.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {nn.ACTIVATIONS}")
        if self.preset not in nn.PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; valid: {', '.join(nn.PRESETS)}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if not self.siren_scale > 0 or not self.rff_sigma > 0 or self.rff_features < 1:
            raise ConfigError("siren_scale, rff_sigma and rff_features must be positive")

    @property
    def input_dim(self) -> int:
        return 3 if self.mode == "S" else 2


# -- optimiser ---------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    trust_coef: float = 1.0
    weight_decay: float = 0.0
    lars_eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "OptimizerState":
        return cls.for_params(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
                              trust_coef=cfg.trust_coef, weight_decay=cfg.weight_decay,
                              lars_eps=cfg.lars_eps)


def trust_ratio(param_norm: float, update_norm: float, trust_coef: float,
                weight_decay: float = 0.0, eps: float = 1e-8) -> float:
    """``tc * |theta| / (|u| + wd * |theta| + eps)``, or 1 for an all-zero tensor."""
    if param_norm == 0.0:
        return 1.0
    denom = update_norm + weight_decay * param_norm + eps
    if denom == 0.0:
        return 1.0
    return trust_coef * param_norm / denom


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                   state: OptimizerState, lr: float) -> list[np.ndarray]:
    """One Adam step with the update of each weight matrix rescaled by its trust ratio.

    Vectors (biases, batch-norm affine terms) take the plain Adam step, the
    usual exclusion in layer-wise scaling. Parameters are updated in place.
    """
    if any(not np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return list(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        u = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if p.ndim >= 2:
            if state.weight_decay:
                u = u + state.weight_decay * p
            ratio = trust_ratio(float(np.linalg.norm(p)), float(np.linalg.norm(u)),
                                state.trust_coef, state.weight_decay, state.lars_eps)
            p -= lr * ratio * u
        else:
            p -= lr * u
    return list(params)


# -- losses ------------------------------------------------------------------

def sample_tv_points(coords: np.ndarray, count: int, noise_std: float, seed=0) -> np.ndarray:
    """Draw ``count`` rows of ``coords`` with replacement and jitter x and y.

    ``seed`` may also be a ``numpy.random.Generator``. Time is never perturbed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    coords = np.asarray(coords, dtype=np.float64)
    pts = coords[rng.integers(0, len(coords), size=count)].copy()
    if noise_std > 0:
        pts[:, :2] += rng.normal(0.0, noise_std, size=(count, 2))
    return pts


@dataclass
class LossParts:
    data: float
    tv: float = 0.0
    td: float = 0.0

    @property
    def total(self) -> float:
        return self.data + self.tv + self.td


def batch_loss(model: nn.FieldModel, V: np.ndarray, z: np.ndarray, cfg: TrainConfig,
               tv_points: Optional[np.ndarray] = None, training: bool = False):
    """Loss and parameter gradient for one mini-batch.

    ``MSE + lambda_tv * mean(|df/dx| + |df/dy|) + lambda_td * mean|f(t1) - f(t0)|``,
    with both penalties evaluated on ``tv_points``. Returns
    ``(loss, grads, parts, tape)``; the data-pass tape carries batch-norm statistics.
    """
    if cfg.mode == "D" and cfg.lambda_td > 0:
        raise ConfigError("lambda_td > 0 is only valid in mode S")
    V = np.asarray(V, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if len(V) == 0:
        raise ValueError("empty batch")
    f, tape = nn.forward(model, V, batch_stats=training and bool(model.buffers))
    resid = f - z
    parts = LossParts(float(np.mean(resid * resid)))
    grads = nn.backward_params(model, tape, 2.0 * resid / len(V))
    stats = tape.stats if model.buffers else None

    use_tv = cfg.lambda_tv > 0
    use_td = cfg.mode == "S" and cfg.lambda_td > 0
    if (use_tv or use_td) and tv_points is None:
        raise ValueError("regularised loss needs tv_points")
    if use_tv:
        S = len(tv_points)
        _, g, tv_tape = nn.forward_with_gradient(model, tv_points, bn_stats=stats, axes=(0, 1))
        parts.tv = cfg.lambda_tv * float(np.mean(np.abs(g).sum(axis=1)))
        g_bar = cfg.lambda_tv / S * np.sign(g)
        grads = nn.add_grads(grads, nn.vjp(model, tv_tape, g_bar=g_bar))
    if use_td:
        S = len(tv_points)
        pts = np.concatenate([tv_points, tv_points])
        pts[:S, 2] = 1.0
        pts[S:, 2] = -1.0
        f_td, td_tape = nn.forward(model, pts, bn_stats=stats)
        diff = f_td[:S] - f_td[S:]
        parts.td = cfg.lambda_td * float(np.mean(np.abs(diff)))
        w = cfg.lambda_td / S * np.sign(diff)
        grads = nn.add_grads(grads, nn.backward_params(model, td_tape, np.concatenate([w, -w])))
    return parts.total, grads, parts, tape


def flat_grads(grads: list[dict]) -> list[np.ndarray]:
    return [g[k] for g in grads for k in sorted(g)]


# -- fitting -----------------------------------------------------------------

@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    val_rmse_m: list = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = "completed"
    wall_time: float = 0.0
    epochs: int = 0
    n_parameters: int = 0
    n_train: int = 0
    n_val: int = 0
    skipped_steps: int = 0

    @property
    def best_val_mse(self) -> float:
        return float(self.val_mse[self.best_epoch]) if self.val_mse else float("inf")

    def to_dict(self, include_time: bool = True) -> dict:
        d = {
            "train_loss": self.train_loss,
            "val_mse": self.val_mse,
            "val_rmse_m": self.val_rmse_m,
            "best_epoch": self.best_epoch,
            "best_val_mse": self.best_val_mse,
            "stop_reason": self.stop_reason,
            "epochs": self.epochs,
            "n_parameters": self.n_parameters,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "skipped_steps": self.skipped_steps,
        }
        if include_time:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class FitResult:
    models: list
    reports: list
    normalizer: Normalizer
    mode: str
    config: TrainConfig

    @property
    def val_mse(self) -> float:
        """Validation MSE pooled over the fitted models (normalised units)."""
        n = sum(r.n_val for r in self.reports)
        return float(sum(r.best_val_mse * r.n_val for r in self.reports) / n)

    @property
    def val_rmse_m(self) -> float:
        return float(np.sqrt(self.val_mse) / self.normalizer.scale[2])


EpochCallback = Callable[[int, float], bool]


def make_encoding(cfg: TrainConfig, seed: int) -> Encoding:
    if cfg.encoding == "identity":
        return Encoding.identity(cfg.input_dim)
    return Encoding.fourier(cfg.input_dim, cfg.rff_features, cfg.rff_sigma, seed)


def make_model(cfg: TrainConfig, seed: int) -> nn.FieldModel:
    enc = make_encoding(cfg, seed + 7919)
    return nn.build_model(cfg.preset, enc, cfg.activation, cfg.siren_scale, seed, cfg.max_width)


def _evaluate_mse(model: nn.FieldModel, V: np.ndarray, z: np.ndarray) -> float:
    total = 0.0
    for i in range(0, len(V), VAL_CHUNK):
        r = model(V[i:i + VAL_CHUNK]) - z[i:i + VAL_CHUNK]
        total += float(r @ r)
    return total / len(V)


@pinned
def fit_arrays(model: nn.FieldModel, V: np.ndarray, z: np.ndarray, cfg: TrainConfig,
               z_scale: float = 1.0, seed: int = 0,
               callback: Optional[EpochCallback] = None) -> TrainReport:
    """Train ``model`` in place on normalised inputs ``V`` and heights ``z``.

    The best-validation parameters are restored before returning. ``callback``
    receives ``(epoch, val_mse)`` and may return True to abort (pruning).
    """
    t_start = time.perf_counter()
    split = split_train_val(len(V), cfg.train_fraction, seed)
    Vt, zt = V[split.train], z[split.train]
    Vv, zv = V[split.val], z[split.val]
    rng = np.random.default_rng(seed + 1)
    params = model.parameter_arrays()
    state = OptimizerState.from_config(params, cfg)
    report = TrainReport(n_parameters=model.n_parameters(), n_train=len(Vt), n_val=len(Vv))
    need_samples = cfg.lambda_tv > 0 or (cfg.mode == "S" and cfg.lambda_td > 0)
    lr = cfg.lr
    best, best_state, wait = np.inf, model.state(), 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(Vt))
        losses, weights = [], []
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            tv = sample_tv_points(Vt, cfg.tv_sample_count, cfg.tv_noise_std, rng) if need_samples else None
            loss, grads, _, tape = batch_loss(model, Vt[idx], zt[idx], cfg, tv, training=True)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            optimizer_step(params, flat_grads(grads), state, lr)
            model.version += 1
            if model.buffers:
                nn.update_running_stats(model, tape)
            losses.append(loss)
            weights.append(len(idx))
        lr *= cfg.lr_decay
        val = _evaluate_mse(model, Vv, zv)
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation MSE at epoch {epoch}")
        report.train_loss.append(float(np.average(losses, weights=weights)))
        report.val_mse.append(val)
        report.val_rmse_m.append(float(np.sqrt(val) / z_scale))
        report.epochs = epoch + 1
        log.debug("epoch %d loss %.6g val %.6g", epoch, report.train_loss[-1], val)
        if val < best:
            best, best_state, wait = val, model.state(), 0
            report.best_epoch = epoch
        else:
            wait += 1
        if callback is not None and callback(epoch, val):
            report.stop_reason = "pruned"
            break
        if wait > cfg.early_stop_patience:
            report.stop_reason = "early-stopped"
            break
    model.load_state(best_state)
    report.skipped_steps = state.skipped
    report.wall_time = time.perf_counter() - t_start
    return report


def prepare_single(pc0: PointCloud, pc1: PointCloud, norm: Normalizer):
    """Concatenate both epochs into normalised (x, y, t) inputs and z targets."""
    V, z = [], []
    for pc, t in ((pc0, 0), (pc1, 1)):
        u = norm.apply(pc.xyz)
        V.append(np.column_stack([u[:, :2], np.full(len(pc), norm.time_value(t))]))
        z.append(u[:, 2])
    return np.concatenate(V), np.concatenate(z)


def fit(clouds: Sequence[PointCloud], cfg: TrainConfig,
        callback: Optional[EpochCallback] = None) -> FitResult:
    """Fit one (mode S) or two (mode D) height fields to a pair of clouds."""
    cfg.validate()
    pc0, pc1 = clouds
    norm = fit_normalizer([pc0, pc1], include_time=cfg.mode == "S")
    zs = norm.scale[2]
    if cfg.mode == "S":
        V, z = prepare_single(pc0, pc1, norm)
        model = make_model(cfg, cfg.seed)
        report = fit_arrays(model, V, z, cfg, zs, cfg.seed, callback)
        return FitResult([model], [report], norm, "S", cfg)
    models, reports = [], []
    for k, pc in enumerate((pc0, pc1)):
        u = norm.apply(pc.xyz)
        seed = cfg.seed + 1000 * k
        model = make_model(cfg, seed)
        reports.append(fit_arrays(model, u[:, :2], u[:, 2], cfg, zs, seed, callback))
        models.append(model)
    return FitResult(models, reports, norm, "D", cfg)
