"""Hyperparameter search minimising validation MSE.

Trials are scheduled in fixed-size waves. Every config in a wave is sampled
from the trials of earlier waves only, so the sampled sequence does not depend
on how many workers execute a wave. Pruning decisions likewise only look at
completed trials from earlier waves.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import network as nn
from .config import ConfigError
from .training import TrainConfig

log = logging.getLogger(__name__)

STATUSES = ("completed", "pruned", "failed")
WARMUP_EPOCHS = 5


class SearchFailedError(RuntimeError):
    pass


class TrialPruned(Exception):
    """Raised inside an objective to stop a trial early."""


@dataclass(frozen=True)
class Param:
    """One search dimension.

    ``kind`` is ``"categorical"``, ``"log"`` (log-uniform float) or ``"int-log"``
    (log-uniform over the integers, or over ``choices`` when given). With
    ``zero_prob > 0`` the value is exactly 0 with that prior probability.
    """

    name: str
    kind: str
    low: float = 0.0
    high: float = 0.0
    choices: tuple = ()
    zero_prob: float = 0.0

    def __post_init__(self):
        if self.kind == "categorical":
            if not self.choices:
                raise ConfigError(f"{self.name}: categorical parameter needs choices")
        elif self.kind in ("log", "int-log"):
            if self.choices:
                if any(not c > 0 for c in self.choices):
                    raise ConfigError(f"{self.name}: log-scaled choices must be positive")
            elif not 0 < self.low <= self.high:
                raise ConfigError(f"{self.name}: log-scaled bounds must satisfy 0 < low <= high")
        else:
            raise ConfigError(f"{self.name}: unknown parameter kind {self.kind!r}")
        if not 0 <= self.zero_prob < 1:
            raise ConfigError(f"{self.name}: zero_prob must lie in [0, 1)")

    @property
    def _log_bounds(self) -> tuple:
        lo, hi = (min(self.choices), max(self.choices)) if self.choices else (self.low, self.high)
        return math.log(lo), math.log(hi)

    def to_unit(self, value) -> float:
        lo, hi = self._log_bounds
        return 0.5 if hi == lo else (math.log(value) - lo) / (hi - lo)

    def from_unit(self, u: float):
        lo, hi = self._log_bounds
        x = math.exp(lo + min(max(u, 0.0), 1.0) * (hi - lo))
        if self.kind == "log":
            return x
        if self.choices:
            return min(self.choices, key=lambda c: (abs(math.log(c) - math.log(x)), c))
        return int(min(max(round(x), math.ceil(self.low)), math.floor(self.high)))

    def sample_prior(self, rng: np.random.Generator):
        if self.kind == "categorical":
            return self.choices[int(rng.integers(len(self.choices)))]
        is_zero = rng.random() < self.zero_prob
        u = rng.random()
        return 0.0 if (self.zero_prob > 0 and is_zero) else self.from_unit(u)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "low": self.low, "high": self.high,
                "choices": list(self.choices), "zero_prob": self.zero_prob}


@dataclass
class SearchSpace:
    """Search dimensions plus fixed TrainConfig overrides shared by every trial."""

    params: tuple
    base: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = tuple(p if isinstance(p, Param) else Param(**p) for p in self.params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate search parameter names")
        cfg_fields = set(TrainConfig.__dataclass_fields__)
        unknown = sorted((set(names) | set(self.base)) - cfg_fields)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys in search space: {', '.join(unknown)}")
        if self.base.get("mode", "S") == "D":
            # the time-difference penalty does not exist for two independent models
            self.params = tuple(p for p in self.params if p.name != "lambda_td")
        TrainConfig(**self.base)

    @classmethod
    def default(cls, mode: str = "S", base: Optional[dict] = None) -> "SearchSpace":
        params = [
            Param("preset", "categorical", choices=tuple(nn.PRESETS)),
            Param("activation", "categorical", choices=nn.ACTIVATIONS),
            Param("lr", "log", 1e-5, 1e-2),
            Param("rff_sigma", "log", 0.1, 100.0),
            Param("lambda_tv", "log", 1e-4, 10.0, zero_prob=0.25),
            Param("lambda_td", "log", 1e-4, 10.0, zero_prob=0.25),
            Param("siren_scale", "log", 1.0, 100.0),
            Param("batch_size", "int-log", choices=tuple(2 ** k for k in range(10, 19))),
            Param("rff_features", "int-log", 64, 1024),
        ]
        return cls(tuple(params), dict(base or {}, mode=mode))

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        unknown = sorted(set(d) - {"params", "base", "mode"})
        if unknown:
            raise ConfigError(f"unknown search-space keys: {', '.join(unknown)}")
        base = dict(d.get("base", {}))
        if "mode" in d:
            base["mode"] = d["mode"]
        if "params" not in d:
            return cls.default(base.get("mode", "S"), base)
        return cls(tuple(Param(**{k: (tuple(v) if k == "choices" else v) for k, v in p.items()})
                         for p in d["params"]), base)

    def to_dict(self) -> dict:
        return {"params": [p.to_dict() for p in self.params], "base": dict(self.base)}

    def sample_prior(self, rng: np.random.Generator) -> dict:
        return {p.name: p.sample_prior(rng) for p in self.params}

    def train_config(self, sampled: dict) -> TrainConfig:
        return TrainConfig(**{**self.base, **sampled})


@dataclass
class Trial:
    index: int
    config: dict
    seed: int
    status: str = "completed"
    mse: Optional[float] = None
    mse_trace: list = field(default_factory=list)
    error: Optional[str] = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown trial status {self.status!r}")
        if self.status == "completed" and not (self.mse is not None and math.isfinite(self.mse)):
            raise ValueError("completed trials must carry a finite MSE")

    def to_record(self, search_seed: int, strategy: str) -> dict:
        return {"trial": self.index, "search_seed": search_seed, "strategy": strategy,
                "seed": self.seed, "status": self.status, "mse": self.mse,
                "mse_trace": self.mse_trace, "config": self.config, "error": self.error}

    @classmethod
    def from_record(cls, r: dict) -> "Trial":
        return cls(r["trial"], r["config"], r["seed"], r["status"], r["mse"],
                   list(r.get("mse_trace", [])), r.get("error"))


# -- pruning ---------------------------------------------------------------------

def prune_trial(trial: Optional[Trial], epoch: int, mse_history: Sequence[float],
                completed: Sequence[Trial] = ()) -> str:
    """Median pruning: ``"prune"`` if this trial's epoch-``epoch`` MSE exceeds the median
    epoch-``epoch`` MSE of the completed trials, else ``"continue"``.

    ``epoch`` counts recorded epochs from 1. Nothing is pruned before epoch 5 or
    while no completed trial reached that epoch.
    """
    if epoch < 1 or len(mse_history) < epoch:
        raise ValueError("mse_history must hold at least `epoch` values")
    if epoch < WARMUP_EPOCHS:
        return "continue"
    idx = trial.index if trial is not None else None
    ref = [t.mse_trace[epoch - 1] for t in completed
           if t.status == "completed" and len(t.mse_trace) >= epoch and t.index != idx]
    if not ref:
        return "continue"
    return "prune" if mse_history[epoch - 1] > float(np.median(ref)) else "continue"


# -- sampling ----------------------------------------------------------------------

def _tpe_sample(space: SearchSpace, history: Sequence[Trial], rng: np.random.Generator,
                prior_weight: float = 0.2) -> dict:
    """Sample from a kernel density over the better half of completed trials."""
    done = sorted((t for t in history if t.status == "completed"), key=lambda t: (t.mse, t.index))
    good = done[:max(1, (len(done) + 1) // 2)]
    n = len(good)
    out = {}
    for p in space.params:
        vals = [g.config[p.name] for g in good if p.name in g.config]
        if not vals or rng.random() < prior_weight:
            out[p.name] = p.sample_prior(rng)
            continue
        if p.kind == "categorical":
            out[p.name] = vals[int(rng.integers(len(vals)))]
            continue
        nonzero = [v for v in vals if v > 0]
        if p.zero_prob > 0 and rng.random() < (len(vals) - len(nonzero) + 0.5) / (len(vals) + 1.0):
            out[p.name] = 0.0
            continue
        if not nonzero:
            out[p.name] = p.from_unit(rng.random())
            continue
        units = np.array([p.to_unit(v) for v in nonzero])
        bw = max(0.05, float(np.std(units)) * len(units) ** -0.2) if len(units) > 1 else 0.15
        u = units[int(rng.integers(len(units)))] + rng.normal(0.0, bw)
        u = abs(u) if u < 0 else (2.0 - u if u > 1 else u)  # reflect into [0, 1]
        out[p.name] = p.from_unit(u)
    return out


def _trial_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0] % (2 ** 31))


def sample_config(space: SearchSpace, strategy: str, seed: int, index: int,
                  history: Sequence[Trial], n_startup: int) -> dict:
    rng = np.random.default_rng([seed, index, 17])
    if strategy == "random" or sum(t.status == "completed" for t in history) < n_startup:
        return space.sample_prior(rng)
    return _tpe_sample(space, history, rng)


# -- driver ------------------------------------------------------------------------

Objective = Callable[[dict, int, Callable[[int, float], bool]], float]


def read_journal(path) -> list[Trial]:
    path = Path(path)
    if not path.exists():
        return []
    trials = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if line.strip():
            try:
                trials.append(Trial.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ConfigError(f"{path}:{n}: corrupt journal record ({exc})") from exc
    for k, t in enumerate(trials):
        if t.index != k:
            raise ConfigError(f"{path}: journal trial numbering is not contiguous at record {k}")
    return trials


def _run_trial(objective: Objective, index: int, config: dict, seed: int,
               reference: Sequence[Trial]) -> Trial:
    trial = Trial(index, config, seed, status="failed")
    trace: list[float] = []

    def report(epoch: int, mse: float) -> bool:
        trace.append(float(mse))
        return prune_trial(trial, len(trace), trace, reference) == "prune"

    try:
        mse = float(objective(config, seed, report))
    except TrialPruned:
        return Trial(index, config, seed, "pruned", trace[-1] if trace else None, trace)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("trial %d failed: %s", index, exc)
        return Trial(index, config, seed, "failed", None, trace, f"{type(exc).__name__}: {exc}")
    if not math.isfinite(mse):
        return Trial(index, config, seed, "failed", None, trace, "non-finite objective")
    return Trial(index, config, seed, "completed", mse, trace)


def run_search(space: SearchSpace, objective: Objective, budget: int = 20,
               strategy: str = "tpe-lite", parallelism: int = 1, seed: int = 0,
               journal=None, wave_size: int = 4, n_startup: int = 8):
    """Run ``budget`` trials in total (including any already in ``journal``).

    ``objective(config, seed, report)`` returns the validation MSE; it should call
    ``report(epoch, mse)`` after each epoch and raise :class:`TrialPruned` when that
    returns True. Returns ``(best_trial, trials)``.
    """
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    if strategy not in ("random", "tpe-lite"):
        raise ConfigError(f"unknown strategy {strategy!r}; valid: random, tpe-lite")
    if parallelism < 1 or wave_size < 1:
        raise ConfigError("parallelism and wave_size must be >= 1")
    trials = read_journal(journal) if journal is not None else []
    if journal is not None and trials:
        with open(journal) as fh:
            first = json.loads(fh.readline())
        if first.get("search_seed") != seed or first.get("strategy") != strategy:
            raise ConfigError("journal was written with a different seed or strategy")
    pool = ThreadPoolExecutor(parallelism) if parallelism > 1 else None
    try:
        while len(trials) < budget:
            start = len(trials)
            wave_start = start - start % wave_size
            history = trials[:wave_start]
            stop = min(wave_start + wave_size, budget)
            jobs = []
            for i in range(start, stop):
                cfg = sample_config(space, strategy, seed, i, history, n_startup)
                jobs.append((i, cfg, _trial_seed(seed, i)))
            if pool is None:
                done = [_run_trial(objective, i, c, s, history) for i, c, s in jobs]
            else:
                done = list(pool.map(lambda j: _run_trial(objective, *j, history), jobs))
            if journal is not None:
                with open(journal, "a") as fh:
                    for t in done:
                        fh.write(json.dumps(t.to_record(seed, strategy), sort_keys=True) + "\n")
            trials.extend(done)
    finally:
        if pool is not None:
            pool.shutdown()
    completed = [t for t in trials if t.status == "completed"]
    if not completed:
        raise SearchFailedError(f"all {len(trials)} trials failed or were pruned")
    best = min(completed, key=lambda t: (t.mse, t.index))
    return best, trials


def fit_objective(clouds, space: SearchSpace) -> Objective:
    """Objective that fits the sampled config to ``clouds`` and returns pooled validation MSE."""
    from .training import fit

    def objective(config: dict, seed: int, report) -> float:
        cfg = space.train_config({**config, "seed": seed})
        segment = [0]

        def callback(epoch: int, val: float) -> bool:
            # mode D trains two models in turn; only the first one feeds pruning
            if epoch == 0 and segment[0] == 0 and getattr(callback, "seen", False):
                segment[0] = 1
            callback.seen = True
            if segment[0] == 0 and report(epoch, val):
                raise TrialPruned()
            return False

        return fit(clouds, cfg, callback).val_mse

    return objective
