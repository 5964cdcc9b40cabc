"""Coordinate MLPs mapping (x, y[, t]) to height, with hand-written derivatives.

Three differentiation routes are provided, all batched over samples:

* :func:`backward_params` - reverse mode, d(output)/d(parameters);
* :func:`input_gradient` - forward mode, d(output)/d(input coordinates);
* :func:`backward_params_of_input_gradient` - reverse mode pulled back through
  the forward-mode tangents, i.e. d(u . grad_v f)/d(parameters), which is what
  training a gradient penalty needs.

:func:`vjp` is the shared engine: it accepts adjoints for both the output and
its input gradient and returns the combined parameter gradient in one sweep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoding import Encoding, RffMatrix, encode, encode_jacobian
from .parallel import matmul, matmul_tn

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "sine")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: int):
        self.layer = layer
        super().__init__(f"non-finite activation at layer {layer}")


class StaleTapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "fc", "fc-skip" or "batch-norm"
    width: int
    activation: str = "none"


# (width, repeat, skip) rows of each architecture, widest first.
PRESETS = {
    "default": [(256, 1, False), (128, 1, False), (64, 1, False)],
    "default-BN": [(256, 1, False), (128, 1, False), (64, 1, False)],
    "default-L": [(1024, 1, False), (512, 1, False), (256, 1, False), (128, 1, False), (64, 1, False)],
    "skip-double": [(512, 2, True), (256, 2, True), (128, 1, True), (64, 1, True)],
    "skip-L-double": [(1024, 2, True), (512, 2, True), (256, 2, True), (128, 2, True), (64, 2, True)],
    "skip-XL-double": [(1024, 4, True), (512, 4, True), (256, 3, True), (128, 2, True), (64, 2, True)],
    "skip-ten": [(512, 10, True), (256, 1, True), (128, 1, True), (64, 1, True)],
    "skip-ten-only": [(256, 10, True)],
    "skip-twenty": [(256, 20, True), (128, 2, True), (64, 2, True)],
}


def preset_layers(name: str, activation: str, in_dim: int,
                  max_width: Optional[int] = None) -> list[LayerSpec]:
    """Expand a preset into layer specs, ending in the linear map to one output.

    A skip block needs equal input and output width, so a plain fully
    connected layer is inserted wherever the width changes in front of one.
    ``max_width`` caps every width (for cheap toy models).
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; valid: {', '.join(PRESETS)}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    layers: list[LayerSpec] = []
    width = in_dim
    for w, repeat, skip in PRESETS[name]:
        if max_width is not None:
            w = min(w, max_width)
        for _ in range(repeat):
            if skip:
                if width != w:
                    layers.append(LayerSpec("fc", w, activation))
                layers.append(LayerSpec("fc-skip", w, activation))
            else:
                layers.append(LayerSpec("fc", w, activation))
                if name == "default-BN":
                    layers.append(LayerSpec("batch-norm", w))
            width = w
    layers.append(LayerSpec("fc", 1, "none"))
    return layers


@dataclass
class FieldModel:
    """An encoding followed by an MLP with scalar output.

    ``params[i]`` holds ``W`` (out x in) and ``b`` for dense layers and
    ``gamma``/``beta`` for batch norm; ``buffers[i]`` holds batch-norm running
    statistics. ``version`` increments whenever parameters change.
    """

    encoding: Encoding
    layers: list
    params: list
    activation: str = "tanh"
    siren_scale: float = 30.0
    preset: str = "custom"
    buffers: list = field(default_factory=list)
    version: int = 0

    @property
    def in_dim(self) -> int:
        return self.encoding.dim

    def n_parameters(self) -> int:
        return int(sum(a.size for p in self.params for a in p.values()))

    def parameter_arrays(self) -> list[np.ndarray]:
        return [p[k] for p in self.params for k in sorted(p)]

    def state(self) -> list[dict]:
        return [{k: v.copy() for k, v in p.items()} for p in self.params + self.buffers]

    def load_state(self, state: Sequence[dict]) -> None:
        n = len(self.params)
        self.params = [{k: v.copy() for k, v in p.items()} for p in state[:n]]
        self.buffers = [{k: v.copy() for k, v in p.items()} for p in state[n:]]
        self.version += 1

    def copy(self) -> "FieldModel":
        copy = lambda ds: [{k: v.copy() for k, v in d.items()} for d in ds]  # noqa: E731
        return FieldModel(self.encoding, list(self.layers), copy(self.params), self.activation,
                          self.siren_scale, self.preset, copy(self.buffers))

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return forward(self, v)[0]


def build_model(preset: str, encoding: Encoding, activation: str = "tanh",
                siren_scale: float = 30.0, seed: int = 0,
                max_width: Optional[int] = None) -> FieldModel:
    if not siren_scale > 0:
        raise ValueError("siren_scale must be positive")
    layers = preset_layers(preset, activation, encoding.output_dim, max_width)
    return init_model(layers, encoding, activation, siren_scale, seed, preset)


def init_model(layers: Sequence[LayerSpec], encoding: Encoding, activation: str = "tanh",
               siren_scale: float = 30.0, seed: int = 0, preset: str = "custom") -> FieldModel:
    """Initialise weights for an explicit layer list.

    relu/tanh use fan-in scaled uniform bounds (gain sqrt(2) and 5/3);
    sine layers follow the SIREN scheme with ``siren_scale`` as omega.
    """
    rng = np.random.default_rng(seed)
    params, buffers = [], []
    width = encoding.output_dim
    first_dense = True
    for spec in layers:
        if spec.kind == "batch-norm":
            if spec.width != width:
                raise ValueError(f"batch-norm width {spec.width} does not match input {width}")
            params.append({"gamma": np.ones(width), "beta": np.zeros(width)})
            buffers.append({"mean": np.zeros(width), "var": np.ones(width)})
            continue
        if spec.kind == "fc-skip" and spec.width != width:
            raise ValueError(f"skip layer maps {width} -> {spec.width}; widths must match")
        if spec.kind not in ("fc", "fc-skip"):
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        fan_in = width
        if activation == "sine":
            if first_dense:
                bound = 1.0 / fan_in
            else:
                bound = np.sqrt(6.0 / fan_in) / siren_scale
        elif spec.activation == "none":
            bound = 1.0 / np.sqrt(fan_in)
        else:
            gain = np.sqrt(2.0) if activation == "relu" else 5.0 / 3.0
            bound = gain * np.sqrt(3.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(spec.width, fan_in))
        b = rng.uniform(-1.0, 1.0, size=spec.width) / np.sqrt(fan_in)
        params.append({"W": W, "b": b})
        first_dense = False
        width = spec.width
    if layers[-1].activation != "none" or layers[-1].width != 1:
        raise ValueError("the last layer must be a linear map to one output")
    return FieldModel(encoding, list(layers), params, activation, float(siren_scale),
                      preset, buffers)


# -- activations -------------------------------------------------------------

def _act(kind: str, z: np.ndarray, s: float) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sine":
        return np.sin(s * z)
    return z


def _act_derivs(kind: str, z: np.ndarray, s: float, second: bool = False):
    """First (and optionally second) derivative; relu'(0) = 0, relu'' = 0."""
    if kind == "tanh":
        t = np.tanh(z)
        d1 = 1.0 - t * t
        return (d1, -2.0 * t * d1) if second else (d1, None)
    if kind == "relu":
        d1 = (z > 0).astype(z.dtype)
        return d1, (np.zeros_like(z) if second else None)
    if kind == "sine":
        d1 = s * np.cos(s * z)
        return (d1, -s * s * np.sin(s * z)) if second else (d1, None)
    return np.ones_like(z), (np.zeros_like(z) if second else None)


# -- forward passes ----------------------------------------------------------

@dataclass
class GradientTape:
    """Per-layer inputs and pre-activations cached by a forward pass.

    ``dh``/``dz`` hold forward-mode tangents of shape (d, N, width) when the
    pass propagated them.
    """

    version: int
    model_id: int
    h: list
    z: list
    stats: list
    output: np.ndarray
    dh: Optional[list] = None
    dz: Optional[list] = None
    grad: Optional[np.ndarray] = None


def _as_batch(model: FieldModel, v) -> tuple[np.ndarray, bool]:
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    if single:
        v = v[None, :]
    if v.shape[-1] != model.in_dim:
        raise ValueError(f"expected {model.in_dim}-dimensional input, got {v.shape[-1]}")
    return v, single


def _run(model: FieldModel, V: np.ndarray, tangents: bool, bn_stats=None,
         batch_stats: bool = False, axes=None) -> GradientTape:
    s = model.siren_scale
    h = encode(model.encoding, V)
    dh = None
    if tangents:
        J = encode_jacobian(model.encoding, V)
        if axes is not None:
            J = J[..., list(axes)]
        dh = np.moveaxis(J, -1, 0)  # (d, N, in)
    hs, zs, dhs, dzs, stats = [], [], [], [], []
    bn_i = 0
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        hs.append(h)
        dhs.append(dh)
        if spec.kind == "batch-norm":
            if bn_stats is not None:
                mean, var = bn_stats[bn_i]
            elif batch_stats:
                mean, var = h.mean(axis=0), h.var(axis=0)
            else:
                mean, var = model.buffers[bn_i]["mean"], model.buffers[bn_i]["var"]
            stats.append((mean, var))
            bn_i += 1
            scale = p["gamma"] / np.sqrt(var + BN_EPS)
            zs.append(None)
            dzs.append(None)
            h = (h - mean) * scale + p["beta"]
            if dh is not None:
                dh = dh * scale
            continue
        z = matmul(h, p["W"].T) + p["b"]
        zs.append(z)
        dz = matmul(dh, p["W"].T) if dh is not None else None
        dzs.append(dz)
        a = _act(spec.activation, z, s)
        if dz is not None:
            da = _act_derivs(spec.activation, z, s)[0] * dz
        if spec.kind == "fc-skip":
            h = h + a
            if dh is not None:
                dh = dh + da
        else:
            h = a
            if dh is not None:
                dh = da
    out = h[:, 0]
    tape = GradientTape(model.version, id(model), hs, zs, stats, out)
    if tangents:
        tape.dh, tape.dz = dhs, dzs
        tape.grad = dh[:, :, 0].T
    if not np.all(np.isfinite(out)):
        for i, hi in enumerate(hs[1:] + [h]):
            if not np.all(np.isfinite(hi)):
                raise NonFiniteError(i)
        raise NonFiniteError(len(hs) - 1)
    return tape


def forward(model: FieldModel, v, bn_stats=None, batch_stats: bool = False):
    """Evaluate heights; returns ``(f, tape)`` with f of shape (N,) or a scalar."""
    V, single = _as_batch(model, v)
    tape = _run(model, V, False, bn_stats, batch_stats)
    return (tape.output[0] if single else tape.output), tape


def input_gradient(model: FieldModel, v, bn_stats=None) -> np.ndarray:
    """Forward-mode d f / d v, shape (N, d) (or (d,) for a single point)."""
    V, single = _as_batch(model, v)
    tape = _run(model, V, True, bn_stats)
    return tape.grad[0] if single else tape.grad


def forward_with_gradient(model: FieldModel, v, bn_stats=None, axes=None):
    """Evaluate ``f`` and ``d f / d v`` together; the tape supports second-order pulls.

    ``axes`` restricts the gradient to a subset of input coordinates.
    """
    V, _ = _as_batch(model, v)
    tape = _run(model, V, True, bn_stats, axes=axes)
    return tape.output, tape.grad, tape


# -- reverse passes ----------------------------------------------------------

def _check_tape(model: FieldModel, tape: GradientTape) -> None:
    if tape.model_id != id(model) or tape.version != model.version:
        raise StaleTapeError("tape was recorded for different parameters")


def vjp(model: FieldModel, tape: GradientTape, f_bar=None, g_bar=None) -> list[dict]:
    """Parameter gradient of ``sum(f_bar * f) + sum(g_bar * grad_v f)``.

    ``f_bar`` has shape (N,) (a scalar broadcasts); ``g_bar`` has shape (N, d)
    (d = number of tangent axes) and requires a tape recorded with tangents.
    """
    _check_tape(model, tape)
    n = len(tape.output)
    if f_bar is None:
        f_bar = np.zeros(n)
    f_bar = np.broadcast_to(np.asarray(f_bar, dtype=np.float64), (n,))
    use_t = g_bar is not None
    if use_t:
        if tape.dh is None:
            raise ValueError("input-gradient adjoint needs a tape with tangents")
        g_bar = np.asarray(g_bar, dtype=np.float64).reshape(n, tape.dh[0].shape[0])
    s = model.siren_scale
    grads: list[dict] = [None] * len(model.layers)

    # output adjoints, (N, 1) and (d, N, 1)
    h_bar = f_bar[:, None].copy()
    dh_bar = g_bar.T[:, :, None].copy() if use_t else None
    for i in range(len(model.layers) - 1, -1, -1):
        spec, p = model.layers[i], model.params[i]
        h_in = tape.h[i]
        dh_in = tape.dh[i] if use_t else None
        need_in = i > 0
        if spec.kind == "batch-norm":
            mean, var = tape.stats[sum(1 for l in model.layers[:i] if l.kind == "batch-norm")]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (h_in - mean) * inv
            g_gamma = (h_bar * xhat).sum(axis=0)
            if use_t:
                g_gamma = g_gamma + (dh_bar * dh_in).sum(axis=(0, 1)) * inv
            grads[i] = {"gamma": g_gamma, "beta": h_bar.sum(axis=0)}
            if need_in:
                sc = p["gamma"] * inv
                h_bar = h_bar * sc
                if use_t:
                    dh_bar = dh_bar * sc
            continue
        z = tape.z[i]
        d1, d2 = _act_derivs(spec.activation, z, s, second=use_t)
        z_bar = h_bar * d1
        if use_t:
            dz_bar = dh_bar * d1
            z_bar = z_bar + (dh_bar * tape.dz[i]).sum(axis=0) * d2
        gW = matmul_tn(z_bar, h_in)
        if use_t:
            gW = gW + matmul_tn(dz_bar.reshape(-1, z.shape[1]), dh_in.reshape(-1, h_in.shape[1]))
        grads[i] = {"W": gW, "b": z_bar.sum(axis=0)}
        if need_in:
            W = p["W"]
            skip = spec.kind == "fc-skip"
            new_h_bar = matmul(z_bar, W)
            if skip:
                new_h_bar = new_h_bar + h_bar
            if use_t:
                new_dh_bar = matmul(dz_bar, W)
                if skip:
                    new_dh_bar = new_dh_bar + dh_bar
                dh_bar = new_dh_bar
            h_bar = new_h_bar
    return grads


def backward_params(model: FieldModel, tape: GradientTape, upstream=1.0) -> list[dict]:
    """Gradient of ``sum(upstream * f)`` with respect to every parameter."""
    return vjp(model, tape, f_bar=upstream)


def backward_params_of_input_gradient(model: FieldModel, v, upstream, bn_stats=None) -> list[dict]:
    """Gradient of ``sum(upstream * grad_v f)`` with respect to every parameter."""
    V, _ = _as_batch(model, v)
    tape = _run(model, V, True, bn_stats)
    return vjp(model, tape, g_bar=np.asarray(upstream, dtype=np.float64).reshape(len(V), -1))


def add_grads(a: list[dict], b: list[dict], scale: float = 1.0) -> list[dict]:
    return [{k: a_i[k] + scale * b_i[k] for k in a_i} for a_i, b_i in zip(a, b)]


def zero_grads(model: FieldModel) -> list[dict]:
    return [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]


def update_running_stats(model: FieldModel, tape: GradientTape) -> None:
    for buf, (mean, var) in zip(model.buffers, tape.stats):
        buf["mean"] = (1 - BN_MOMENTUM) * buf["mean"] + BN_MOMENTUM * mean
        buf["var"] = (1 - BN_MOMENTUM) * buf["var"] + BN_MOMENTUM * var


# -- checkpoints -------------------------------------------------------------

def _model_meta(m: FieldModel) -> dict:
    return {
        "preset": m.preset,
        "activation": m.activation,
        "siren_scale": m.siren_scale,
        "encoding": m.encoding.to_dict(),
        "layers": [[l.kind, l.width, l.activation] for l in m.layers],
        "n_parameters": m.n_parameters(),
    }


def save_checkpoint(path, models: Sequence[FieldModel], normalizer, mode: str,
                    extra: Optional[dict] = None) -> None:
    """Write models, encodings and the normaliser to one ``.npz`` container."""
    arrays = {}
    for k, m in enumerate(models):
        if m.encoding.rff is not None:
            arrays[f"m{k}/B"] = np.asarray(m.encoding.rff.B)
        for i, p in enumerate(m.params):
            for name, a in p.items():
                arrays[f"m{k}/p{i}/{name}"] = a
        for i, b in enumerate(m.buffers):
            for name, a in b.items():
                arrays[f"m{k}/buf{i}/{name}"] = a
    meta = {
        "format": "inr-change-checkpoint",
        "version": CHECKPOINT_VERSION,
        "mode": mode,
        "normalizer": normalizer.to_dict(),
        "models": [_model_meta(m) for m in models],
        "extra": extra or {},
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns ``(models, normalizer, mode, meta)``."""
    from .core_types import Normalizer

    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "inr-change-checkpoint" or "version" not in meta:
            raise ValueError(f"{path} is not a change-detection checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {meta['version']} is newer than supported")
        models = []
        for k, mm in enumerate(meta["models"]):
            e = mm["encoding"]
            if e["variant"] == "rff":
                B = z[f"m{k}/B"].copy()
                B.setflags(write=False)
                enc = Encoding(e["dim"], RffMatrix(B, e["sigma"], e["seed"]))
            else:
                enc = Encoding(e["dim"])
            layers = [LayerSpec(*l) for l in mm["layers"]]
            params = []
            for i, l in enumerate(layers):
                names = ("gamma", "beta") if l.kind == "batch-norm" else ("W", "b")
                params.append({n: z[f"m{k}/p{i}/{n}"].copy() for n in names})
            n_bn = sum(l.kind == "batch-norm" for l in layers)
            buffers = [{n: z[f"m{k}/buf{i}/{n}"].copy() for n in ("mean", "var")}
                       for i in range(n_bn)]
            models.append(FieldModel(enc, layers, params, mm["activation"],
                                     mm["siren_scale"], mm["preset"], buffers))
    return models, Normalizer.from_dict(meta["normalizer"]), meta["mode"], meta
