"""Wavelet layers, model composition, initialization and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .filters import (
    ChebyshevCoefficients,
    ScaleParams,
    SpectralFilterParams,
    WaveletFilterParams,
    compute_scales,
    hybrid_forward,
    hybrid_vjp,
    softplus_inv,
)
from .graph import build_normalized_laplacian
from .spectral import positional_encodings


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN/Inf."""


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 1
    pe_dim: int = 0
    d: int = 16
    d_out: int = 1
    n_layers: int = 2
    J: int = 2
    rho: int = 3
    z: int = 8
    lambda_cut: float = 2.0
    window: str = "cosine"
    mode: str = "independent"  # independent | shared
    aggregation: str = "sum"  # sum | concat
    residual: str = "standard"  # standard | wavelet | none
    activation: str = "relu"  # relu | identity
    admissible: bool = False
    mlp_depth: int = 1
    mlp_activation: str = "relu"
    readout: str = "node"  # node | mean
    lambda_lp: float = 1.0
    spatial: bool = True
    spectral: bool = True

    def __post_init__(self):
        checks = {
            "mode": ("independent", "shared"),
            "aggregation": ("sum", "concat"),
            "residual": ("standard", "wavelet", "none"),
            "activation": ("relu", "identity"),
            "mlp_activation": ("relu", "identity"),
            "readout": ("node", "mean"),
            "window": ("cosine", "none"),
        }
        for name, allowed in checks.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.rho < 0 or self.J < 0 or self.d < 1 or self.z < 1 or self.mlp_depth < 1:
            raise ValueError("rho, J >= 0 and d, z, mlp_depth >= 1 required")
        if not 0.0 < self.lambda_cut <= 2.0:
            raise ValueError("lambda_cut must lie in (0, 2]")
        if self.mode == "shared" and self.J < 1:
            raise ValueError("shared mode needs J >= 1")

    @property
    def input_dim(self):
        return self.d_in + self.pe_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class MlpParams:
    weights: list
    biases: list
    activation: str = "relu"


@dataclass
class LayerParams:
    phi: WaveletFilterParams
    psis: list  # J independent wavelets, or a single shared mother wavelet
    mlp: MlpParams
    scales: ScaleParams | None = None
    proj: np.ndarray | None = None
    config: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class ModelParams:
    config: ModelConfig
    w_in: np.ndarray
    b_in: np.ndarray
    layers: list
    w_out: np.ndarray
    b_out: np.ndarray

    def copy(self):
        return copy.deepcopy(self)


# -- parameter access -----------------------------------------------------------

def _filter_tensors(prefix, f):
    out = {}
    if f.cheb is not None:
        out[f"{prefix}.omega"] = f.cheb.omega
    if f.spec is not None:
        out[f"{prefix}.W"] = f.spec.W
    return out


def named_tensors(m):
    """Every learnable array of ``m`` keyed by path; values are the live arrays."""
    out = {"input.W": m.w_in, "input.b": m.b_in}
    for li, lp in enumerate(m.layers):
        pre = f"layers.{li}"
        for i, (W, b) in enumerate(zip(lp.mlp.weights, lp.mlp.biases)):
            out[f"{pre}.mlp.{i}.W"] = W
            out[f"{pre}.mlp.{i}.b"] = b
        out.update(_filter_tensors(f"{pre}.phi", lp.phi))
        if lp.config.mode == "shared":
            out.update(_filter_tensors(f"{pre}.psi", lp.psis[0]))
            out[f"{pre}.scales.t_L"] = lp.scales.t_L
            out[f"{pre}.scales.t_U"] = lp.scales.t_U
        else:
            for j, f in enumerate(lp.psis):
                out.update(_filter_tensors(f"{pre}.psi.{j}", f))
        if lp.proj is not None:
            out[f"{pre}.proj"] = lp.proj
    out["head.W"] = m.w_out
    out["head.b"] = m.b_out
    return out


def with_tensors(m, tensors):
    """Copy of ``m`` with arrays replaced by ``tensors`` (same keys and shapes)."""
    new = m.copy()
    live = named_tensors(new)
    if live.keys() != tensors.keys():
        raise KeyError("tensor keys do not match the model structure")
    for k, a in live.items():
        src = np.asarray(tensors[k], dtype=np.float64)
        if src.shape != a.shape:
            raise ValueError(f"{k}: shape {src.shape} != {a.shape}")
        a[...] = src
    return new


# -- initialization -------------------------------------------------------------

def xavier_uniform(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def _init_filter(rng, cfg, role):
    cheb = ChebyshevCoefficients.identity(cfg.rho) if cfg.spatial else None
    spec = None
    if cfg.spectral:
        W = xavier_uniform(rng, cfg.z, cfg.d)
        spec = SpectralFilterParams(W, lambda_cut=cfg.lambda_cut, window=cfg.window)
    return WaveletFilterParams(cheb=cheb, spec=spec, admissible=cfg.admissible, role=role)


def init_params(cfg, seed=0):
    """Chebyshev vectors start at ``(1, 0, ..., 0)``; dense weights Xavier-uniform.

    Shared-mode scales start spanning ``[0.5, 2 * lambda_lp]``.
    """
    rng = np.random.default_rng(seed)
    d = cfg.d
    w_in = xavier_uniform(rng, cfg.input_dim, d) if cfg.input_dim else np.zeros((0, d))
    b_in = np.zeros(d)
    layers = []
    for _ in range(cfg.n_layers):
        mlp = MlpParams(
            weights=[xavier_uniform(rng, d, d) for _ in range(cfg.mlp_depth)],
            biases=[np.zeros(d) for _ in range(cfg.mlp_depth)],
            activation=cfg.mlp_activation,
        )
        phi = _init_filter(rng, cfg, "scaling")
        if cfg.mode == "shared":
            psis = [_init_filter(rng, cfg, "wavelet")]
            scales = ScaleParams(t_L=softplus_inv(0.5), t_U=softplus_inv(2.0),
                                 lambda_lp=cfg.lambda_lp, J=cfg.J)
        else:
            psis = [_init_filter(rng, cfg, "wavelet") for _ in range(cfg.J)]
            scales = None
        proj = xavier_uniform(rng, (cfg.J + 1) * d, d) if cfg.aggregation == "concat" else None
        layers.append(LayerParams(phi=phi, psis=psis, mlp=mlp, scales=scales, proj=proj, config=cfg))
    w_out = xavier_uniform(rng, d, cfg.d_out)
    b_out = np.zeros(cfg.d_out)
    return ModelParams(cfg, w_in, b_in, layers, w_out, b_out)


# -- forward ------------------------------------------------------------------

def _act(name, x):
    return np.maximum(x, 0.0) if name == "relu" else x


def _act_grad(name, x, dy):
    return dy * (x > 0.0) if name == "relu" else dy


def mlp_forward(p, X, keep=False):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != p.weights[0].shape[0]:
        raise ValueError(f"MLP expects {p.weights[0].shape[0]} input columns, got {X.shape[1]}")
    pre = []
    h = X
    inputs = []
    last = len(p.weights) - 1
    for i, (W, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(h)
        a = h @ W + b
        pre.append(a)
        h = a if i == last else _act(p.activation, a)
    if keep:
        return h, {"inputs": inputs, "pre": pre}
    return h


def mlp_backward(p, cache, dY):
    dWs, dbs = [None] * len(p.weights), [None] * len(p.weights)
    g = dY
    for i in range(len(p.weights) - 1, -1, -1):
        if i != len(p.weights) - 1:
            g = _act_grad(p.activation, cache["pre"][i], g)
        dWs[i] = cache["inputs"][i].T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ p.weights[i].T
    return g, dWs, dbs


def layer_filters(lp):
    """``(key, filter, scale)`` for the scaling branch then each wavelet branch."""
    cfg = lp.config
    wavelet_res = cfg.residual == "wavelet"

    def prep(f):
        return replace(f, identity_residual=True) if wavelet_res else f

    out = [("phi", lp.phi, 1.0)]
    if cfg.mode == "shared":
        for j, s in enumerate(compute_scales(lp.scales)):
            out.append(("psi", prep(lp.psis[0]), float(s)))
    else:
        for j, f in enumerate(lp.psis):
            out.append((f"psi.{j}", prep(f), 1.0))
    return out


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced in {where}")


def layer_forward(lp, lap, evd, H, keep=False, index=0):
    cfg = lp.config
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != cfg.d:
        raise ValueError(f"layer expects (n, {cfg.d}) input, got {H.shape}")
    F, mlp_cache = mlp_forward(lp.mlp, H, keep=True)
    branches = []
    outs = []
    memo = {}  # every branch filters the same F
    for key, f, s in layer_filters(lp):
        Y, fc = hybrid_forward(f, lap, evd, F, s, keep=keep, memo=memo)
        branches.append((key, f, s, Y, fc))
        outs.append(_act(cfg.activation, Y))
    if cfg.aggregation == "sum":
        out = np.sum(outs, axis=0)
        cat = None
    else:
        cat = np.concatenate(outs, axis=1)
        out = cat @ lp.proj
    if cfg.residual == "standard":
        out = out + H
    _check_finite(out, f"layer {index}")
    if keep:
        return out, {"H": H, "F": F, "mlp": mlp_cache, "branches": branches, "cat": cat}
    return out


def layer_backward(lp, lap, evd, cache, dOut):
    """Adjoint of one layer: ``(dH, grads)`` with grads keyed like :func:`named_tensors` suffixes."""
    cfg = lp.config
    grads = {}
    dH = dOut.copy() if cfg.residual == "standard" else np.zeros_like(cache["H"])
    nb = len(cache["branches"])
    d = cfg.d
    if cfg.aggregation == "sum":
        dA = [dOut] * nb
    else:
        grads["proj"] = cache["cat"].T @ dOut
        dcat = dOut @ lp.proj.T
        dA = [dcat[:, i * d:(i + 1) * d] for i in range(nb)]
    dF = np.zeros_like(cache["F"])
    d_scales = []
    shared = cfg.mode == "shared"
    for (key, f, s, Y, fc), da in zip(cache["branches"], dA):
        dY = _act_grad(cfg.activation, Y, da)
        need_scale = shared and key == "psi"
        dX, d_om, d_W, d_s = hybrid_vjp(f, lap, evd, fc, dY, need_scale=need_scale)
        dF += dX
        for name, g in (("omega", d_om), ("W", d_W)):
            if g is not None:
                k = f"{key}.{name}"
                grads[k] = grads[k] + g if k in grads else g
        if need_scale:
            d_scales.append(d_s)
    if shared:
        _, (ds_dtl, ds_dtu) = compute_scales(lp.scales, with_grad=True)
        ds = np.array(d_scales)
        grads["scales.t_L"] = np.asarray(ds @ ds_dtl)
        grads["scales.t_U"] = np.asarray(ds @ ds_dtu)
    dmlp, dWs, dbs = mlp_backward(lp.mlp, cache["mlp"], dF)
    for i, (gW, gb) in enumerate(zip(dWs, dbs)):
        grads[f"mlp.{i}.W"] = gW
        grads[f"mlp.{i}.b"] = gb
    return dH + dmlp, grads


def model_inputs(m, g, evd):
    """Raw features concatenated with ``pe_dim`` positional encodings."""
    cfg = m.config
    parts = []
    if cfg.d_in:
        if g.features is None:
            raise ValueError(f"model expects {cfg.d_in} feature columns but graph has none")
        if g.features.shape[1] != cfg.d_in:
            raise ValueError(f"graph has {g.features.shape[1]} feature columns, model expects {cfg.d_in}")
        parts.append(g.features)
    if cfg.pe_dim:
        parts.append(positional_encodings(evd, cfg.pe_dim))
    if not parts:
        raise ValueError("model has neither features nor positional encodings")
    return np.concatenate(parts, axis=1)


def model_forward(m, g, evd, lap=None, X0=None, keep=False):
    """Features (+PE) -> input projection -> layers -> readout -> head."""
    cfg = m.config
    lap = build_normalized_laplacian(g) if lap is None else lap
    X0 = model_inputs(m, g, evd) if X0 is None else X0
    H = X0 @ m.w_in + m.b_in
    layer_caches = []
    for i, lp in enumerate(m.layers):
        if keep:
            H, c = layer_forward(lp, lap, evd, H, keep=True, index=i)
            layer_caches.append(c)
        else:
            H = layer_forward(lp, lap, evd, H, index=i)
    R = H.mean(axis=0, keepdims=True) if cfg.readout == "mean" else H
    out = R @ m.w_out + m.b_out
    _check_finite(out, "readout head")
    if keep:
        return out, {"X0": X0, "H": H, "R": R, "layers": layer_caches, "lap": lap}
    return out


def model_backward(m, evd, cache, dOut):
    grads = {"head.W": cache["R"].T @ dOut, "head.b": dOut.sum(axis=0)}
    dR = dOut @ m.w_out.T
    H = cache["H"]
    dH = np.repeat(dR / H.shape[0], H.shape[0], axis=0) if m.config.readout == "mean" else dR
    lap = cache["lap"]
    for i in range(len(m.layers) - 1, -1, -1):
        dH, lg = layer_backward(m.layers[i], lap, evd, cache["layers"][i], dH)
        for k, v in lg.items():
            grads[f"layers.{i}.{k}"] = v
    grads["input.W"] = cache["X0"].T @ dH
    grads["input.b"] = dH.sum(axis=0)
    return grads


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(m, path):
    tensors = named_tensors(m)
    doc = {
        "config": m.config.to_dict(),
        "params": {k: io.encode_array(v) for k, v in sorted(tensors.items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = ModelConfig.from_dict(doc["config"])
    skeleton = init_params(cfg, seed=0)
    return with_tensors(skeleton, {k: io.decode_array(v) for k, v in doc["params"].items()})
