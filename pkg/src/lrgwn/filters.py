"""Hybrid graph wavelet filters: Chebyshev spatial part plus truncated-spectrum part.

A filter's response at frequency ``lam`` is ``P(lam) + S(lam)`` where ``P`` is a
Chebyshev expansion (applied by recurrence on the sparse Laplacian) and ``S``
is a Gaussian-smearing expansion (applied through the retained eigenvectors).
Wavelet filters may be made admissible by subtracting the zero-frequency
response of both parts; the correction is applied at evaluation time so the
stored parameters stay unconstrained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np
from numpy.polynomial import chebyshev as npcheb

from .graph import LAMBDA_MAX, hop_distances, laplacian_matmat

WINDOWS = ("cosine", "none")


# -- parameter types ---------------------------------------------------------

@dataclass(frozen=True)
class ChebyshevCoefficients:
    omega: np.ndarray
    lambda_max: float = LAMBDA_MAX

    def __post_init__(self):
        omega = np.atleast_1d(np.asarray(self.omega, dtype=np.float64))
        if omega.ndim != 1 or omega.size == 0:
            raise ValueError("omega must be a non-empty vector")
        if not np.isfinite(omega).all():
            raise ValueError("omega must be finite")
        object.__setattr__(self, "omega", omega)

    @property
    def rho(self):
        return self.omega.size - 1

    @classmethod
    def identity(cls, rho):
        w = np.zeros(rho + 1)
        w[0] = 1.0
        return cls(w)


@dataclass(frozen=True)
class SpectralFilterParams:
    """Gaussian-smearing spectral filter with ``z`` centres on ``[0, lambda_cut]``.

    ``W`` has shape ``(z, d)``; the response at ``lam`` is ``basis(lam) @ W``.
    """

    W: np.ndarray
    lambda_cut: float = LAMBDA_MAX
    window: str = "cosine"
    lambda_max: float = LAMBDA_MAX

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim == 1:
            W = W[:, None]
        if W.ndim != 2 or W.shape[0] == 0:
            raise ValueError("W must be a (z, d) matrix")
        if not np.isfinite(W).all():
            raise ValueError("W must be finite")
        if not 0.0 < self.lambda_cut <= self.lambda_max:
            raise ValueError(f"lambda_cut must lie in (0, {self.lambda_max}]")
        if self.window not in WINDOWS:
            raise ValueError(f"window must be one of {WINDOWS}")
        object.__setattr__(self, "W", W)

    @property
    def z(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]

    @property
    def centers(self):
        return np.linspace(0.0, self.lambda_cut, self.z)

    @property
    def gamma(self):
        # precision from the centre spacing; a single centre uses lambda_cut as width
        spacing = self.lambda_cut / (self.z - 1) if self.z > 1 else self.lambda_cut
        return 1.0 / (2.0 * spacing**2)

    @classmethod
    def zeros(cls, z, d, lambda_cut=LAMBDA_MAX, window="cosine"):
        return cls(np.zeros((z, d)), lambda_cut=lambda_cut, window=window)


@dataclass(frozen=True)
class WaveletFilterParams:
    cheb: ChebyshevCoefficients | None
    spec: SpectralFilterParams | None
    admissible: bool = False
    role: str = "wavelet"
    identity_residual: bool = False

    def __post_init__(self):
        if self.role not in ("scaling", "wavelet"):
            raise ValueError("role must be 'scaling' or 'wavelet'")

    @property
    def corrected(self):
        return self.admissible and self.role == "wavelet"


@dataclass(frozen=True)
class ScaleParams:
    t_L: np.ndarray
    t_U: np.ndarray
    lambda_lp: float = 1.0
    J: int = 2

    def __post_init__(self):
        object.__setattr__(self, "t_L", np.asarray(self.t_L, dtype=np.float64))
        object.__setattr__(self, "t_U", np.asarray(self.t_U, dtype=np.float64))
        if self.lambda_lp <= 0:
            raise ValueError("lambda_lp must be positive")
        if self.J < 1:
            raise ValueError("J must be >= 1")

    @classmethod
    def from_bounds(cls, s_min, s_max, lambda_lp=1.0, J=2):
        """Raw parameters whose mapped scales span ``[s_min, s_max]``."""
        return cls(t_L=softplus_inv(s_min), t_U=softplus_inv(s_max / lambda_lp),
                   lambda_lp=lambda_lp, J=J)


@dataclass(frozen=True)
class Kernel:
    fn: Callable = field(repr=False)
    name: str = "kernel"

    def __call__(self, lam):
        return self.fn(np.asarray(lam, dtype=np.float64))


# -- Chebyshev part ----------------------------------------------------------

def _check_rows(lap, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != lap.n:
        raise ValueError(f"signal has {X.shape[0]} rows, graph has {lap.n} nodes")
    return X


def chebyshev_terms(lap, X, rho, scale=1.0, lambda_max=LAMBDA_MAX):
    """``[T_0(Lt) X, ..., T_rho(Lt) X]`` with ``Lt = (2 scale / lambda_max) L - I``."""
    X = _check_rows(lap, X)
    a = 2.0 * scale / lambda_max

    terms = [X]
    if rho >= 1:
        t = laplacian_matmat(lap, X)
        t *= a
        t -= X
        terms.append(t)
    for _ in range(2, rho + 1):
        # 2 (a L - I) T_{i-1} - T_{i-2}, updated in place to limit temporaries
        t = laplacian_matmat(lap, terms[-1])
        t *= 2.0 * a
        t -= 2.0 * terms[-1]
        t -= terms[-2]
        terms.append(t)
    return terms


def _cheb_combine(omega, lap, X, scale, lambda_max):
    # recurrence with two rolling buffers; no term list kept
    a = 2.0 * scale / lambda_max
    t_prev = X
    out = omega[0] * X
    if omega.size == 1:
        return out
    t_cur = a * laplacian_matmat(lap, X) - X
    out = out + omega[1] * t_cur
    for w in omega[2:]:
        t_prev, t_cur = t_cur, 2.0 * (a * laplacian_matmat(lap, t_cur) - t_cur) - t_prev
        out = out + w * t_cur
    return out


def chebyshev_apply(c, lap, X, scale=1.0):
    """``sum_i omega_i T_i(Lt) X``; ``scale`` dilates the operator to ``scale * L``."""
    X = _check_rows(lap, X)
    return _cheb_combine(c.omega, lap, X, scale, c.lambda_max)


def _cheb_eval(omega, x):
    """Clenshaw evaluation of ``sum_i omega_i T_i(x)``; no domain check."""
    x = np.asarray(x, dtype=np.float64)
    b1 = np.zeros_like(x)
    b2 = np.zeros_like(x)
    for w in omega[:0:-1]:
        b1, b2 = 2.0 * x * b1 - b2 + w, b1
    return x * b1 - b2 + omega[0]


def chebyshev_response(c, lam, scale=1.0):
    """Vectorized response at ``scale * lam`` (extrapolates past ``lambda_max``)."""
    mu = scale * np.asarray(lam, dtype=np.float64)
    return _cheb_eval(c.omega, 2.0 * mu / c.lambda_max - 1.0)


def chebyshev_response_at(c, lam):
    if not 0.0 <= lam <= c.lambda_max:
        raise ValueError(f"lambda={lam} outside [0, {c.lambda_max}]")
    return float(chebyshev_response(c, lam))


def chebyshev_zero_response(c):
    """``P(0) = sum_i (-1)^i omega_i``."""
    return float(np.sum(c.omega * (-1.0) ** np.arange(c.omega.size)))


# -- spectral part -------------------------------------------------------------

def _window(s, mu):
    if s.window == "none":
        return np.ones_like(mu), np.zeros_like(mu)
    inside = mu < s.lambda_cut
    arg = np.pi * mu / (2.0 * s.lambda_cut)
    w = np.where(inside, np.cos(arg) ** 2, 0.0)
    dw = np.where(inside, -(np.pi / (2.0 * s.lambda_cut)) * np.sin(2.0 * arg), 0.0)
    return w, dw


def _basis(s, mu, with_derivative=False):
    """Windowed Gaussians at ``mu`` (shape ``mu.shape + (z,)``), optionally d/dmu."""
    mu = np.asarray(mu, dtype=np.float64)
    diff = mu[..., None] - s.centers
    g = np.exp(-s.gamma * diff**2)
    w, dw = _window(s, mu)
    B = w[..., None] * g
    if not with_derivative:
        return B
    dB = dw[..., None] * g + w[..., None] * (-2.0 * s.gamma * diff * g)
    return B, dB


def smearing_basis(s, lam):
    if not 0.0 <= lam <= s.lambda_max:
        raise ValueError(f"lambda={lam} outside [0, {s.lambda_max}]")
    return _basis(s, np.float64(lam))


def spectral_response(s, lam):
    return smearing_basis(s, lam) @ s.W


def _dilated(s, lambdas, scale):
    # dilated argument, clamped to the spectral domain
    raw = scale * np.asarray(lambdas, dtype=np.float64)
    clamped = raw > s.lambda_max
    return np.where(clamped, s.lambda_max, raw), clamped


def spectral_response_matrix(s, lambdas, scale=1.0):
    """``R[u, v] = S_v(scale * lambda_u)`` for a vector of eigenvalues."""
    mu, _ = _dilated(s, lambdas, scale)
    return _basis(s, mu) @ s.W


def spectral_zero_response(s):
    return _basis(s, np.float64(0.0)) @ s.W


def spectral_apply(s, evd, X, scale=1.0):
    """``U (R * (U^T X))`` with the ``k x d`` response matrix ``R``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != evd.n:
        raise ValueError(f"signal has {X.shape[0]} rows, decomposition has {evd.n}")
    if X.shape[1] != s.d:
        raise ValueError(f"signal has {X.shape[1]} channels, spectral filter has {s.d}")
    R = spectral_response_matrix(s, evd.lambdas, scale)
    return evd.U @ (R * (evd.U.T @ X))


# -- admissibility ------------------------------------------------------------

class CorrectedResponse(NamedTuple):
    polynomial: Callable
    spectral: Callable


def _offsets(f):
    """Constants subtracted from the polynomial and spectral parts.

    Admissible wavelets subtract their zero-frequency response. With the
    identity residual an extra unit goes back out, split evenly across the
    parts that are present, so the residual filter still vanishes at 0.
    """
    p_off = 0.0
    s_off = None
    if f.corrected:
        if f.cheb is not None:
            p_off = chebyshev_zero_response(f.cheb)
        if f.spec is not None:
            s_off = spectral_zero_response(f.spec)
        if f.identity_residual:
            parts = (f.cheb is not None) + (f.spec is not None)
            share = 1.0 / parts if parts else 0.0
            if f.cheb is not None:
                p_off += share
            if f.spec is not None:
                s_off = s_off + share
    return p_off, s_off


def admissible_correct(f):
    """Zero-frequency corrected polynomial and spectral responses of a wavelet."""
    if f.role != "wavelet":
        raise ValueError("admissibility applies to wavelet filters only")
    g = replace(f, admissible=True)
    p_off, s_off = _offsets(g)

    def poly(lam, scale=1.0):
        if g.cheb is None:
            return np.zeros_like(np.asarray(lam, dtype=np.float64))
        return chebyshev_response(g.cheb, lam, scale) - p_off

    def spec(lam, scale=1.0):
        lam = np.asarray(lam, dtype=np.float64)
        if g.spec is None:
            return np.zeros(lam.shape + (1,))
        return spectral_response_matrix(g.spec, lam, scale) - s_off

    return CorrectedResponse(poly, spec)


def admissible_omega0(c, s0):
    """``omega_0`` that zeroes ``P(0) + S(0)`` per channel given the rest of ``omega``."""
    if c.rho < 1:
        raise ValueError("need rho >= 1")
    i = np.arange(1, c.rho + 1)
    tail = float(np.sum((-1.0) ** (i + 1) * c.omega[1:]))
    return tail - np.atleast_1d(np.asarray(s0, dtype=np.float64))


def wavelet_residual_correct(f):
    """Wavelet with the identity folded in, ``S~ + P~ + 1``, still zero at ``lam = 0``."""
    if f.role != "wavelet" or not f.admissible:
        raise ValueError("wavelet residual correction needs an admissible wavelet")
    return replace(f, identity_residual=True)


def response_parts(f, lam, scale=1.0):
    """Response on a grid: ``(total (len, d), polynomial (len,), spectral (len, d))``.

    Includes the zero-frequency corrections and the identity residual if set.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    p_off, s_off = _offsets(f)
    poly = np.zeros(lam.shape)
    if f.cheb is not None:
        poly = chebyshev_response(f.cheb, lam, scale) - p_off
    if f.spec is not None:
        spec = spectral_response_matrix(f.spec, lam, scale)
        if s_off is not None:
            spec = spec - s_off
    else:
        spec = np.zeros(lam.shape + (1,))
    total = poly[:, None] + spec
    if f.identity_residual:
        total = total + 1.0
    return total, poly, spec


def response_at(f, lam, scale=1.0):
    return response_parts(f, [lam], scale)[0][0]


# -- hybrid application ---------------------------------------------------------

def hybrid_apply(f, lap, evd, X, scale=1.0):
    """``P(L) X + U S(Lambda) U^T X`` with any corrections the filter carries."""
    return hybrid_forward(f, lap, evd, X, scale)[0]


def shared_filter_apply(f, scale, lap, evd, X):
    """Mother wavelet dilated to ``scale``: ``P(scale L) X + U S(scale Lambda) U^T X``."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    return hybrid_forward(f, lap, evd, X, scale)[0]


def hybrid_forward(f, lap, evd, X, scale=1.0, keep=False, memo=None):
    """Filter ``X`` and (with ``keep``) return what the adjoint needs.

    ``memo`` is an optional dict shared by calls on the same ``X``; Chebyshev
    terms and ``U^T X`` are then computed once for all of them.
    """
    X = _check_rows(lap, X)
    p_off, s_off = _offsets(f)
    cache = {"X": X, "scale": scale}
    Y = np.zeros_like(X)
    if f.cheb is not None:
        if keep or memo is not None:
            key = ("terms", f.cheb.rho, float(scale), f.cheb.lambda_max)
            terms = None if memo is None else memo.get(key)
            if terms is None:
                terms = chebyshev_terms(lap, X, f.cheb.rho, scale, f.cheb.lambda_max)
                if memo is not None:
                    memo[key] = terms
            cache["terms"] = terms
            Yp = f.cheb.omega[0] * terms[0]
            for w, t in zip(f.cheb.omega[1:], terms[1:]):
                Yp += w * t
        else:
            Yp = chebyshev_apply(f.cheb, lap, X, scale)
        if p_off:
            Yp = Yp - p_off * X
        Y = Y + Yp
    if f.spec is not None:
        if evd is None:
            raise ValueError("spectral part needs an eigendecomposition")
        if X.shape[1] != f.spec.d:
            raise ValueError(f"signal has {X.shape[1]} channels, spectral filter has {f.spec.d}")
        mu, clamped = _dilated(f.spec, evd.lambdas, scale)
        B, dB = _basis(f.spec, mu, with_derivative=True)
        R = B @ f.spec.W
        if s_off is not None:
            R = R - s_off
        Xhat = None if memo is None else memo.get("Xhat")
        if Xhat is None:
            Xhat = evd.U.T @ X
            if memo is not None:
                memo["Xhat"] = Xhat
        Y = Y + evd.U @ (R * Xhat)
        if keep:
            cache.update(Xhat=Xhat, B=B, dB=dB, R=R, clamped=clamped)
    if f.identity_residual:
        Y = Y + X
    return Y, cache


def hybrid_vjp(f, lap, evd, cache, dY, need_scale=False):
    """Adjoint of :func:`hybrid_forward`.

    Returns ``dX, d_omega, d_W, d_scale`` (``None`` for absent parts; the
    scale derivative only when ``need_scale``).
    """
    X, scale = cache["X"], cache["scale"]
    p_off, s_off = _offsets(f)
    dX = np.zeros_like(X)
    d_omega = d_W = None
    d_scale = 0.0
    if f.cheb is not None:
        terms = cache["terms"]
        d_omega = np.array([np.sum(t * dY) for t in terms])
        if p_off:
            d_omega -= (-1.0) ** np.arange(f.cheb.omega.size) * np.sum(X * dY)
        # T_i(Lt) is symmetric, so the adjoint is the same polynomial applied to dY
        dX += _cheb_combine(f.cheb.omega, lap, dY, scale, f.cheb.lambda_max) - p_off * dY
        if need_scale and f.cheb.rho >= 1:
            der = npcheb.chebder(f.cheb.omega)
            dP = _cheb_combine(der, lap, X, scale, f.cheb.lambda_max)
            d_scale += (2.0 / f.cheb.lambda_max) * np.sum(dY * laplacian_matmat(lap, dP))
    if f.spec is not None:
        U = evd.U
        Z = U.T @ dY
        dR = Z * cache["Xhat"]
        dX += U @ (cache["R"] * Z)
        d_W = cache["B"].T @ dR
        if f.corrected:
            B0 = _basis(f.spec, np.float64(0.0))
            d_W -= np.outer(B0, dR.sum(axis=0))
        if need_scale:
            live = ~cache["clamped"]
            dmu = np.sum(dR * (cache["dB"] @ f.spec.W), axis=1)
            d_scale += float(np.sum(dmu[live] * evd.lambdas[live]))
    if f.identity_residual:
        dX += dY
    return dX, d_omega, d_W, d_scale


# -- scales ----------------------------------------------------------------------

def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def compute_scales(p, with_grad=False):
    """Log-uniform scales from ``s_max`` down to ``s_min``.

    ``log s_min = log softplus(t_L)``, ``log s_max = log(softplus(t_U) * lambda_lp)``.
    With ``with_grad`` also returns ``(ds/dt_L, ds/dt_U)`` as length-J vectors.
    """
    if not (np.isfinite(p.t_L) and np.isfinite(p.t_U)):
        raise ValueError("scale parameters must be finite")
    a, b = softplus(p.t_L), softplus(p.t_U)
    log_min, log_max = np.log(a), np.log(b * p.lambda_lp)
    if p.J == 1:
        frac = np.zeros(1)
    else:
        frac = np.arange(p.J) / (p.J - 1)
    s = np.exp(log_max + frac * (log_min - log_max))
    if not with_grad:
        return s
    dlogmin = _sigmoid(p.t_L) / a
    dlogmax = _sigmoid(p.t_U) / b
    return s, (s * frac * dlogmin, s * (1.0 - frac) * dlogmax)


# -- reference kernels and oracles ---------------------------------------------

def mexican_hat(scale):
    if scale <= 0:
        raise ValueError("scale must be positive")

    def g(lam):
        x = scale * lam
        return x * x * np.exp(-x * x)

    return Kernel(g, name=f"mexican_hat(s={scale:g})")


def exact_filter_apply(g, dense, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return dense.U @ (g(dense.lambdas)[:, None] * (dense.U.T @ X))


def chebyshev_design(lam, rho, lambda_max=LAMBDA_MAX):
    return npcheb.chebvander(2.0 * np.asarray(lam) / lambda_max - 1.0, rho)


class FitError(RuntimeError):
    pass


def fit_chebyshev_ls(g, rho, grid_size=None, damping=1e-10, lambda_max=LAMBDA_MAX):
    """Damped least-squares Chebyshev fit of ``g`` on a uniform grid over ``[0, lambda_max]``.

    Returns ``(coefficients, sup_error_on_grid)``.
    """
    if grid_size is None:
        grid_size = max(4 * (rho + 1), 2001)
    if grid_size < 4 * (rho + 1):
        raise ValueError(f"grid_size must be >= 4 (rho + 1) = {4 * (rho + 1)}")
    lam = np.linspace(0.0, lambda_max, grid_size)
    V = chebyshev_design(lam, rho, lambda_max)
    y = g(lam)
    G = V.T @ V + damping * np.eye(rho + 1)
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > 1e14:
        raise FitError(f"normal equations ill-conditioned (cond={cond:.2e})")
    omega = np.linalg.solve(G, V.T @ y)
    err = float(np.max(np.abs(V @ omega - y)))
    return ChebyshevCoefficients(omega, lambda_max), err


def fit_spectral_ls(target, lambdas, z, lambda_cut, window="none", rcond=1e-12):
    """Least-squares smearing weights so that ``S(lambdas) ~= target`` (min-norm if underdetermined)."""
    s = SpectralFilterParams.zeros(z, 1, lambda_cut=lambda_cut, window=window)
    B = _basis(s, np.asarray(lambdas, dtype=np.float64))
    W, *_ = np.linalg.lstsq(B, np.asarray(target, dtype=np.float64), rcond=rcond)
    return replace(s, W=W.reshape(z, 1))


def fit_hybrid_filter(g, rho, lambdas, z, lambda_cut, grid_size=None, window="none"):
    """Polynomial LS fit of ``g`` plus a spectral fit of the residual at ``lambdas``.

    ``lambdas`` are the frequencies the spectral part is allowed to act on:
    the retained eigenvalues for a graph, or a dense grid below ``lambda_cut``
    for response-level comparisons. Returns a scaling-role filter (no
    correction); its response is the fitted approximation of ``g``.
    """
    cheb, _ = fit_chebyshev_ls(g, rho, grid_size)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    lambdas = lambdas[lambdas < lambda_cut]
    resid = g(lambdas) - chebyshev_response(cheb, lambdas)
    spec = fit_spectral_ls(resid, lambdas, z, lambda_cut, window=window)
    return WaveletFilterParams(cheb=cheb, spec=spec, admissible=False, role="scaling")


def propagation_energy_profile(apply_fn, g, seed):
    """Output energy of a filtered delta at ``seed``, summed per hop distance."""
    x = np.zeros((g.n, 1))
    x[seed, 0] = 1.0
    y = np.asarray(apply_fn(x))
    node_energy = np.sum(y * y, axis=1)
    hops = hop_distances(g, seed)
    finite = np.isfinite(hops)
    h = hops[finite].astype(np.int64)
    return np.bincount(h, weights=node_energy[finite], minlength=int(h.max()) + 1)


# -- serialization --------------------------------------------------------------

def filter_to_dict(f):
    doc = {"admissible": f.admissible, "role": f.role}
    if f.cheb is not None:
        doc.update(rho=f.cheb.rho, omega=f.cheb.omega.tolist())
    if f.spec is not None:
        doc.update(z=f.spec.z, lambda_cut=f.spec.lambda_cut, window=f.spec.window,
                   W=f.spec.W.tolist())
    if f.identity_residual:
        doc["identity_residual"] = True
    return doc


def filter_from_dict(doc):
    cheb = spec = None
    if "omega" in doc:
        cheb = ChebyshevCoefficients(np.asarray(doc["omega"], dtype=np.float64))
        if "rho" in doc and int(doc["rho"]) != cheb.rho:
            raise ValueError(f"rho={doc['rho']} disagrees with len(omega)-1={cheb.rho}")
    if "W" in doc:
        W = np.asarray(doc["W"], dtype=np.float64)
        if W.ndim == 1:
            W = W[:, None]
        if "z" in doc and int(doc["z"]) != W.shape[0]:
            raise ValueError(f"z={doc['z']} disagrees with W rows={W.shape[0]}")
        spec = SpectralFilterParams(W, lambda_cut=float(doc.get("lambda_cut", LAMBDA_MAX)),
                                    window=doc.get("window", "cosine"))
    return WaveletFilterParams(cheb=cheb, spec=spec, admissible=bool(doc.get("admissible", False)),
                               role=doc.get("role", "wavelet"),
                               identity_residual=bool(doc.get("identity_residual", False)))


def load_filter(path):
    with open(path, encoding="utf-8") as fh:
        return filter_from_dict(json.load(fh))
