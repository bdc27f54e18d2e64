"""Dense (Jacobi) and partial (Lanczos) eigendecompositions of the normalized Laplacian."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import io

log = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-8


class ConvergenceError(RuntimeError):
    """Raised when an eigensolver exhausts its iteration budget.

    ``diagnostic`` holds whatever was achieved (eigenvalues, residuals).
    """

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


@dataclass(frozen=True)
class DenseEigendecomposition:
    U: np.ndarray = field(repr=False)
    lambdas: np.ndarray

    @property
    def n(self):
        return self.U.shape[0]


@dataclass(frozen=True)
class PartialEigendecomposition:
    U: np.ndarray = field(repr=False)
    lambdas: np.ndarray
    residual_norms: np.ndarray
    tol: float = 1e-8
    seed: int = 0
    graph_hash: str = ""

    @property
    def k(self):
        return int(self.lambdas.size)

    @property
    def n(self):
        return self.U.shape[0]

    @classmethod
    def from_dense(cls, dense, k=None, lap=None):
        """Truncate a dense decomposition to its ``k`` lowest pairs."""
        k = dense.n if k is None else k
        U = dense.U[:, :k].copy()
        lam = dense.lambdas[:k].copy()
        if lap is not None:
            res = np.linalg.norm(lap.matrix @ U - U * lam, axis=0)
        else:
            res = np.zeros(k)
        return cls(U=U, lambdas=lam, residual_norms=res, tol=np.inf)


# -- canonical forms --------------------------------------------------------

def canonicalize_signs(U):
    """Flip columns so the largest-magnitude entry (lowest index on ties) is positive."""
    U = np.array(U, dtype=np.float64, copy=True)
    if U.size == 0:
        return U
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def _clusters(lambdas, tol=DEGENERACY_TOL):
    """Split sorted eigenvalues into runs whose neighbours differ by < tol."""
    out, start = [], 0
    for i in range(1, lambdas.size + 1):
        if i == lambdas.size or lambdas[i] - lambdas[i - 1] >= tol:
            out.append((start, i))
            start = i
    return out


def _canonical_cluster_basis(Uc):
    # Gram-Schmidt on the projector columns in index order: depends only on span(Uc)
    n, c = Uc.shape
    P = Uc @ Uc.T
    basis = []
    for i in range(n):
        v = P[:, i].copy()
        for b in basis:
            v -= (b @ v) * b
        for b in basis:
            v -= (b @ v) * b
        nv = np.linalg.norm(v)
        if nv > 1e-6:
            basis.append(v / nv)
            if len(basis) == c:
                break
    if len(basis) < c:
        return Uc
    return np.stack(basis, axis=1)


def canonicalize(U, lambdas):
    """Sort ascending, fix degenerate-cluster bases, canonicalize signs."""
    order = np.argsort(lambdas, kind="stable")
    lambdas = np.asarray(lambdas)[order]
    U = np.asarray(U)[:, order]
    U = U.copy()
    for a, b in _clusters(lambdas):
        if b - a > 1:
            U[:, a:b] = _canonical_cluster_basis(U[:, a:b])
    return canonicalize_signs(U), lambdas


# -- dense oracle: cyclic Jacobi ----------------------------------------------

def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        rounds.append(np.array(pairs, dtype=np.int64).reshape(-1, 2))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _off_norm(A):
    off = A - np.diag(np.diag(A))
    return np.sqrt(np.sum(off * off))


def jacobi_eigh(A, tol=1e-12, max_sweeps=100):
    """Eigen-decompose a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the ``n/2`` rotations of a round touch disjoint rows/columns and can
    be applied together. Stops when the off-diagonal Frobenius norm drops to
    ``tol``. Returns ``(eigenvalues, eigenvectors, sweeps)``, unsorted.
    """
    A = np.array(A, dtype=np.float64, copy=True)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(A, A.T, rtol=0, atol=1e-14 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ValueError("matrix must be symmetric")
    V = np.eye(n)
    rounds = _round_robin(n)
    for sweep in range(max_sweeps + 1):
        if _off_norm(A) <= tol:
            return np.diag(A).copy(), V, sweep
        if sweep == max_sweeps:
            break
        for pairs in rounds:
            if pairs.size == 0:
                continue
            p, q = pairs[:, 0], pairs[:, 1]
            apq = A[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (A[q, q] - A[p, p]) / (2.0 * apq)
            big = np.abs(theta) > 1e150
            th = np.where(big, 1.0, theta)
            t = np.where(big, 0.5 / np.where(big, theta, 1.0),
                         np.sign(th) / (np.abs(th) + np.sqrt(th * th + 1.0)))
            t[theta == 0.0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # A <- J^T A J, V <- V J, with col_p' = c col_p - s col_q, col_q' = s col_p + c col_q
            Ap, Aq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            Ap, Aq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = Ap * c - Aq * s
            A[:, q] = Ap * s + Aq * c
            A[p, q] = 0.0
            A[q, p] = 0.0
            Vp, Vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = Vp * c - Vq * s
            V[:, q] = Vp * s + Vq * c
        A = 0.5 * (A + A.T)
    raise ConvergenceError(
        f"Jacobi did not converge in {max_sweeps} sweeps (off-norm {_off_norm(A):.3e})",
        {"off_norm": _off_norm(A), "lambdas": np.sort(np.diag(A))},
    )


def dense_evd(lap, max_n=512, tol=1e-12, max_sweeps=100):
    if lap.n > max_n:
        raise ValueError(f"dense oracle limited to n <= {max_n}, got n = {lap.n}")
    lam, V, _ = jacobi_eigh(lap.toarray(), tol=tol, max_sweeps=max_sweeps)
    U, lam = canonicalize(V, lam)
    return DenseEigendecomposition(U=U, lambdas=lam)


# -- partial decomposition: deflated Lanczos ----------------------------------

def _orthogonalize(v, Q):
    # two passes of classical Gram-Schmidt ("twice is enough")
    if Q.shape[1]:
        v = v - Q @ (Q.T @ v)
        v = v - Q @ (Q.T @ v)
    return v


def _lanczos_run(matvec, locked, v0, need, tol, budget, max_basis):
    """Lanczos in the orthogonal complement of ``locked`` from start vector ``v0``.

    Stops once the ``need`` smallest Ritz values have converged (with
    ``need == 0``: once the smallest has), on an invariant subspace, or when
    the matvec budget runs out. Returns converged Ritz values and vectors and
    the number of matvecs used.
    """
    n = v0.size
    cap = min(max_basis, 64)
    Q = np.empty((n, cap))
    alphas, betas = [], []
    q = _orthogonalize(v0, locked)
    q /= np.linalg.norm(q)
    q_prev = np.zeros(n)
    beta = 0.0
    m = 0
    while True:
        if m == cap:
            cap = min(max_basis, 2 * cap)
            Q = np.concatenate([Q, np.empty((n, cap - Q.shape[1]))], axis=1)
        Q[:, m] = q
        w = matvec(q)
        alpha = q @ w
        w = w - alpha * q - beta * q_prev
        w = _orthogonalize(w, locked)
        w = _orthogonalize(w, Q[:, : m + 1])
        alphas.append(alpha)
        m += 1
        beta = np.linalg.norm(w)
        invariant = beta <= 1e-12 or m == max_basis
        exhausted = invariant or m >= budget
        if exhausted or m % 5 == 0 or m <= 2 * max(need, 1):
            if m > 1:
                theta, S = eigh_tridiagonal(np.array(alphas), np.array(betas))
            else:
                theta, S = np.array(alphas), np.ones((1, 1))
            conv = np.abs(beta * S[-1, :]) <= 0.1 * tol
            if invariant:
                conv[:] = True
            want = max(need, 1)
            if exhausted or (m >= want and conv[:want].all()):
                sel = np.flatnonzero(conv)
                return theta[sel], Q[:, :m] @ S[:, sel], m
        betas.append(beta)
        q_prev = q
        q = w / beta


def partial_evd(lap, k, tol=1e-8, max_iter=None, seed=0, graph=None):
    """Lowest ``k`` eigenpairs of ``lap`` via deflated Lanczos.

    The kernel direction ``D^{1/2} 1`` is locked up front (exact, eigenvalue 0).
    Each further run starts from a seeded random vector orthogonal to all
    locked vectors and locks the Ritz pairs that converged. A final run whose
    smallest converged Ritz value lies at or above the current ``k``-th
    locked eigenvalue certifies that no smaller eigenvalue was missed, which
    is what catches repeated eigenvalues a single Krylov space cannot see.
    """
    n = lap.n
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= n = {n}, got {k}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    max_iter = max_iter if max_iter is not None else max(50 * n, 2000)
    L = lap.matrix

    def matvec(x):
        return L @ x

    # binary adjacency: degree = off-diagonal nonzeros per row
    deg = np.diff(L.indptr) - 1
    kv = np.sqrt(deg.astype(np.float64))
    vecs, vals = [kv / np.linalg.norm(kv)], [0.0]
    used = 0
    while len(vecs) < n and used < max_iter:
        locked = np.stack(vecs, axis=1)
        srt = np.sort(vals)
        need = max(k - len(vals), 0)
        cutoff = srt[k - 1] if need == 0 else np.inf
        v0 = rng.uniform(-1.0, 1.0, size=n)
        if np.linalg.norm(_orthogonalize(v0, locked)) < 1e-10:
            break
        theta, V, u = _lanczos_run(matvec, locked, v0, need, tol, max_iter - used, n - len(vecs))
        used += u
        new = [(t, V[:, i]) for i, t in enumerate(theta)
               if need > 0 or t < cutoff - DEGENERACY_TOL]
        if need == 0 and theta.size and not new:
            break
        for t, v in new:
            v = _orthogonalize(v, np.stack(vecs, axis=1))
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                vecs.append(v / nv)
                vals.append(float(t))
    U = np.stack(vecs, axis=1)
    # Rayleigh-Ritz on the locked basis for clean orthogonality and eigenvalues
    U, _ = np.linalg.qr(U)
    H = U.T @ (L @ U)
    lam, Y = np.linalg.eigh(0.5 * (H + H.T))
    U = U @ Y[:, :k]
    lam = lam[:k]
    U, lam = canonicalize(U, lam)
    res = np.linalg.norm(L @ U - U * lam, axis=0)
    if lam.size < k or np.any(res > tol):
        raise ConvergenceError(
            f"Lanczos did not reach tol={tol:g} for k={k} within {max_iter} matvecs",
            {"lambdas": lam, "residual_norms": res, "matvecs": used},
        )
    return PartialEigendecomposition(
        U=U, lambdas=lam, residual_norms=res, tol=tol, seed=seed,
        graph_hash=graph.content_hash() if graph is not None else "",
    )


def positional_encodings(evd, p, strict=False):
    """First ``p`` nontrivial eigenvectors (column 0 skipped), zero-padded if short."""
    n = evd.n
    if p <= 0:
        return np.zeros((n, 0))
    avail = max(evd.k - 1, 0)
    if p > avail:
        if strict:
            raise ValueError(f"requested {p} encodings but only {avail} nontrivial eigenvectors")
        warnings.warn(f"padding positional encodings: requested {p}, have {avail}", stacklevel=2)
    out = np.zeros((n, p))
    take = min(p, avail)
    out[:, :take] = evd.U[:, 1 : 1 + take]
    return out


# -- cache file --------------------------------------------------------------

def save_evd(evd, path):
    doc = {
        "n": evd.n,
        "k": evd.k,
        "tol": evd.tol,
        "seed": evd.seed,
        "graph_hash": evd.graph_hash,
        "lambdas": io.encode_array(evd.lambdas),
        "U": io.encode_array(evd.U),
        "residual_norms": io.encode_array(evd.residual_norms),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_evd(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return PartialEigendecomposition(
        U=io.decode_array(doc["U"]),
        lambdas=io.decode_array(doc["lambdas"]),
        residual_norms=io.decode_array(doc["residual_norms"]),
        tol=doc["tol"],
        seed=doc["seed"],
        graph_hash=doc["graph_hash"],
    )


def cached_partial_evd(lap, graph, k, path, tol=1e-8, seed=0):
    """Load the decomposition from ``path`` if it matches; otherwise compute and store it."""
    path = Path(path)
    if path.exists():
        evd = load_evd(path)
        if (evd.graph_hash == graph.content_hash() and evd.k == k
                and evd.seed == seed and evd.tol == tol):
            log.info("evd cache hit: %s", path)
            return evd, True
        log.info("evd cache stale, recomputing: %s", path)
    evd = partial_evd(lap, k, tol=tol, seed=seed, graph=graph)
    save_evd(evd, path)
    return evd, False
