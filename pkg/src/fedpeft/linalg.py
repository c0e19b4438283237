"""Deterministic truncated SVD by one-sided (Hestenes) Jacobi rotations.

Column pairs are visited in a fixed round-robin tournament order; each step
rotates a set of disjoint pairs at once, so the sweep is vectorised but the
arithmetic sequence never depends on threading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, RankError

MAX_SWEEPS = 60
TOL = 1e-12


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray  # m x k, orthonormal columns
    S: np.ndarray  # k, descending, non-negative
    V: np.ndarray  # n x k, orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _tournament(n):
    """Round-robin pairings of n (even) indices; n - 1 rounds of n/2 pairs."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        rounds.append((np.array(players[:half]), np.array(players[half:][::-1])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi(a, max_sweeps, tol):
    """Orthogonalise the columns of a (m >= n). Returns (W, V, sweeps)."""
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    if n == 1:
        return w, v, 0
    pad = n % 2
    if pad:
        w = np.hstack([w, np.zeros((m, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    size = n + pad
    rounds = _tournament(size)
    scale = np.linalg.norm(a)
    floor = (np.finfo(float).eps * scale) ** 2
    off = np.inf
    for sweep in range(1, max_sweeps + 1):
        off = 0.0
        rotated = False
        for p, q in rounds:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            norm = np.sqrt(alpha * beta)
            live = norm > floor
            rel = np.zeros_like(gamma)
            rel[live] = np.abs(gamma[live]) / norm[live]
            if rel.size:
                off = max(off, float(rel.max()))
            act = rel > tol
            if not act.any():
                continue
            rotated = True
            pa, qa = p[act], q[act]
            ga, al, be = gamma[act], alpha[act], beta[act]
            zeta = (be - al) / (2.0 * ga)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (w, v):
                xp, xq = mat[:, pa], mat[:, qa]
                mat[:, pa] = c * xp - s * xq
                mat[:, qa] = s * xp + c * xq
        if not rotated:
            return w[:, :n], v[:n, :n], sweep
    raise NumericalError(
        f"Jacobi SVD did not converge in {max_sweeps} sweeps (off-diagonal {off:.3e})",
        sweeps=max_sweeps, off_diagonal=off, shape=a.shape,
    )


def _complete(u, good):
    """Replace columns of u not flagged ``good`` by an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if good[j]]
    out = u.copy()
    e = 0
    for j in range(k):
        if good[j]:
            continue
        while True:
            cand = np.zeros(m)
            cand[e] = 1.0
            e += 1
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            nrm = np.linalg.norm(cand)
            if nrm > 0.5:
                break
        cand /= nrm
        basis.append(cand)
        out[:, j] = cand
    return out


def svd_truncated(M, k: int, max_sweeps: int = MAX_SWEEPS, tol: float = TOL) -> SvdResult:
    """Rank-k SVD of a 2-D array.

    Singular values come out sorted descending (stable, so ties keep column
    order) and each U column is signed so its largest-magnitude entry is
    positive.
    """
    a = np.asarray(getattr(M, "data", M), dtype=np.float64)
    if a.ndim != 2:
        raise RankError(f"expected a matrix, got shape {a.shape}")
    m, n = a.shape
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= min(m, n):
        raise RankError(f"rank {k} outside [1, {min(m, n)}] for a {m}x{n} matrix")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix contains non-finite values", shape=a.shape)

    transposed = m < n
    work = a.T if transposed else a
    w, v, _ = _jacobi(work, max_sweeps, tol)
    s = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-s, kind="stable")[:k]
    s = s[order]
    w = w[:, order]
    v = v[:, order]
    smax = s[0] if s.size else 0.0
    good = s > max(work.shape) * np.finfo(float).eps * smax
    good &= s > 0
    cols = np.zeros_like(w)
    cols[:, good] = w[:, good] / s[good]
    cols = _complete(cols, good)
    s = np.where(good, s, 0.0)

    if transposed:
        U, V = v, cols
    else:
        U, V = cols, v
    lead = np.argmax(np.abs(U), axis=0)
    flip = U[lead, np.arange(k)] < 0
    U = U.copy()
    V = V.copy()
    U[:, flip] *= -1.0
    V[:, flip] *= -1.0
    return SvdResult(U=U, S=s, V=V)


def low_rank_split(M, k: int, mode: str = "balanced"):
    """Factors ``(B, A)`` with ``B @ A`` the best rank-k approximation.

    ``balanced``: ``B = U sqrt(S)`` (m x k), ``A = sqrt(S) V^T`` (k x n).
    ``left``: ``B = U S`` and ``A = V^T``, so A keeps orthonormal rows.
    """
    res = svd_truncated(M, k)
    if mode == "balanced":
        root = np.sqrt(res.S)
        return res.U * root, root[:, None] * res.V.T
    if mode == "left":
        return res.U * res.S, res.V.T.copy()
    raise ValueError(f"unknown split mode {mode!r}")
