"""Singular values by one-sided (Hestenes) Jacobi and tolerance-based rank."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

JACOBI_TOL = 1e-10
MAX_SWEEPS = 60


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for one sweep: n-1 rounds of n/2 disjoint column pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_singular_values(mats: np.ndarray, tol: float = JACOBI_TOL) -> np.ndarray:
    """Singular values of a stack ``[..., p, q]``, sorted descending.

    Columns are orthogonalised by plane rotations until every pair satisfies
    ``|a_i . a_j| <= tol * |a_i| |a_j|``; the singular values are then the
    column norms. All matrices in the stack are rotated together, which keeps
    the work vectorised while leaving each matrix's result independent of the
    rest of the stack.
    """
    a = np.array(mats, dtype=np.float64)
    if a.ndim < 2:
        raise ValueError(f"expected a matrix or stack of matrices, got shape {a.shape}")
    if a.shape[-1] > a.shape[-2]:
        a = np.swapaxes(a, -1, -2).copy()
    lead = a.shape[:-2]
    p, q = a.shape[-2:]
    a = a.reshape(-1, p, q)
    if q == 1:
        return np.linalg.norm(a, axis=1).reshape(*lead, 1)
    rounds = _round_robin(q)
    tiny = np.finfo(np.float64).tiny
    for _ in range(MAX_SWEEPS):
        worst = 0.0
        for left, right in rounds:
            x = a[:, :, left]
            y = a[:, :, right]
            alpha = np.einsum("bij,bij->bj", x, x)
            beta = np.einsum("bij,bij->bj", y, y)
            gamma = np.einsum("bij,bij->bj", x, y)
            scale = np.sqrt(alpha * beta)
            active = (scale > tiny) & (np.abs(gamma) > tol * scale)
            if not np.any(active):
                continue
            worst = max(worst, float(np.max(np.abs(gamma[active]) / scale[active])))
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)[:, None, :]
            s = np.where(active, s, 0.0)[:, None, :]
            a[:, :, left] = c * x - s * y
            a[:, :, right] = s * x + c * y
        if worst <= tol:
            break
    sv = np.sort(np.linalg.norm(a, axis=1), axis=-1)[:, ::-1]
    return sv.reshape(*lead, q)


def numerical_rank(m, rel_tol: float = 1e-6) -> int:
    """Count singular values above ``rel_tol * sigma_max`` (0 for the zero matrix)."""
    if rel_tol <= 0:
        raise ValueError(f"rel_tol must be positive, got {rel_tol}")
    data = m.data if isinstance(m, Tensor) else np.asarray(m)
    if data.ndim != 2:
        raise ValueError(f"numerical_rank expects a matrix, got shape {data.shape}")
    return int(numerical_ranks(data[None], rel_tol)[0])


def numerical_ranks(stack: np.ndarray, rel_tol: float = 1e-6) -> np.ndarray:
    """Vectorised ``numerical_rank`` over a ``[n, p, q]`` stack."""
    sv = jacobi_singular_values(stack)
    smax = sv[..., :1]
    return np.where(smax[..., 0] > 0, (sv > rel_tol * smax).sum(axis=-1), 0)
