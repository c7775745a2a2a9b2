"""One-sided Jacobi SVD and the nuclear/Frobenius ratio used as a diversity regulariser."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .numerics import DomainError, NumericError, Tensor, custom

__all__ = [
    "SvdResult",
    "svd",
    "nuclear_norm",
    "frobenius_norm",
    "nnm_ratio_with_grad",
    "nnm_ratio",
]

SWEEP_TOL = 1e-12
MAX_SWEEPS = 60


class SvdResult(NamedTuple):
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray


def _jacobi_columns(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalise the columns of ``a`` (p >= d) by Hestenes rotations.

    Returns the rotated matrix (columns mutually orthogonal) and the
    accumulated right rotation ``V``.
    """
    w = a.copy()
    d = w.shape[1]
    v = np.eye(d)
    # columns below this squared norm are rounding residue of a rank deficiency
    floor = (1e-14 * math.sqrt(float(np.sum(a * a)))) ** 2
    for _ in range(MAX_SWEEPS):
        off = 0.0
        for i in range(d - 1):
            for j in range(i + 1, d):
                wi, wj = w[:, i], w[:, j]
                alpha = wi @ wi
                beta = wj @ wj
                gamma = wi @ wj
                if gamma == 0.0 or alpha <= floor or beta <= floor:
                    continue
                scale = math.sqrt(alpha * beta)
                if scale == 0.0:
                    continue
                ratio = abs(gamma) / scale
                off = max(off, ratio)
                if ratio <= SWEEP_TOL:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                wi_new = c * wi - s * wj
                w[:, j] = s * wi + c * wj
                w[:, i] = wi_new
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if off <= SWEEP_TOL:
            return w, v
    resid = off
    raise NumericError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (max off-diagonal cosine {resid:.3e})")


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged in ``filled`` with an orthonormal completion."""
    p, q = u.shape
    basis = [u[:, k] for k in range(q) if filled[k]]
    out = u.copy()
    probe = 0
    for k in range(q):
        if filled[k]:
            continue
        while True:
            e = np.zeros(p)
            e[probe % p] = 1.0
            probe += 1
            for b in basis:
                e = e - (b @ e) * b
            for b in basis:  # second pass for numerical orthogonality
                e = e - (b @ e) * b
            n = np.linalg.norm(e)
            if n > 1e-6:
                e = e / n
                break
            if probe > 4 * p:
                raise NumericError("could not complete orthonormal basis")
        out[:, k] = e
        basis.append(e)
    return out


def svd(a) -> SvdResult:
    """Thin SVD ``a = U diag(S) V^T`` with S descending.

    Signs are fixed so the largest-magnitude entry of every U column is positive.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise DomainError(f"svd needs a non-empty matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("svd input contains non-finite entries")
    transposed = a.shape[0] < a.shape[1]
    m = a.T if transposed else a
    w, v = _jacobi_columns(m)
    s = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-s, kind="stable")
    s, w, v = s[order], w[:, order], v[:, order]
    tiny = s.max(initial=0.0) * 1e-14 if s.size else 0.0
    filled = s > max(tiny, 1e-300)
    u = np.zeros_like(w)
    u[:, filled] = w[:, filled] / s[filled]
    if not filled.all():
        s = np.where(filled, s, 0.0)
        u = _complete_basis(u, filled)
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    v = v * signs
    if transposed:
        u, v = v, u
    return SvdResult(u, s, v)


def nuclear_norm(a) -> float:
    return float(np.sum(svd(a).S))


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return math.sqrt(float(np.sum(a * a)))


def nnm_ratio_with_grad(a) -> tuple[float, np.ndarray]:
    """``||a||_* / ||a||_F`` and its gradient.

    The nuclear norm is differentiated through the subgradient ``U V^T``,
    which is used even at repeated or zero singular values.
    """
    a = np.asarray(a, dtype=np.float64)
    fro = frobenius_norm(a)
    if fro <= 1e-10:
        raise DomainError("nuclear/Frobenius ratio undefined for a (near-)zero matrix")
    u, s, v = svd(a)
    nuc = float(np.sum(s))
    value = nuc / fro
    grad = (u @ v.T) / fro - (nuc / fro**3) * a
    return value, grad


def nnm_ratio(a: Tensor) -> Tensor:
    """Tensor-level ratio whose backward uses :func:`nnm_ratio_with_grad`."""
    value, grad = nnm_ratio_with_grad(a.data)
    return custom((a,), np.asarray(value), lambda g: (g * grad,), "nnm_ratio")
