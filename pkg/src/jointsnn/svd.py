"""Weight-factorized training: shared singular vectors, per-side singular values.

A dense weight ``W`` [c_in x c_out] is decomposed once, at initialization,
as ``W = U diag(sigma) V`` with ``U`` [c_in x r] and ``V`` [r x c_out].
Both networks then use ``U`` and ``V`` while each keeps its own copy of
``sigma``. Gradients from both sides therefore accumulate into the shared
factors, and each sigma only sees its own side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericError

SIDES = ("ann", "snn")
JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 60


def _round_robin(n: int) -> list[np.ndarray]:
    """Rounds of disjoint column pairs covering every pair once (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            rounds.append(np.array(pairs, dtype=np.intp))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(q: np.ndarray, k: int) -> np.ndarray:
    """Replace columns k: of ``q`` with an orthonormal completion of q[:, :k]."""
    m, r = q.shape
    q = q.copy()
    basis = q[:, :k]
    col = k
    for e in np.eye(m):
        if col >= r:
            break
        v = e - basis @ (basis.T @ e)
        v = v - basis @ (basis.T @ v)
        nrm = np.linalg.norm(v)
        if nrm > 1e-8:
            q[:, col] = v / nrm
            basis = q[:, :col + 1]
            col += 1
    return q


def _jacobi_tall(a: np.ndarray):
    m, n = a.shape
    a = a.copy()
    v = np.eye(n)
    rounds = _round_robin(n)
    for sweep in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for pairs in rounds:
            p, q = pairs[:, 0], pairs[:, 1]
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            active = (scale > 0) & (np.abs(gamma) > JACOBI_TOL * scale)
            if scale.size:
                rel = np.divide(np.abs(gamma), scale, out=np.zeros_like(gamma), where=scale > 0)
                off = max(off, float(rel.max()))
            if not active.any():
                continue
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p], a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if off <= JACOBI_TOL:
            break
    else:
        raise NumericError(
            f"jacobi_svd did not converge in {JACOBI_MAX_SWEEPS} sweeps (off-diagonal residual {off:.3e})"
        )
    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    cutoff = sigma[0] * max(m, n) * np.finfo(float).eps if sigma.size and sigma[0] > 0 else 0.0
    nonzero = int(np.sum(sigma > cutoff))
    u = np.zeros((m, n))
    u[:, :nonzero] = a[:, :nonzero] / sigma[:nonzero]
    if nonzero < n:
        u = _complete_basis(u, nonzero)
    return u, sigma, v.T


def jacobi_svd(w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``u`` [m x r], ``sigma`` [r] and ``v`` [r x n] with
    ``w == u @ diag(sigma) @ v`` and r = min(m, n). Singular values come
    out non-negative and sorted non-increasing.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"jacobi_svd expects a matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericError("jacobi_svd: matrix has non-finite entries")
    m, n = w.shape
    if m >= n:
        return _jacobi_tall(w)
    u_t, sigma, v_t = _jacobi_tall(w.T)
    return v_t.T, sigma, u_t.T


@dataclass
class FactorizedWeight:
    """``U diag(sigma_side) V`` with U, V shared and one sigma per network side."""

    u_factor: Tensor
    v_factor: Tensor
    sigma_ann: Tensor
    sigma_snn: Tensor
    kernel_index: Optional[tuple[int, int]] = None

    @property
    def r(self) -> int:
        return self.sigma_ann.shape[0]

    @property
    def c_in(self) -> int:
        return self.u_factor.shape[0]

    @property
    def c_out(self) -> int:
        return self.v_factor.shape[1]

    def sigma(self, side: str) -> Tensor:
        if side not in SIDES:
            raise ConfigError(f"unknown side {side!r}")
        return self.sigma_ann if side == "ann" else self.sigma_snn

    def parameters(self) -> dict[str, Tensor]:
        return {"u": self.u_factor, "v": self.v_factor,
                "sigma_ann": self.sigma_ann, "sigma_snn": self.sigma_snn}


def init_factorized(w0, kernel_index=None) -> FactorizedWeight:
    u, sigma, v = jacobi_svd(w0)
    return FactorizedWeight(
        Tensor(u, requires_grad=True),
        Tensor(v, requires_grad=True),
        Tensor(sigma.copy(), requires_grad=True),
        Tensor(sigma.copy(), requires_grad=True),
        kernel_index,
    )


def compose(fw: FactorizedWeight, side: str) -> Tensor:
    """Differentiable ``U diag(sigma_side) V``, shape [c_in x c_out]."""
    return ad.matmul(ad.mul(fw.u_factor, fw.sigma(side)), fw.v_factor)


def compose_conv(fws: Sequence[Sequence[FactorizedWeight]], side: str) -> Tensor:
    """Assemble a [c_out, c_in, k, k] kernel from a k x k grid of factorizations."""
    k = len(fws)
    if k == 0 or any(len(row) != k for row in fws):
        raise ConfigError("compose_conv needs a square, non-empty grid")
    dims = {(fw.c_in, fw.c_out) for row in fws for fw in row}
    if len(dims) != 1:
        raise ConfigError(f"compose_conv: grid entries disagree on (c_in, c_out): {sorted(dims)}")
    c_in, c_out = dims.pop()
    entries = [ad.transpose(compose(fw, side)) for row in fws for fw in row]
    kernel = ad.reshape(ad.stack(entries), (k, k, c_out, c_in))
    return ad.transpose(kernel, (2, 3, 0, 1))


def param_count(c_in: int, c_out: int, thin: bool = False) -> tuple[int, int]:
    """(factorized, baseline) parameter counts for one c_in x c_out weight.

    The default counts square factors (c_in^2 + c_out^2 + 2r), against two
    independent dense matrices. ``thin=True`` counts the factors actually
    stored here, U [c_in x r] and V [r x c_out].
    """
    if c_in <= 0 or c_out <= 0:
        raise ConfigError("param_count needs positive dimensions")
    r = min(c_in, c_out)
    if thin:
        factorized = c_in * r + r * c_out + 2 * r
    else:
        factorized = c_in * c_in + c_out * c_out + 2 * r
    return factorized, 2 * c_in * c_out


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
