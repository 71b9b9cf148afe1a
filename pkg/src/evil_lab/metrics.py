"""Diagnostics: across-domain gradient variance, SAM sharpness, and Hessian spectra."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError
from .optim import sam_perturb


@dataclass
class GradVarianceReport:
    v_inv: float
    v_var: float
    domain_norms: list = field(default_factory=list)


@dataclass
class SharpnessReport:
    sharpness: float
    rho: float
    masked: bool
    loss: float = 0.0
    perturbed_loss: float = 0.0


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    iterations: int
    breakdown: bool = False

    @property
    def top(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def ratio(self) -> float:
        """lambda_1 / lambda_5 (nan when fewer than five values were recovered)."""
        if self.eigenvalues.size < 5:
            return float("nan")
        return float(self.eigenvalues[0] / self.eigenvalues[4])


def gradient_variance(domain_grads, index=None) -> float:
    """Mean over ``index`` of the population variance of each coordinate across domains."""
    if len(domain_grads) < 2:
        raise ContractError(f"gradient variance needs >= 2 domains, got {len(domain_grads)}")
    g = np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for x in domain_grads])
    var = g.var(axis=0)
    if index is None:
        return float(var.mean())
    index = np.asarray(index)
    if index.dtype == bool:
        index = np.flatnonzero(index)
    if index.size == 0:
        raise ContractError("gradient variance over an empty index set")
    return float(var[index].mean())


def gradient_variance_report(domain_grads, bits) -> GradVarianceReport:
    bits = np.asarray(bits).astype(bool)
    return GradVarianceReport(
        gradient_variance(domain_grads, bits),
        gradient_variance(domain_grads, ~bits),
        [float(np.linalg.norm(g)) for g in domain_grads],
    )


def sharpness(loss_grad: Callable, params: dict, keep=None, rho: float = 0.05) -> SharpnessReport:
    """Loss increase at the first-order worst-case perturbation of radius ``rho``.

    ``loss_grad(params) -> (loss, grads)``. ``params`` is not modified.
    """
    loss0, g0 = loss_grad(params)
    eps = sam_perturb(g0, keep, rho)
    shifted = {k: (params[k] + eps[k]) if k in eps else params[k] for k in params}
    loss1, _ = loss_grad(shifted)
    return SharpnessReport(loss1 - loss0, rho, keep is not None, loss0, loss1)


def hvp(grad_fn: Callable[[np.ndarray], np.ndarray], theta, v, h: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian-vector product along ``v``.

    The step is ``h * max(1, ||theta||)`` along the unit direction of ``v``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ContractError("hvp direction has zero norm")
    step = h * max(1.0, float(np.linalg.norm(theta)))
    u = v / norm
    return (grad_fn(theta + step * u) - grad_fn(theta - step * u)) * (norm / (2.0 * step))


def lanczos(matvec: Callable[[np.ndarray], np.ndarray], dim: int, iterations: int, seed: int = 0,
            tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray, bool]:
    """Lanczos tridiagonalization with full reorthogonalization.

    Returns ``(alpha, beta, breakdown)``; ``beta`` has one entry fewer than ``alpha``.
    """
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    basis = [q]
    alpha, beta = [], []
    breakdown = False
    for j in range(min(iterations, dim)):
        w = matvec(basis[j])
        a = float(basis[j] @ w)
        alpha.append(a)
        Q = np.array(basis)
        w = w - Q.T @ (Q @ w)
        w = w - Q.T @ (Q @ w)
        b = float(np.linalg.norm(w))
        if j == min(iterations, dim) - 1:
            break
        scale = max(1.0, max(abs(x) for x in alpha))
        if b <= tol * scale:
            breakdown = True
            break
        beta.append(b)
        basis.append(w / b)
    return np.array(alpha), np.array(beta), breakdown


def ritz_values(alpha, beta) -> np.ndarray:
    k = len(alpha)
    tri = np.diag(alpha) + np.diag(beta, 1) + np.diag(beta, -1) if k > 1 else np.array([[alpha[0]]])
    return np.sort(np.linalg.eigvalsh(tri))[::-1]


def lanczos_spectrum(grad_fn: Callable[[np.ndarray], np.ndarray], theta, k: int = 5, iterations: int = 30,
                     seed: int = 0, h: float = 1e-4) -> SpectrumReport:
    """Top-k Ritz values of the Hessian of the loss whose gradient is ``grad_fn``."""
    if k < 5:
        raise ContractError(f"k must be >= 5, got {k}")
    if iterations < k:
        raise ContractError(f"iterations ({iterations}) must be >= k ({k})")
    theta = np.asarray(theta, dtype=np.float64)
    alpha, beta, broke = lanczos(lambda v: hvp(grad_fn, theta, v, h), theta.size, iterations, seed)
    vals = ritz_values(alpha, beta)
    return SpectrumReport(vals[:k], len(alpha), broke)
