"""Adam, first-order SAM with an optional perturbation mask, and dual-optimizer routing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import _kernels
from .errors import ConfigError, TrainingError
from .mask import Mask


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})

    def reset_coordinates(self, key: str, index):
        """Zero the moments of selected coordinates (used when a mask exchanges them)."""
        if key in self.m:
            # copy on write: moment arrays may be shared with earlier states
            self.m[key] = self.m[key].copy()
            self.v[key] = self.v[key].copy()
            self.m[key][index] = 0.0
            self.v[key][index] = 0.0


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              active: Mapping[str, np.ndarray] | None = None) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update without weight decay.

    Only keys present in ``grads`` are updated. ``active`` optionally maps a key
    to a boolean array; coordinates where it is False keep both their value and
    their moments.
    """
    t = state.t + 1
    # moment arrays are never mutated in place by the update, so untouched keys can be shared
    new = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, dict(state.m), dict(state.v))
    out = dict(params)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for key, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {key!r}", step=t)
        p = np.asarray(params[key], dtype=np.float64)
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        on = None if active is None else active.get(key)
        out[key], new.m[key], new.v[key] = _kernels.adam_update(
            p, g, m, v, on, state.lr, state.beta1, state.beta2, c1, c2, state.eps)
    return out, new


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    masked: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.rho) and self.rho >= 0):
            raise ConfigError(f"sam.rho must be finite and >= 0, got {self.rho}")


def sam_perturb(grads: Mapping[str, np.ndarray], keep: Mapping[str, np.ndarray] | None, rho: float) -> dict:
    """``rho * g / ||g||`` over all keys, with ``g`` first multiplied by ``keep``.

    Keys absent from ``keep`` are perturbed densely. A zero (masked) gradient
    yields a zero perturbation.
    """
    masked = {}
    for key, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if keep is not None and key in keep:
            g = g * keep[key]
        masked[key] = g
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in masked.values()))
    if norm == 0.0 or rho == 0.0:
        return {k: np.zeros_like(g) for k, g in masked.items()}
    return {k: g * (rho / norm) for k, g in masked.items()}


LossGradFn = Callable[[Mapping[str, np.ndarray]], "tuple[float, dict]"]


@dataclass
class SamInfo:
    loss: float
    perturbed_loss: float
    eps: dict
    grads: dict = field(default_factory=dict)

    @property
    def sharpness(self) -> float:
        return self.perturbed_loss - self.loss


def sam_step(loss_grad: LossGradFn, params: Mapping[str, np.ndarray], keep, config: SamConfig,
             state: AdamState, active=None) -> tuple[dict, AdamState, SamInfo]:
    """Ascend to ``params + eps``, take the gradient there, then Adam-step from ``params``.

    ``keep`` masks the perturbation (ignored unless ``config.masked``);
    ``active`` freezes coordinates in the Adam update, as in :func:`adam_step`.
    """
    loss0, g0 = loss_grad(params)
    eps = sam_perturb(g0, keep if config.masked else None, config.rho)
    shifted = {k: (params[k] + eps[k]) if k in eps else params[k] for k in params}
    loss1, g1 = loss_grad(shifted)
    if active is not None:
        g1 = {k: (g * active[k]) if k in active else g for k, g in g1.items()}
    new_params, new_state = adam_step(state, params, g1, active)
    return new_params, new_state, SamInfo(loss0, loss1, eps, g1)


@dataclass(frozen=True)
class DualOptimizerBinding:
    """Ownership of theta coordinates: optimizer 1 trains the kept side, optimizer 2 only reads the pruned side."""

    inv_owner: np.ndarray
    var_owner: np.ndarray
    adam1_heads: tuple = ("h_w", "h_b")
    adam2_heads: tuple = ("g_w", "g_b")

    def __post_init__(self):
        inv = np.asarray(self.inv_owner, dtype=bool)
        var = np.asarray(self.var_owner, dtype=bool)
        if inv.shape != var.shape:
            raise ConfigError("ownership vectors differ in length")
        if np.any(inv & var):
            raise ConfigError(f"{int(np.sum(inv & var))} theta coordinates owned by both optimizers")
        if set(self.adam1_heads) & set(self.adam2_heads):
            raise ConfigError("a head is owned by both optimizers")
        object.__setattr__(self, "inv_owner", inv)
        object.__setattr__(self, "var_owner", var)

    @classmethod
    def from_mask(cls, mask: Mask) -> "DualOptimizerBinding":
        bits = mask.bits.astype(bool)
        return cls(bits, ~bits)


@dataclass
class RoutedGradients:
    adam1: dict
    adam2: dict
    var_activation: np.ndarray | None


def dual_route(binding: DualOptimizerBinding, inv_grads: Mapping[str, np.ndarray],
               var_grads: Mapping[str, np.ndarray]) -> RoutedGradients:
    """Split gradients between the two optimizers.

    Optimizer 1 gets the invariant-objective gradient restricted to its theta
    coordinates plus head h. Optimizer 2 gets only head g; the pruned-side theta
    gradient of the domain loss, when supplied, is returned as magnitudes for
    mask exploration.
    """
    adam1 = {"theta": np.asarray(inv_grads["theta"]) * binding.inv_owner}
    for key in binding.adam1_heads:
        adam1[key] = inv_grads[key]
    adam2 = {key: var_grads[key] for key in binding.adam2_heads if key in var_grads}
    activation = None
    if var_grads.get("theta") is not None:
        activation = np.abs(np.asarray(var_grads["theta"])) * binding.var_owner
    return RoutedGradients(adam1, adam2, activation)
