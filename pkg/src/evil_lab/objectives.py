"""Invariant-learning objectives (ERM, IRMv1, REx, GroupDRO) and the domain loss.

Every function takes per-environment logits as tape tensors, so the result can
be differentiated with respect to whatever produced them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

KINDS = ("erm", "irm", "rex", "dro")
DEFAULT_LAMBDA = {"erm": 0.0, "irm": 1e2, "rex": 1e1, "dro": 0.0}


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "erm"
    lam: float | None = None
    eta: float = 1e-2
    hard_max: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"objective.kind must be one of {KINDS}, got {self.kind!r}")
        if self.lam is None:
            object.__setattr__(self, "lam", DEFAULT_LAMBDA[self.kind])
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"objective.lambda must be finite and >= 0, got {self.lam}")
        if not self.eta > 0:
            raise ConfigError(f"objective.eta must be > 0, got {self.eta}")


def uniform_weights(m: int) -> np.ndarray:
    return np.full(m, 1.0 / m)


def _per_env(logits_by_env, labels_by_env):
    if not logits_by_env:
        raise ContractError("need at least one environment")
    if len(logits_by_env) != len(labels_by_env):
        raise ContractError(f"{len(logits_by_env)} logit blocks but {len(labels_by_env)} label blocks")
    out = []
    for z, y in zip(logits_by_env, labels_by_env):
        if z.shape[0] == 0:
            raise ContractError("empty environment batch")
        out.append(T.softmax_cross_entropy(z, y))
    return out


def erm_loss(logits_by_env, labels_by_env) -> tuple[Tensor, list[Tensor]]:
    """Pooled mean cross-entropy plus the per-environment means."""
    losses = _per_env(logits_by_env, labels_by_env)
    sizes = np.array([z.shape[0] for z in logits_by_env], dtype=np.float64)
    w = sizes / sizes.sum()
    pooled = losses[0] * w[0]
    for loss, wi in zip(losses[1:], w[1:]):
        pooled = pooled + loss * wi
    return pooled, losses


def var_loss(domain_logits_by_env, domain_indices) -> Tensor:
    """Cross-entropy of predicting each sample's domain index from variant features."""
    blocks = [np.full(z.shape[0], int(d), dtype=np.int64) for z, d in zip(domain_logits_by_env, domain_indices)]
    loss, _ = erm_loss(domain_logits_by_env, blocks)
    return loss


def irm_dummy_gradient(logits, labels) -> Tensor:
    """d/dw of the mean cross-entropy of ``w * logits`` at ``w = 1``."""
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), np.asarray(labels, dtype=np.int64)] = 1.0
    resid = T.sub(T.softmax(logits), onehot)
    return T.sum(T.mul(resid, logits)) * (1.0 / n)


def irm_penalty(logits_by_env, labels_by_env) -> Tensor:
    """Squared dummy-scale gradient per environment, averaged over environments."""
    _per_env(logits_by_env, labels_by_env)
    terms = [T.square(irm_dummy_gradient(z, y)) for z, y in zip(logits_by_env, labels_by_env)]
    return T.mean(T.stack(terms))


def rex_penalty(env_losses) -> Tensor:
    """Population variance of per-environment losses."""
    v = T.stack(env_losses)
    centered = T.sub(v, T.mean(v))
    return T.mean(T.square(centered))


def dro_step(env_losses, weights, eta: float, hard_max: bool = False) -> tuple[Tensor, np.ndarray]:
    """Exponentiated group-weight update followed by the reweighted loss.

    With ``hard_max`` the loss is the largest environment loss and the weights
    become the indicator of that environment.
    """
    values = np.array([loss.item() for loss in env_losses])
    q = np.asarray(weights, dtype=np.float64)
    if q.shape != values.shape:
        raise ContractError(f"{q.size} group weights for {values.size} environments")
    if hard_max:
        q_new = np.zeros_like(values)
        q_new[int(np.argmax(values))] = 1.0
    else:
        with np.errstate(divide="ignore"):
            logq = np.log(q) + eta * values
        logq -= logq.max()
        q_new = np.exp(logq)
        q_new /= q_new.sum()
    loss = T.sum(T.mul(T.stack(env_losses), q_new))
    return loss, q_new


@dataclass
class ObjectiveResult:
    loss: Tensor
    ce: Tensor
    env_losses: list
    penalty: float = 0.0
    weights: np.ndarray | None = None


def invariant_objective(config: ObjectiveConfig, logits_by_env, labels_by_env, weights=None) -> ObjectiveResult:
    """Cross-entropy plus the configured regularizer (or the DRO reweighting)."""
    ce, env_losses = erm_loss(logits_by_env, labels_by_env)
    if config.kind == "erm":
        return ObjectiveResult(ce, ce, env_losses)
    if config.kind == "irm":
        pen = irm_penalty(logits_by_env, labels_by_env)
        return ObjectiveResult(ce + pen * config.lam, ce, env_losses, pen.item())
    if config.kind == "rex":
        pen = rex_penalty(env_losses)
        return ObjectiveResult(ce + pen * config.lam, ce, env_losses, pen.item())
    if config.kind == "dro":
        if weights is None:
            weights = uniform_weights(len(env_losses))
        loss, q = dro_step(env_losses, weights, config.eta, config.hard_max)
        return ObjectiveResult(loss, ce, env_losses, 0.0, q)
    raise ConfigError(f"unknown objective kind {config.kind!r}")
