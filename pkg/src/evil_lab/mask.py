"""Binary parameter masks: initialization, annealed exchange budget, and exchange.

Bits equal to 1 mark the invariant (trained) subnetwork, bits equal to 0 the
variant (pruned) parameters. Every selection breaks ties by the lower flat
index, so masks are bit-reproducible.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError, DimensionError, IngestionError

MASK_MAGIC = b"EVMK"
MASK_VERSION = 1


@dataclass(frozen=True)
class SparsityConfig:
    r: float = 0.6
    alpha: float = 0.2
    delta_t: int = 300
    t_total: int = 5000
    t_pre: int = 1000

    def __post_init__(self):
        if not 0.0 < self.r < 1.0:
            raise ConfigError(f"sparsity.r must lie in (0, 1), got {self.r}")
        # alpha = 0 is accepted: it disables exchange, which the static-mask check relies on.
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"sparsity.alpha must lie in [0, 1), got {self.alpha}")
        if self.delta_t < 1:
            raise ConfigError(f"sparsity.delta_t must be >= 1, got {self.delta_t}")
        if not 0 <= self.t_pre < self.t_total:
            raise ConfigError(f"sparsity.t_pre must lie in [0, t_total), got {self.t_pre}")


class Mask:
    """Immutable 0/1 vector over the flattened feature-extractor parameters."""

    __slots__ = ("bits", "layers")

    def __init__(self, bits, layers=()):
        arr = np.array(bits, dtype=np.uint8).reshape(-1)
        if arr.size and arr.max() > 1:
            raise ContractError("mask bits must be 0 or 1")
        arr.setflags(write=False)
        layers = tuple((str(n), int(a), int(b)) for n, a, b in layers)
        if layers and layers[-1][2] != arr.size:
            raise DimensionError(f"layer offsets cover {layers[-1][2]} entries, mask has {arr.size}")
        object.__setattr__(self, "bits", arr)
        object.__setattr__(self, "layers", layers)

    def __setattr__(self, name, value):
        raise AttributeError("Mask is immutable")

    def __len__(self):
        return self.bits.size

    def __eq__(self, other):
        return isinstance(other, Mask) and self.layers == other.layers and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.bits.tobytes(), self.layers))

    def __repr__(self):
        return f"Mask(n={len(self)}, kept={self.kept})"

    @property
    def kept(self) -> int:
        return int(self.bits.sum())

    @property
    def sparsity(self) -> float:
        return 1.0 - self.kept / len(self)

    def inv_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits == 1)

    def var_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits == 0)

    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float64)

    def with_bits(self, bits) -> "Mask":
        return Mask(bits, self.layers)


def keep_count(n: int, r: float) -> int:
    """Number of parameters kept at pruned fraction ``r``, clamped to [1, n-1]."""
    if n < 2:
        raise ContractError(f"need at least 2 parameters to mask, got {n}")
    return int(min(max(round((1.0 - r) * n), 1), n - 1))


def top_k(scores, k: int, largest: bool = True) -> np.ndarray:
    """Indices of the k largest (or smallest) scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    key = -scores if largest else scores
    return np.argsort(key, kind="stable")[:k]


def _from_scores(scores, r, layers) -> Mask:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    bits = np.zeros(scores.size, dtype=np.uint8)
    bits[top_k(scores, keep_count(scores.size, r))] = 1
    return Mask(bits, layers)


def init_by_weight_magnitude(theta, config: SparsityConfig, layers=()) -> Mask:
    return _from_scores(np.abs(np.asarray(theta, dtype=np.float64).reshape(-1)), config.r, layers)


def init_random(theta, config: SparsityConfig, seed: int = 0, layers=()) -> Mask:
    n = np.asarray(theta).size
    rng = np.random.default_rng(seed)
    return _from_scores(rng.random(n), config.r, layers)


def _need_grads(grads, theta):
    if grads is None:
        raise ContractError("score-based mask initialization needs a gradient vector")
    grads = np.asarray(grads, dtype=np.float64).reshape(-1)
    if grads.size != np.asarray(theta).size:
        raise DimensionError(f"gradient length {grads.size} != parameter length {np.asarray(theta).size}")
    return grads


def init_by_connection_sensitivity(theta, grads, config: SparsityConfig, layers=()) -> Mask:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    grads = _need_grads(grads, theta)
    return _from_scores(np.abs(theta * grads), config.r, layers)


def init_by_fisher(theta, grads, config: SparsityConfig, layers=()) -> Mask:
    grads = _need_grads(grads, theta)
    return _from_scores(grads * grads, config.r, layers)


INIT_STRATEGIES = ("magnitude", "random", "connection_sensitivity", "fisher")


def init_mask(strategy: str, theta, config: SparsityConfig, grads=None, seed: int = 0, layers=()) -> Mask:
    if strategy == "magnitude":
        return init_by_weight_magnitude(theta, config, layers)
    if strategy == "random":
        return init_random(theta, config, seed, layers)
    if strategy == "connection_sensitivity":
        return init_by_connection_sensitivity(theta, grads, config, layers)
    if strategy == "fisher":
        return init_by_fisher(theta, grads, config, layers)
    raise ConfigError(f"unknown mask init strategy {strategy!r}; expected one of {INIT_STRATEGIES}")


def anneal_fraction(t, alpha: float, t_total) -> float:
    """Cosine-annealed exchange fraction, ``alpha/2 * (1 + cos(pi t / T))``."""
    if not 0 <= t <= t_total:
        raise ContractError(f"t must lie in [0, {t_total}], got {t}")
    return 0.5 * alpha * (1.0 + math.cos(math.pi * t / t_total))


def exchange_count(mask: Mask, t, config: SparsityConfig) -> int:
    """``floor(kept * S(t))``, capped by the pruned count so a full swap is the most allowed."""
    k = int(math.floor(mask.kept * anneal_fraction(t, config.alpha, config.t_total)))
    return min(k, len(mask) - mask.kept)


def exchange(mask: Mask, grad_inv, grad_var, k: int) -> Mask:
    """Swap the k least-activated invariant entries for the k least-activated variant ones.

    ``grad_inv`` and ``grad_var`` are full-length vectors; only the entries on
    the matching side of the mask are read.
    """
    n = len(mask)
    grad_inv = np.abs(np.asarray(grad_inv, dtype=np.float64).reshape(-1))
    grad_var = np.abs(np.asarray(grad_var, dtype=np.float64).reshape(-1))
    if grad_inv.size != n or grad_var.size != n:
        raise DimensionError(f"gradient lengths {grad_inv.size}/{grad_var.size} != mask length {n}")
    if k < 0:
        raise ContractError(f"exchange count must be >= 0, got {k}")
    if k == 0:
        return mask
    inv = mask.inv_indices()
    var = mask.var_indices()
    if k > inv.size or k > var.size:
        raise ContractError(f"exchange count {k} exceeds partition sizes ({inv.size} kept, {var.size} pruned)")
    out = inv[top_k(grad_inv[inv], k, largest=False)]
    back = var[top_k(grad_var[var], k, largest=False)]
    bits = mask.bits.copy()
    bits[out] = 0
    bits[back] = 1
    return mask.with_bits(bits)


def update_mask(mask: Mask, grad_inv, grad_var, t, config: SparsityConfig) -> Mask:
    return exchange(mask, grad_inv, grad_var, exchange_count(mask, t, config))


def _check_len(mask, x):
    x = np.asarray(x, dtype=np.float64)
    if x.size != len(mask):
        raise DimensionError(f"length {x.size} != mask length {len(mask)}")
    return x.reshape(-1)


def apply_to_params(mask: Mask, theta) -> np.ndarray:
    return _check_len(mask, theta) * mask.bits


def variant_view(mask: Mask, theta) -> np.ndarray:
    return _check_len(mask, theta) * (1 - mask.bits)


apply_to_grads = apply_to_params


# ------------------------------------------------------------ serialization


def mask_to_bytes(mask: Mask) -> bytes:
    """Run-length encoded mask with a layer-offset header (little-endian)."""
    parts = [MASK_MAGIC, struct.pack("<HI", MASK_VERSION, len(mask.layers))]
    for name, start, stop in mask.layers:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<QQ", start, stop))
    runs = _kernels.rle_encode(mask.bits)
    first = int(mask.bits[0]) if len(mask) else 0
    parts.append(struct.pack("<QBQ", len(mask), first, runs.size))
    parts.append(runs.astype("<u8").tobytes())
    return b"".join(parts)


def mask_from_bytes(buf: bytes) -> Mask:
    view = memoryview(buf)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise IngestionError("truncated mask record", offset=pos)
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    if bytes(view[:4]) != MASK_MAGIC:
        raise IngestionError(f"bad mask magic, expected {MASK_MAGIC!r}", offset=0)
    pos = 4
    version, n_layers = take("<HI")
    if version != MASK_VERSION:
        raise IngestionError(f"unsupported mask version {version}", offset=4)
    layers = []
    for _ in range(n_layers):
        (name_len,) = take("<H")
        if pos + name_len > len(view):
            raise IngestionError("truncated layer name", offset=pos)
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        start, stop = take("<QQ")
        layers.append((name, start, stop))
    n, first, n_runs = take("<QBQ")
    if pos + 8 * n_runs > len(view):
        raise IngestionError("truncated run-length payload", offset=pos)
    runs = np.frombuffer(view[pos:pos + 8 * n_runs], dtype="<u8").astype(np.int64)
    try:
        bits = _kernels.rle_decode(first, runs, n)
    except ValueError as exc:
        raise IngestionError(str(exc), offset=pos) from None
    return Mask(bits, layers)
