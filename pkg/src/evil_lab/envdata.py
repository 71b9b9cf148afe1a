"""Multi-environment datasets.

Two generators:

* the binary-feature model, where an invariant block copies the label and a
  spurious block agrees with it at an environment-specific rate;
* colored digits, where a color channel agrees with a noisy binary digit label
  at an environment-specific rate. Digits come from procedurally drawn 14x14
  glyphs by default, or from MNIST-style IDX files.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, IngestionError
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Environment:
    inputs: np.ndarray
    labels: np.ndarray
    domain_index: int
    name: str = ""

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(np.prod(self.inputs.shape[1:]))


# ------------------------------------------------------------ binary model


@dataclass(frozen=True)
class BinaryEnvSpec:
    m_inv: int = 5
    m_var: int = 45
    p_e: float = 0.9
    q_e: float = 0.5
    n: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.m_inv < 1 or self.m_var < 1:
            raise ConfigError(f"m_inv and m_var must be >= 1, got {self.m_inv}, {self.m_var}")
        if not 0.0 <= self.p_e <= 1.0 or not 0.0 <= self.q_e <= 1.0:
            raise ConfigError(f"p_e and q_e must lie in [0, 1], got {self.p_e}, {self.q_e}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")


def gen_binary_env(spec: BinaryEnvSpec, domain_sign: int) -> Environment:
    """Sample one environment of the binary-feature model.

    Label y is uniform on {-1, 1}; every invariant coordinate equals y; a
    per-sample spurious sign equals y with probability ``p_e`` and fills every
    spurious coordinate. Class indices are ``(y + 1) / 2`` and the domain
    index is 0 for ``domain_sign = -1`` and 1 for ``+1``.
    """
    if domain_sign not in (-1, 1):
        raise ContractError(f"domain_sign must be -1 or +1, got {domain_sign}")
    d = 0 if domain_sign < 0 else 1
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, d]))
    y = np.where(rng.random(spec.n) < 0.5, -1.0, 1.0)
    s = np.where(rng.random(spec.n) < spec.p_e, y, -y)
    x = np.concatenate(
        [np.repeat(y[:, None], spec.m_inv, axis=1), np.repeat(s[:, None], spec.m_var, axis=1)], axis=1
    )
    return Environment(x, ((y + 1) // 2).astype(np.int64), d, name=f"binary_p{spec.p_e:g}")


def gen_binary_envs(m_inv, m_var, p_grid, n, seed=0, q_e=0.5) -> list[Environment]:
    """One binary environment per entry of ``p_grid``, domain indices 0..len-1."""
    out = []
    for i, p in enumerate(p_grid):
        env = gen_binary_env(BinaryEnvSpec(m_inv, m_var, p, q_e, n, seed + 7919 * i), 1)
        out.append(replace(env, domain_index=i))
    return out


# ------------------------------------------------------------ IDX ingestion


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except OSError as exc:
            raise IngestionError(f"{path}: corrupt gzip stream ({exc})", offset=0) from None
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IngestionError(f"{path}: truncated header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IngestionError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise IngestionError(f"{path}: payload has {len(raw) - header} bytes, need {need}", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[Tensor, np.ndarray]:
    """Images scaled to [0, 1] with shape (n, rows, cols), plus int64 labels."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Tensor(images.astype(np.float64) / 255.0), labels.astype(np.int64)


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as IDX (used for fixtures and exports)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# ------------------------------------------------------------ synthetic glyphs

# Stroke skeletons on a unit box, y pointing down.
_GLYPHS = {
    0: [(0.25, 0.1, 0.75, 0.1), (0.75, 0.1, 0.75, 0.9), (0.75, 0.9, 0.25, 0.9), (0.25, 0.9, 0.25, 0.1)],
    1: [(0.5, 0.1, 0.5, 0.9), (0.33, 0.27, 0.5, 0.1)],
    2: [(0.2, 0.1, 0.8, 0.1), (0.8, 0.1, 0.8, 0.45), (0.8, 0.45, 0.2, 0.9), (0.2, 0.9, 0.8, 0.9)],
    3: [(0.2, 0.1, 0.8, 0.1), (0.8, 0.1, 0.8, 0.9), (0.35, 0.5, 0.8, 0.5), (0.8, 0.9, 0.2, 0.9)],
    4: [(0.2, 0.1, 0.2, 0.55), (0.2, 0.55, 0.8, 0.55), (0.65, 0.1, 0.65, 0.9)],
    5: [(0.8, 0.1, 0.2, 0.1), (0.2, 0.1, 0.2, 0.5), (0.2, 0.5, 0.8, 0.5), (0.8, 0.5, 0.8, 0.9), (0.8, 0.9, 0.2, 0.9)],
    6: [(0.7, 0.1, 0.2, 0.5), (0.2, 0.5, 0.2, 0.9), (0.2, 0.9, 0.8, 0.9), (0.8, 0.9, 0.8, 0.55), (0.8, 0.55, 0.2, 0.55)],
    7: [(0.2, 0.1, 0.8, 0.1), (0.8, 0.1, 0.4, 0.9)],
    8: [(0.25, 0.1, 0.75, 0.1), (0.75, 0.1, 0.75, 0.9), (0.75, 0.9, 0.25, 0.9), (0.25, 0.9, 0.25, 0.1),
        (0.25, 0.5, 0.75, 0.5)],
    9: [(0.8, 0.5, 0.2, 0.5), (0.2, 0.5, 0.2, 0.1), (0.2, 0.1, 0.8, 0.1), (0.8, 0.1, 0.8, 0.9), (0.8, 0.9, 0.3, 0.9)],
}


def _segment_distance(px, py, seg):
    """Distance from points (b, P) to segments (b, 4)."""
    x0, y0, x1, y1 = (seg[:, i:i + 1] for i in range(4))
    dx, dy = x1 - x0, y1 - y0
    t = ((px - x0) * dx + (py - y0) * dy) / np.maximum(dx * dx + dy * dy, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def draw_glyphs(digits, rng: np.random.Generator, size: int = 14) -> np.ndarray:
    """Rasterize jittered stroke glyphs, returning (n, size, size) intensities in [0, 1]."""
    digits = np.asarray(digits, dtype=np.int64)
    n = digits.size
    scale = rng.uniform(0.8, 1.05, n)
    shift = rng.uniform(-0.08, 0.08, (n, 2))
    shear = rng.uniform(-0.2, 0.2, n)
    width = rng.uniform(0.05, 0.09, n)
    centers = (np.arange(size) + 0.5) / size
    gx, gy = np.meshgrid(centers, centers)
    gx, gy = gx.reshape(1, -1), gy.reshape(1, -1)
    # map pixel centers back into glyph coordinates
    u = (gx - 0.5 - shift[:, :1]) / scale[:, None]
    v = (gy - 0.5 - shift[:, 1:]) / scale[:, None]
    u = u - shear[:, None] * v + 0.5
    v = v + 0.5
    out = np.zeros((n, size * size))
    edge = 0.5 / size
    for digit, segs in _GLYPHS.items():
        rows = np.flatnonzero(digits == digit)
        if rows.size == 0:
            continue
        dist = np.full((rows.size, size * size), np.inf)
        for seg in segs:
            jitter = rng.uniform(-0.04, 0.04, (rows.size, 4))
            dist = np.minimum(dist, _segment_distance(u[rows], v[rows], np.asarray(seg) + jitter))
        out[rows] = np.clip((width[rows, None] - dist) / edge + 0.5, 0.0, 1.0)
    return out.reshape(n, size, size)


# ------------------------------------------------------------ colored digits


@dataclass(frozen=True)
class ColoredDigitSpec:
    environments: tuple = (0.9, 0.8, 0.1)
    label_noise: float = 0.25
    source: str = "synthetic"
    idx_images: str = ""
    idx_labels: str = ""
    n: int = 5000
    seed: int = 0
    n_classes: int = 2
    size: int = 14

    def __post_init__(self):
        object.__setattr__(self, "environments", tuple(float(p) for p in self.environments))
        if not self.environments:
            raise ConfigError("colored digits need at least one environment")
        for p in self.environments:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"correlation {p} outside [0, 1]")
        if not 0.0 <= self.label_noise <= 0.5:
            raise ConfigError(f"label_noise must lie in [0, 0.5], got {self.label_noise}")
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"source must be 'synthetic' or 'idx', got {self.source!r}")
        if self.n_classes not in (2, 10):
            raise ConfigError(f"n_classes must be 2 or 10, got {self.n_classes}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")


def _pool_to(images: np.ndarray, size: int) -> np.ndarray:
    n, h, w = images.shape
    if h == size and w == size:
        return images
    if h % size or w % size:
        raise ConfigError(f"cannot pool {h}x{w} images down to {size}x{size}")
    fh, fw = h // size, w // size
    return images.reshape(n, size, fh, size, fw).mean(axis=(2, 4))


def _digit_source(spec: ColoredDigitSpec, rng, n):
    if spec.source == "synthetic":
        digits = rng.integers(0, 10, n)
        return draw_glyphs(digits, rng, spec.size), digits
    if not (os.path.exists(spec.idx_images) and os.path.exists(spec.idx_labels)):
        raise IngestionError(f"IDX files not found: {spec.idx_images!r}, {spec.idx_labels!r}")
    images, labels = load_idx(spec.idx_images, spec.idx_labels)
    if labels.size == 0:
        raise IngestionError("IDX source holds zero samples")
    pick = rng.integers(0, labels.size, n)
    return _pool_to(images.numpy()[pick], spec.size), labels[pick]


def colorize(images: np.ndarray, color: np.ndarray) -> np.ndarray:
    """Two-channel images with the channel not named by ``color`` zeroed, flattened."""
    n = images.shape[0]
    flat = images.reshape(n, -1)
    out = np.zeros((n, 2, flat.shape[1]))
    out[np.arange(n), color.astype(np.int64)] = flat
    return out.reshape(n, -1)


def gen_colored_digits(spec: ColoredDigitSpec) -> list[Environment]:
    """One environment per correlation entry; domain index equals list position."""
    seeds = np.random.SeedSequence(spec.seed).spawn(len(spec.environments))
    envs = []
    for i, (p, ss) in enumerate(zip(spec.environments, seeds)):
        rng = np.random.default_rng(ss)
        images, digits = _digit_source(spec, rng, spec.n)
        coarse = (digits >= 5).astype(np.int64)
        flip = rng.random(spec.n) < spec.label_noise
        if spec.n_classes == 2:
            labels = coarse ^ flip
            color_target = labels
        else:
            other = (digits + rng.integers(1, 10, spec.n)) % 10
            labels = np.where(flip, other, digits)
            color_target = (labels >= 5).astype(np.int64)
        color = np.where(rng.random(spec.n) < p, color_target, 1 - color_target)
        envs.append(Environment(colorize(images, color), labels.astype(np.int64), i, name=f"colored_p{p:g}"))
    return envs


def color_bits(env: Environment) -> np.ndarray:
    """Recover the color channel index of each colored-digit sample."""
    half = env.inputs.shape[1] // 2
    return (np.abs(env.inputs[:, half:]).sum(axis=1) > np.abs(env.inputs[:, :half]).sum(axis=1)).astype(np.int64)


# ------------------------------------------------------------ splitting


@dataclass(frozen=True)
class Split:
    train: list = field(default_factory=list)
    test: Environment | None = None
    mapping: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.train, self.test))


def split_environments(envs, holdout: int) -> Split:
    """Hold out one domain; renumber the rest densely in their original order."""
    indices = [e.domain_index for e in envs]
    if holdout not in indices:
        raise IndexError(f"holdout domain {holdout} not among {indices}")
    train, mapping, test = [], {}, None
    for env in envs:
        if env.domain_index == holdout:
            test = env
            continue
        mapping[env.domain_index] = len(train)
        train.append(replace(env, domain_index=len(train)))
    return Split(train, test, mapping)
