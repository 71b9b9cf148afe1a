"""Perceptron feature extractor with a class head h and a domain head g.

The feature extractor's weights and biases live in one flat vector ``theta``
so that a mask lines up with it one-to-one. Heads are stored densely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, matmul, mul, relu, segment

HEAD_KEYS = ("h_w", "h_b")
DOMAIN_KEYS = ("g_w", "g_b")


@dataclass(frozen=True)
class Architecture:
    n_in: int
    widths: tuple = (256, 256)
    n_classes: int = 2
    n_domains: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValueError("feature extractor needs at least one layer")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"activation must be 'relu' or 'none', got {self.activation!r}")

    @property
    def layout(self) -> list[tuple[str, int, tuple]]:
        """``(name, start, shape)`` for every tensor packed into theta."""
        out, pos, fan_in = [], 0, self.n_in
        for i, width in enumerate(self.widths):
            out.append((f"w{i}", pos, (fan_in, width)))
            pos += fan_in * width
            out.append((f"b{i}", pos, (width,)))
            pos += width
            fan_in = width
        return out

    @property
    def n_theta(self) -> int:
        name, start, shape = self.layout[-1]
        return start + int(np.prod(shape))

    @property
    def layer_offsets(self) -> tuple:
        return tuple((name, start, start + int(np.prod(shape))) for name, start, shape in self.layout)

    @property
    def n_features(self) -> int:
        return self.widths[-1]


def init_params(arch: Architecture, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    theta = np.zeros(arch.n_theta)
    for name, start, shape in arch.layout:
        if name.startswith("w"):
            fan_in = shape[0]
            gain = 2.0 if arch.activation == "relu" else 1.0
            theta[start:start + shape[0] * shape[1]] = rng.normal(0.0, np.sqrt(gain / fan_in), shape).reshape(-1)
    d = arch.n_features
    return {
        "theta": theta,
        "h_w": rng.normal(0.0, np.sqrt(1.0 / d), (d, arch.n_classes)),
        "h_b": np.zeros(arch.n_classes),
        "g_w": rng.normal(0.0, np.sqrt(1.0 / d), (d, arch.n_domains)),
        "g_b": np.zeros(arch.n_domains),
    }


def features(arch: Architecture, theta, x) -> Tensor:
    out = x if isinstance(x, Tensor) else Tensor(x)
    layout = arch.layout
    for i in range(len(arch.widths)):
        (_, ws, wshape), (_, bs, bshape) = layout[2 * i], layout[2 * i + 1]
        out = add(matmul(out, segment(theta, ws, wshape)), segment(theta, bs, bshape))
        if arch.activation == "relu":
            out = relu(out)
    return out


def masked_features(arch: Architecture, theta, x, keep) -> Tensor:
    """Forward through ``keep * theta``; ``keep`` is a constant 0/1 vector."""
    return features(arch, mul(theta, keep), x)


def head(feats, w, b) -> Tensor:
    return add(matmul(feats, w), b)


def predict(arch: Architecture, params, keep, x) -> np.ndarray:
    """Class predictions of h(f_{keep * theta}(x)), evaluated without a tape."""
    theta = params["theta"] if keep is None else params["theta"] * keep
    logits = head(features(arch, Tensor(theta), x), Tensor(params["h_w"]), Tensor(params["h_b"]))
    return np.argmax(logits.data, axis=1)
