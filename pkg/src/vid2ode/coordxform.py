"""Trainable similarity map between pixel coordinates and physical states.

Each object carries one transform: physical = scale * (spatial - t), with the
scale kept positive by parameterizing it as exp(rho). Forward and inverse share
the same parameters, so the round trip is exact up to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FrameTransform:
    """Similarity map for one object. `rho` is log(scale), `t` is in pixels."""

    rho: float = 0.0
    t: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)

    @property
    def scale(self) -> float:
        return float(np.exp(self.rho))

    def to_dict(self):
        return {"rho": float(self.rho), "scale": self.scale, "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d):
        return cls(rho=float(d["rho"]), t=np.asarray(d["t"], dtype=float))


def to_physical(x_s: np.ndarray, tf: FrameTransform) -> np.ndarray:
    """Map spatial (pixel) coordinates [..., 2] to physical coordinates."""
    return tf.scale * (np.asarray(x_s, dtype=float) - tf.t)


def to_spatial(x_p: np.ndarray, tf: FrameTransform) -> np.ndarray:
    """Inverse of to_physical: physical [..., 2] back to pixel coordinates."""
    return np.asarray(x_p, dtype=float) / tf.scale + tf.t


def to_physical_vjp(x_s: np.ndarray, tf: FrameTransform, cot: np.ndarray):
    """Backpropagate through to_physical.

    Returns (d_x_s, d_rho, d_t) for an upstream cotangent of the output.
    d/d_rho uses d(scale)/d_rho = scale, so the partial equals the output itself.
    """
    s = tf.scale
    out = s * (np.asarray(x_s, dtype=float) - tf.t)
    d_x_s = s * cot
    d_rho = float(np.sum(cot * out))
    d_t = -s * np.sum(cot.reshape(-1, 2), axis=0)
    return d_x_s, d_rho, d_t


def to_spatial_vjp(x_p: np.ndarray, tf: FrameTransform, cot: np.ndarray):
    """Backpropagate through to_spatial. Returns (d_x_p, d_rho, d_t)."""
    s = tf.scale
    x_p = np.asarray(x_p, dtype=float)
    d_x_p = cot / s
    d_rho = float(np.sum(cot * (-x_p / s)))
    d_t = np.sum(cot.reshape(-1, 2), axis=0)
    return d_x_p, d_rho, d_t
