"""Reproducible Wiener increments for the two measurement channels.

Each trajectory draws from its own counter-based stream: a numpy
``Philox`` bit generator keyed by ``SeedSequence(seed, spawn_key=(index,))``.
Standard normals come from numpy's ``Generator.standard_normal``
(ziggurat). Two normals are drawn per step, column 0 for xi and column 1
for xi', regardless of gamma', so the xi stream does not depend on gamma'.
Increments are stored pre-scaled by ``sqrt(gamma dt / 2)`` and
``sqrt(gamma' dt / 2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import NoiseIncrement, PhysParams

_DTYPE = np.dtype("<f8")


def substream(seed: int, trajectory_index: int) -> np.random.Generator:
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if trajectory_index < 0:
        raise ValueError(f"trajectory_index must be >= 0, got {trajectory_index}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(trajectory_index),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class NoisePath:
    seed: int
    trajectory_index: int
    dt: float
    increments: np.ndarray  # shape (n_steps, 2): columns d_xi, d_xi_prime

    def __len__(self):
        return self.increments.shape[0]

    def __getitem__(self, k) -> NoiseIncrement:
        row = self.increments[k]
        return NoiseIncrement(float(row[0]), float(row[1]))

    def __iter__(self):
        for a, b in self.increments.tolist():
            yield NoiseIncrement(a, b)

    @property
    def d_xi(self) -> np.ndarray:
        return self.increments[:, 0]

    @property
    def d_xi_prime(self) -> np.ndarray:
        return self.increments[:, 1]

    def coarsen(self, factor: int) -> "NoisePath":
        """Sum consecutive blocks of ``factor`` increments.

        The result is the same Brownian path sampled at ``factor * dt``.
        """
        n = len(self)
        if factor < 1 or n % factor:
            raise ValueError(f"cannot coarsen {n} steps by a factor of {factor}")
        inc = self.increments.reshape(n // factor, factor, 2).sum(axis=1)
        return NoisePath(self.seed, self.trajectory_index, self.dt * factor, inc)

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.increments, dtype=_DTYPE).tobytes()

    def dump(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, dt: float, seed=0, trajectory_index=0) -> "NoisePath":
        flat = np.frombuffer(data, dtype=_DTYPE)
        if flat.size % 2:
            raise ValueError("noise dump must hold an even number of float64 values")
        return cls(seed, trajectory_index, dt, flat.reshape(-1, 2).astype(np.float64))

    @classmethod
    def load(cls, path, dt: float, seed=0, trajectory_index=0) -> "NoisePath":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), dt, seed, trajectory_index)

    @classmethod
    def zeros(cls, dt: float, n_steps: int) -> "NoisePath":
        return cls(0, 0, dt, np.zeros((n_steps, 2)))


def make_path(seed: int, trajectory_index: int, params: PhysParams, dt: float, n_steps: int) -> NoisePath:
    if not (dt > 0 and math.isfinite(dt)):
        raise ValueError(f"dt must be positive, got {dt}")
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    z = substream(seed, trajectory_index).standard_normal((n_steps, 2))
    scale = np.array([math.sqrt(0.5 * params.gamma * dt), math.sqrt(0.5 * params.gamma_prime * dt)])
    # + 0.0 turns the -0.0 produced by a zero scale into +0.0
    inc = z * scale + 0.0
    return NoisePath(int(seed), int(trajectory_index), float(dt), inc)


def make_paths(seed, indices, params, dt, n_steps) -> np.ndarray:
    """Stack increments for several trajectories: shape ``(len(indices), n_steps, 2)``."""
    return np.stack([make_path(seed, i, params, dt, n_steps).increments for i in indices])
