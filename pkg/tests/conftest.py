"""Shared fixtures and small volume builders."""
from __future__ import annotations

import numpy as np
import pytest

from anatomatch.volume import EmbeddingVolume


def unit_rows(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_volume(rng: np.random.Generator, dims, channels: int = 8, spacing=(2.0, 2.0, 2.0)) -> EmbeddingVolume:
    """Normalized random field; vectors are pairwise distinct with probability 1."""
    return EmbeddingVolume(unit_rows(rng, (*dims, channels)), spacing, normalized=True)


def smooth_field(dims, channels: int = 16, seed: int = 0, freq: float = 0.35):
    """Callable p -> (n, C) unit vectors from random Fourier features.

    Smooth in space yet locally distinctive, so it can be sampled at warped
    coordinates to build exact-correspondence fixtures.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((channels, 3)) * freq
    b = rng.uniform(0, 2 * np.pi, channels)

    def sample(pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        v = np.cos(pts @ w.T + b)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    return sample


def grid(dims) -> np.ndarray:
    return np.stack(np.meshgrid(*(np.arange(n) for n in dims), indexing="ij"), axis=-1).reshape(-1, 3).astype(np.float64)


def quantized_volume(rng, dims, c=4):
    """Entries from {-1, 0, 1}: lots of exactly tied scores."""
    x = rng.integers(-1, 2, (*dims, c)).astype(np.float64)
    x[np.all(x == 0, axis=-1), 0] = 1.0
    return EmbeddingVolume(x / np.linalg.norm(x, axis=-1, keepdims=True), normalized=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def warp_pair(dims, M, b, channels: int = 16, seed: int = 0, freq: float = 0.35, spare: int = 0):
    """(xa, xb, truth) with xb(q) = field(M^-1 (q - b)), so truth(t) = M t + b exactly.

    ``spare`` trailing channels are left at zero in both volumes (room for
    orthogonal corruption vectors).
    """
    sample = smooth_field(dims, channels - spare, seed, freq)
    M = np.asarray(M, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    g = grid(dims)
    pad = np.zeros((len(g), spare))
    fa = np.concatenate([sample(g), pad], axis=1).reshape(*dims, channels)
    src = (g - b) @ np.linalg.inv(M).T
    fb = np.concatenate([sample(src), pad], axis=1).reshape(*dims, channels)
    xa = EmbeddingVolume(fa, normalized=True)
    xb = EmbeddingVolume(fb, normalized=True)
    return xa, xb, lambda t: M @ np.asarray(t, dtype=np.float64) + b


def rotation(deg_z: float, deg_y: float = 0.0) -> np.ndarray:
    cz, sz = np.cos(np.radians(deg_z)), np.sin(np.radians(deg_z))
    cy, sy = np.cos(np.radians(deg_y)), np.sin(np.radians(deg_y))
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    return rz @ ry


@pytest.fixture(scope="session")
def trained():
    """Heads trained once on the default toy config (about 20 s)."""
    from anatomatch.embedder import TrainConfig, train

    return train(TrainConfig())


ACCEPTANCE: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    """Log one acceptance line; shown again in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
