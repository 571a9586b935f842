"""Dense complex-matrix kernel and seeded random sampling.

Complex matrices are plain ``complex128`` ndarrays of shape ``(rows, cols)``;
batches carry a leading axis. Real tensors use the dual-channel layout
``(2, rows, cols)`` with real parts in channel 0 and imaginary parts in
channel 1.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InvalidParameterError

RNG_ALGORITHM = "philox4x64"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; the same seed yields the same stream everywhere."""
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for an independent sub-stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


def randn_complex(rng: np.random.Generator, *shape: int, sigma: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian entries with variance ``sigma**2``."""
    if not np.isfinite(sigma) or sigma < 0:
        raise InvalidParameterError(f"sigma must be finite and non-negative, got {sigma}")
    z = rng.standard_normal((*shape, 2))
    out = (z[..., 0] + 1j * z[..., 1]) * (sigma / np.sqrt(2.0))
    return out


def complex_to_tensor(h: np.ndarray) -> np.ndarray:
    """``(..., M, N)`` complex -> ``(..., 2, M, N)`` real."""
    h = np.asarray(h)
    return np.stack([h.real, h.imag], axis=-3).astype(np.float64)


def tensor_to_complex(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 3 or x.shape[-3] != 2:
        raise DimensionError(f"expected a (..., 2, M, N) tensor, got shape {x.shape}")
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


def frobenius_norm_sq(h: np.ndarray) -> float | np.ndarray:
    """Sum of squared magnitudes over the trailing two axes."""
    h = np.asarray(h)
    out = np.sum(h.real**2 + h.imag**2, axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def _check_matrix(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = _check_matrix(a, "a"), _check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hermitian(a: np.ndarray) -> np.ndarray:
    return _check_matrix(a, "a").conj().T


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def scale(a: np.ndarray, alpha: complex) -> np.ndarray:
    return alpha * np.asarray(a)
