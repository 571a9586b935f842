"""Orthogonal pilots, the linear measurement model and the LS estimator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidParameterError, InvalidPilotError
from .tensor import make_rng, randn_complex

ORTHOGONALITY_TOL = 1e-6
QPSK = np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4)))


@dataclass(frozen=True)
class PilotConfig:
    n_tx: int
    t_slots: int
    pilot_power: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_tx < 1:
            raise InvalidParameterError("n_tx must be >= 1")
        if self.t_slots < self.n_tx:
            raise InvalidParameterError(
                f"t_slots={self.t_slots} < n_tx={self.n_tx}: orthogonal pilots need at least N slots"
            )
        if not self.pilot_power > 0:
            raise InvalidParameterError("pilot_power must be positive")


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    pilots: np.ndarray
    noise_sigma: float


def _sylvester(order: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < order:
        h = np.block([[h, h], [h, -h]])
    return h


def make_pilots(cfg: PilotConfig) -> np.ndarray:
    """``N x T`` pilot matrix with ``P P^H = E_p I``.

    Rows come from a Sylvester-Hadamard matrix when ``T`` is a power of two
    (every entry is then a QPSK symbol), otherwise from the ``T``-point DFT.
    The seed only picks which rows are used and a QPSK rotation per row.
    """
    n, t = cfg.n_tx, cfg.t_slots
    rng = make_rng(cfg.seed)
    if t & (t - 1) == 0:
        base = _sylvester(t).astype(np.complex128)
    else:
        k = np.arange(t)
        base = np.exp(-2j * np.pi * np.outer(k, k) / t)
    rows = rng.permutation(t)[:n]
    rot = QPSK[rng.integers(0, 4, size=n)]
    p = base[rows] * rot[:, None] * np.sqrt(cfg.pilot_power / t)
    check_orthogonal(p, cfg.pilot_power, tol=1e-10)
    return p


def orthogonality_residual(pilots: np.ndarray, pilot_power: float) -> float:
    n = pilots.shape[0]
    gram = pilots @ pilots.conj().T
    return float(np.linalg.norm(gram - pilot_power * np.eye(n)) / pilot_power)


def check_orthogonal(pilots: np.ndarray, pilot_power: float, tol: float = ORTHOGONALITY_TOL) -> None:
    res = orthogonality_residual(pilots, pilot_power)
    if res > tol:
        raise InvalidPilotError(f"pilots are not orthogonal: ||PP^H - E_p I||/E_p = {res:.3e}")


def measure(h: np.ndarray, pilots: np.ndarray, noise_sigma: float, rng: np.random.Generator) -> Measurement:
    """``Y = H P + E`` with ``E`` entries ``CN(0, noise_sigma^2)``.

    ``h`` may carry leading batch axes; one noise draw per entry.
    """
    h = np.asarray(h)
    if h.shape[-1] != pilots.shape[0]:
        raise DimensionError(f"channel has {h.shape[-1]} tx antennas but pilots have {pilots.shape[0]} rows")
    clean = h @ pilots
    noise = randn_complex(rng, *clean.shape, sigma=noise_sigma)
    return Measurement(clean + noise, pilots, float(noise_sigma))


def ls_estimate(meas: Measurement, pilot_power: float) -> np.ndarray:
    """``Y P^H / E_p``: the true channel plus white noise of variance ``sigma^2/E_p``."""
    check_orthogonal(meas.pilots, pilot_power)
    return meas.y @ meas.pilots.conj().T / pilot_power


def snr_to_sigma(snr_db: float, pilot_power: float = 1.0) -> float:
    return float(np.sqrt(pilot_power / 10.0 ** (snr_db / 10.0)))
