"""Score-matching baseline: denoising score matching plus annealed Langevin dynamics.

This is a simplified stand-in used to compare sampling cost against flow
matching on the same network backbone. Noise is added per real coordinate of
the dual-channel tensor: ``x~ = x + sigma z``, ``z ~ N(0, I)``.

The network predicts ``sigma * score``; the time input carries the noise
level mapped to ``[0, 1]`` on a log scale (1 at ``sigma_max``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelDataset
from .errors import InvalidParameterError, SamplerDivergenceError
from .nn import NetworkConfig, VelocityNet
from .tensor import complex_to_tensor, make_rng, tensor_to_complex
from .training import OptimizerConfig, TrainResult, fit


@dataclass(frozen=True)
class LangevinConfig:
    n_levels: int = 500
    steps_per_level: int = 3
    sigma_max: float = 1.0
    sigma_min: float = 0.01
    eps0: float = 2e-5
    inject_noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_max > self.sigma_min > 0:
            raise InvalidParameterError("need sigma_max > sigma_min > 0")
        if self.n_levels < 1 or self.steps_per_level < 1:
            raise InvalidParameterError("n_levels and steps_per_level must be >= 1")
        if not self.eps0 > 0:
            raise InvalidParameterError("eps0 must be positive")

    @classmethod
    def full_scale_preset(cls, **overrides) -> "LangevinConfig":
        return cls(**{"n_levels": 2311, "steps_per_level": 3, **overrides})

    def ladder(self) -> np.ndarray:
        """Geometric noise levels from ``sigma_max`` down to ``sigma_min``."""
        if self.n_levels == 1:
            return np.array([self.sigma_min])
        return np.geomspace(self.sigma_max, self.sigma_min, self.n_levels)


class ScoreModel:
    """Wraps a backbone network as ``s(x, sigma) = net(x, c(sigma)) / sigma``."""

    def __init__(self, net: VelocityNet, sigma_max: float, sigma_min: float):
        self.net = net
        self.sigma_max, self.sigma_min = float(sigma_max), float(sigma_min)
        self.evals = 0

    def level_input(self, sigma) -> np.ndarray:
        lo, hi = np.log(self.sigma_min), np.log(self.sigma_max)
        return np.clip((np.log(sigma) - lo) / (hi - lo), 0.0, 1.0)

    def __call__(self, x: np.ndarray, sigma) -> np.ndarray:
        b = x.shape[0] if x.ndim == 4 else 1
        self.evals += b
        sigma = np.asarray(sigma, dtype=np.float64)
        out = self.net.forward(x, self.level_input(sigma))
        if sigma.ndim:
            sigma = sigma.reshape(sigma.shape + (1,) * (out.ndim - sigma.ndim))
        return out / sigma


def dsm_loss(
    net: VelocityNet,
    x: np.ndarray,
    rng: np.random.Generator,
    sigmas: np.ndarray,
    *,
    levels=None,
    z=None,
    backward: bool = True,
) -> float:
    """``mean_b ||sigma * s(x + sigma z, sigma) + z||^2`` with sigma-squared weighting.

    ``x`` is a batch of dual-channel tensors. A zero network scores
    ``E||z||^2 = 2 M N`` per sample.
    """
    b = x.shape[0]
    lo, hi = np.log(sigmas.min()), np.log(sigmas.max())
    if levels is None:
        levels = rng.integers(0, len(sigmas), size=b)
    sig = sigmas[levels]
    if z is None:
        z = rng.standard_normal(x.shape)
    x_noisy = x + sig[:, None, None, None] * z
    c = np.clip((np.log(sig) - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros(b)
    diff = net.forward(x_noisy, c) + z
    loss = float(np.sum(diff * diff) / b)
    if backward:
        net.backward(2.0 * diff / b)
    return loss


def make_dsm_loss(sigmas: np.ndarray):
    def loss_fn(model, h1, rng, backward):
        return dsm_loss(model, complex_to_tensor(h1), rng, sigmas, backward=backward)

    return loss_fn


def dsm_train(
    data: ChannelDataset | tuple[np.ndarray, np.ndarray],
    net_cfg: NetworkConfig,
    ladder: LangevinConfig,
    *,
    epochs: int = 20,
    batch_size: int = 32,
    optimizer: OptimizerConfig = OptimizerConfig(),
    seed: int = 0,
    max_steps: int | None = None,
    max_seconds: float | None = None,
) -> tuple[ScoreModel, TrainResult]:
    if isinstance(data, ChannelDataset):
        train_h, val_h = data.train, data.val
    else:
        train_h, val_h = data
    net = VelocityNet(net_cfg)
    result = fit(
        net,
        make_dsm_loss(ladder.ladder()),
        train_h,
        val_h,
        epochs=epochs,
        batch_size=batch_size,
        optimizer=optimizer,
        seed=seed,
        max_steps=max_steps,
        max_seconds=max_seconds,
    )
    return ScoreModel(net, ladder.sigma_max, ladder.sigma_min), result


def annealed_langevin(
    score_fn,
    h_init: np.ndarray,
    cfg: LangevinConfig,
    rng: np.random.Generator | None = None,
    *,
    observation: np.ndarray | None = None,
    observation_var: float | None = None,
) -> np.ndarray:
    """Annealed Langevin dynamics over the geometric ladder.

    For each level ``k`` and each of ``L`` updates:
    ``x <- x + a_k s(x, sigma_k) + sqrt(2 a_k) z`` with
    ``a_k = eps0 * sigma_k^2 / sigma_K^2``.

    ``score_fn(x, sigma)`` acts on dual-channel tensors. When ``observation``
    (a noisy channel such as the LS estimate, with per-real-coordinate noise
    variance ``observation_var``) is given, the Gaussian likelihood score
    ``(y - x) / (observation_var + sigma_k^2)`` is added so the chain samples
    an approximate posterior.
    """
    rng = make_rng(cfg.seed) if rng is None else rng
    x = complex_to_tensor(np.asarray(h_init, dtype=np.complex128))
    y = None if observation is None else complex_to_tensor(np.asarray(observation, dtype=np.complex128))
    sigmas = cfg.ladder()
    sigma_last = sigmas[-1]
    for k, sigma in enumerate(sigmas):
        alpha = cfg.eps0 * (sigma / sigma_last) ** 2
        for step in range(cfg.steps_per_level):
            grad = score_fn(x, sigma)
            if y is not None:
                grad = grad + (y - x) / (observation_var + sigma**2)
            x = x + alpha * grad
            if cfg.inject_noise:
                x = x + np.sqrt(2.0 * alpha) * rng.standard_normal(x.shape)
            if not np.all(np.isfinite(x)):
                raise SamplerDivergenceError(f"non-finite state at level {k}, update {step}")
    return tensor_to_complex(x)
