"""Conditional flow matching from noisy to clean channels.

The source sample is the clean channel plus synthetic noise,
``H0 = H1 + E~`` with ``E~ ~ CN(0, sigma_tilde^2)``. Points on the path are
``H_t = t H1 + (1 - (1 - sigma_min) t) H0`` and the regression target is the
constant velocity ``H1 - (1 - sigma_min) H0``; with ``sigma_min = 0`` that is
``-E~``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelDataset
from .errors import InvalidParameterError
from .nn import NetworkConfig, VelocityNet
from .tensor import complex_to_tensor, randn_complex
from .training import OptimizerConfig, TrainResult, fit


@dataclass(frozen=True)
class FlowPathConfig:
    sigma_min: float = 0.0
    sigma_tilde: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise InvalidParameterError("sigma_min must lie in [0, 1)")
        if not self.sigma_tilde > 0:
            raise InvalidParameterError("sigma_tilde must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    flow: FlowPathConfig = field(default_factory=FlowPathConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    checkpoint_every: int = 0
    max_steps: int | None = None
    max_seconds: float | None = None
    seed: int = 0

    @classmethod
    def full_scale_preset(cls, **overrides) -> "TrainConfig":
        """100 epochs, batch 128, AdamW lr 1e-5, weight decay 1e-2, sigma_tilde 0.1."""
        base = dict(
            epochs=100,
            batch_size=128,
            flow=FlowPathConfig(0.0, 0.1),
            optimizer=OptimizerConfig(lr=1e-5, weight_decay=1e-2),
        )
        base.update(overrides)
        return cls(**base)


def corrupt(h1: np.ndarray, sigma_tilde: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(h0, e_tilde)`` with ``h0 = h1 + e_tilde``."""
    if not sigma_tilde > 0:
        raise InvalidParameterError("sigma_tilde must be positive")
    h1 = np.asarray(h1)
    e = randn_complex(rng, *h1.shape, sigma=sigma_tilde)
    return h1 + e, e


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise InvalidParameterError("t must lie in [0, 1]")
    return t


def flow_point(h0: np.ndarray, h1: np.ndarray, t, sigma_min: float = 0.0) -> np.ndarray:
    """``t H1 + (1 - (1 - sigma_min) t) H0``; ``t`` may be one value per batch item."""
    h0, h1 = np.asarray(h0), np.asarray(h1)
    if h0.shape != h1.shape:
        raise InvalidParameterError(f"shape mismatch {h0.shape} vs {h1.shape}")
    t = _check_t(t)
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (h1.ndim - t.ndim))
    return t * h1 + (1.0 - (1.0 - sigma_min) * t) * h0


def target_velocity(h0: np.ndarray, h1: np.ndarray, sigma_min: float = 0.0) -> np.ndarray:
    h0, h1 = np.asarray(h0), np.asarray(h1)
    if h0.shape != h1.shape:
        raise InvalidParameterError(f"shape mismatch {h0.shape} vs {h1.shape}")
    return h1 - (1.0 - sigma_min) * h0


def cfm_loss(
    model: VelocityNet,
    h0: np.ndarray,
    h1: np.ndarray,
    rng: np.random.Generator | None = None,
    *,
    t=None,
    sigma_min: float = 0.0,
    backward: bool = True,
) -> float:
    """Batch mean of ``||u(H_t, t) - v_target||^2`` over the full ``2 x M x N`` tensor.

    One ``t ~ U[0, 1]`` per sample unless ``t`` is given. With ``backward``,
    gradients are accumulated into ``model.grads``.
    """
    h0, h1 = np.asarray(h0), np.asarray(h1)
    if h1.ndim == 2:
        h0, h1 = h0[None], h1[None]
    b = h1.shape[0]
    if b == 0:
        raise InvalidParameterError("empty batch")
    if t is None:
        t = rng.uniform(0.0, 1.0, size=b)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    x_t = complex_to_tensor(flow_point(h0, h1, t, sigma_min))
    v = complex_to_tensor(target_velocity(h0, h1, sigma_min))
    diff = model.forward(x_t, t) - v
    loss = float(np.sum(diff * diff) / b)
    if backward:
        model.backward(2.0 * diff / b)
    return loss


def make_fm_loss(flow: FlowPathConfig):
    """Loss closure for :func:`training.fit`: fresh noise and times on every call."""

    def loss_fn(model, h1, rng, backward):
        h0, _ = corrupt(h1, flow.sigma_tilde, rng)
        return cfm_loss(model, h0, h1, rng, sigma_min=flow.sigma_min, backward=backward)

    return loss_fn


def train(
    data: ChannelDataset | tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig = TrainConfig(),
    net_cfg: NetworkConfig = NetworkConfig(),
    on_checkpoint=None,
) -> TrainResult:
    """Train a velocity field; returns the best-validation model and its loss history."""
    if isinstance(data, ChannelDataset):
        train_h, val_h = data.train, data.val
    else:
        train_h, val_h = data
    model = VelocityNet(net_cfg)
    return fit(
        model,
        make_fm_loss(cfg.flow),
        train_h,
        val_h,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        optimizer=cfg.optimizer,
        seed=cfg.seed,
        max_steps=cfg.max_steps,
        max_seconds=cfg.max_seconds,
        checkpoint_every=cfg.checkpoint_every,
        on_checkpoint=on_checkpoint,
    )
