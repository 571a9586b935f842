"""Euler integration of a learned velocity field, started from the LS estimate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, SamplerDivergenceError
from .pilots import Measurement, ls_estimate
from .tensor import complex_to_tensor, tensor_to_complex

UPDATE_RULES = ("standard-euler", "scaled-step")


@dataclass(frozen=True)
class SamplerConfig:
    """``update_rule="scaled-step"`` scales step ``s`` by ``s * dt`` instead of ``dt``.

    This rule integrates a total time of ``(S + 1) / 2`` and overshoots
    on a constant field; it is kept only for comparison runs.
    """

    steps: int = 5
    update_rule: str = "standard-euler"
    record_trajectory: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidParameterError("steps must be >= 1")
        if self.update_rule not in UPDATE_RULES:
            raise InvalidParameterError(f"update_rule must be one of {UPDATE_RULES}")


def euler_estimate(model, h_init: np.ndarray, cfg: SamplerConfig = SamplerConfig()):
    """Integrate ``dH/dt = u(H, t)`` from ``t = 0`` to ``1`` in ``cfg.steps`` steps.

    ``model.forward(x, t)`` takes dual-channel tensors. ``h_init`` is an
    ``(M, N)`` matrix or an ``(B, M, N)`` batch. Step ``s`` evaluates the field at
    the left endpoint ``t = (s - 1) / S``. Returns the final estimate, or
    ``(estimate, states)`` with all ``S + 1`` states when
    ``cfg.record_trajectory`` is set.
    """
    s_total = cfg.steps
    dt = 1.0 / s_total
    x = complex_to_tensor(np.asarray(h_init, dtype=np.complex128))
    batch_t = (x.shape[0],) if x.ndim == 4 else ()
    states = [tensor_to_complex(x)] if cfg.record_trajectory else None
    for s in range(1, s_total + 1):
        t = np.full(batch_t, (s - 1) * dt) if batch_t else (s - 1) * dt
        coef = dt if cfg.update_rule == "standard-euler" else s * dt
        x = x + coef * model.forward(x, t)
        if not np.all(np.isfinite(x)):
            raise SamplerDivergenceError(f"non-finite state at Euler step {s}")
        if states is not None:
            states.append(tensor_to_complex(x))
    out = tensor_to_complex(x)
    return (out, states) if states is not None else out


def estimate_channel(model, meas: Measurement, pilot_power: float, cfg: SamplerConfig = SamplerConfig()):
    """LS initialization followed by Euler refinement."""
    return euler_estimate(model, ls_estimate(meas, pilot_power), cfg)
