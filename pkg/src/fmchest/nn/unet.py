"""Compact encoder-decoder velocity network with time conditioning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, InvalidParameterError, ModelStateError
from ..tensor import make_rng
from .layers import (
    AttentionBlock,
    Conv2d,
    GroupNorm,
    Linear,
    Module,
    ResBlock,
    SiLU,
    Upsample,
    sinusoidal_embedding,
)


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 2
    base_channels: int = 16
    level_multipliers: tuple[int, ...] = (1, 2, 2)
    res_blocks_per_level: int = 2
    # Levels (0 = full resolution) that get an attention block after each
    # ResBlock. The bottleneck always has one.
    attention_levels: tuple[int, ...] = ()
    time_embed_dim: int = 32
    time_scale: float = 1000.0
    groups: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "level_multipliers", tuple(self.level_multipliers))
        object.__setattr__(self, "attention_levels", tuple(sorted(set(self.attention_levels))))
        if not self.level_multipliers:
            raise InvalidParameterError("at least one level is required")
        if min(self.in_channels, self.base_channels, self.groups, *self.level_multipliers) < 1:
            raise InvalidParameterError("channel counts, multipliers and groups must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise InvalidParameterError("time_embed_dim must be even")
        if self.res_blocks_per_level < 1:
            raise InvalidParameterError("res_blocks_per_level must be >= 1")
        bad = [lv for lv in self.attention_levels if not 0 <= lv < self.n_levels]
        if bad:
            raise InvalidParameterError(f"attention levels {bad} out of range")

    @property
    def n_levels(self) -> int:
        return len(self.level_multipliers)

    def check_input_shape(self, m: int, n: int) -> None:
        f = 2 ** (self.n_levels - 1)
        if m % f or n % f:
            raise DimensionError(f"spatial dims {m}x{n} must be divisible by {f} for {self.n_levels} levels")


class VelocityNet(Module):
    """``u(x, t)``: maps a ``(B, 2, M, N)`` tensor and times ``(B,)`` to the same shape.

    The final convolution starts at zero, so an untrained network predicts a
    zero field.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = cfg = config
        rng = make_rng(cfg.seed)
        t_hidden = 4 * cfg.time_embed_dim
        self.t_lin1 = self.add_child("t_lin1", Linear(cfg.time_embed_dim, t_hidden, rng))
        self.t_act = self.add_child("t_act", SiLU())
        self.t_lin2 = self.add_child("t_lin2", Linear(t_hidden, t_hidden, rng))

        chans = [cfg.base_channels * m for m in cfg.level_multipliers]
        self.in_conv = self.add_child("in_conv", Conv2d(cfg.in_channels, cfg.base_channels, rng))
        self.enc: list[list[Module]] = []
        self.down: list[Module | None] = []
        c = cfg.base_channels
        for lv, co in enumerate(chans):
            blocks = []
            for r in range(cfg.res_blocks_per_level):
                blocks.append(self.add_child(f"enc{lv}.res{r}", ResBlock(c, co, t_hidden, rng, cfg.groups)))
                c = co
                if lv in cfg.attention_levels:
                    blocks.append(self.add_child(f"enc{lv}.attn{r}", AttentionBlock(c, rng, cfg.groups)))
            self.enc.append(blocks)
            last = lv == cfg.n_levels - 1
            self.down.append(None if last else self.add_child(f"down{lv}", Conv2d(c, c, rng, stride=2)))

        self.mid1 = self.add_child("mid.res0", ResBlock(c, c, t_hidden, rng, cfg.groups))
        self.mid_attn = self.add_child("mid.attn", AttentionBlock(c, rng, cfg.groups))
        self.mid2 = self.add_child("mid.res1", ResBlock(c, c, t_hidden, rng, cfg.groups))

        self.dec: list[list[Module]] = []
        self.up: list[Module | None] = []
        for lv in reversed(range(cfg.n_levels)):
            co = chans[lv]
            blocks = []
            for r in range(cfg.res_blocks_per_level):
                c_in = c + chans[lv] if r == 0 else c
                blocks.append(self.add_child(f"dec{lv}.res{r}", ResBlock(c_in, co, t_hidden, rng, cfg.groups)))
                c = co
                if lv in cfg.attention_levels:
                    blocks.append(self.add_child(f"dec{lv}.attn{r}", AttentionBlock(c, rng, cfg.groups)))
            self.dec.append(blocks)
            if lv > 0:
                self.up.append(self.add_child(f"up{lv}", Upsample(c, chans[lv - 1], rng)))
                c = chans[lv - 1]
            else:
                self.up.append(None)

        self.out_norm = self.add_child("out_norm", GroupNorm(c, cfg.groups))
        self.out_act = self.add_child("out_act", SiLU())
        self.out_conv = self.add_child("out_conv", Conv2d(c, cfg.in_channels, rng, zero_init=True))
        self._fwd_state = None

    @property
    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def gradients(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    @staticmethod
    def _block_forward(block, h, temb):
        return block.forward(h, temb) if isinstance(block, ResBlock) else block.forward(h)

    def forward(self, x: np.ndarray, t) -> np.ndarray:
        """Accepts ``(2, M, N)`` or ``(B, 2, M, N)``; ``t`` scalar or ``(B,)``."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(f"expected (B, {self.config.in_channels}, M, N), got {x.shape}")
        self.config.check_input_shape(*x.shape[2:])
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))

        emb = sinusoidal_embedding(t, self.config.time_embed_dim, self.config.time_scale)
        temb = self.t_lin2.forward(self.t_act.forward(self.t_lin1.forward(emb)))

        h = self.in_conv.forward(np.ascontiguousarray(x.transpose(0, 2, 3, 1)))
        skips = []
        for blocks, down in zip(self.enc, self.down):
            for blk in blocks:
                h = self._block_forward(blk, h, temb)
            skips.append(h)
            if down is not None:
                h = down.forward(h)
        h = self.mid2.forward(self.mid_attn.forward(self.mid1.forward(h, temb)), temb)
        split_at = []
        for blocks, up, skip in zip(self.dec, self.up, reversed(skips)):
            split_at.append(h.shape[-1])
            h = np.concatenate([h, skip], axis=-1)
            for blk in blocks:
                h = self._block_forward(blk, h, temb)
            if up is not None:
                h = up.forward(h)
        out = self.out_conv.forward(self.out_act.forward(self.out_norm.forward(h)))
        self._fwd_state = (split_at, single)
        out = out.transpose(0, 3, 1, 2)
        return out[0] if single else out

    def backward(self, dout: np.ndarray) -> dict[str, np.ndarray]:
        """Accumulate parameter gradients for upstream gradient ``dout``.

        Returns the named gradient dict (live references into the model).
        """
        if self._fwd_state is None:
            raise ModelStateError("backward called before forward")
        split_at, single = self._fwd_state
        self._fwd_state = None
        dout = np.asarray(dout, dtype=np.float64)
        if single:
            dout = dout[None]
        dh = self.out_norm.backward(self.out_act.backward(self.out_conv.backward(dout.transpose(0, 2, 3, 1))))
        dtemb = 0.0
        dskips = []
        for blocks, up, split in zip(reversed(self.dec), reversed(self.up), reversed(split_at)):
            if up is not None:
                dh = up.backward(dh)
            for blk in reversed(blocks):
                if isinstance(blk, ResBlock):
                    dh, dt = blk.backward(dh)
                    dtemb = dtemb + dt
                else:
                    dh = blk.backward(dh)
            dskips.append(dh[..., split:])
            dh = dh[..., :split]
        # dskips is ordered from level 0 upward
        dh, dt = self.mid2.backward(dh)
        dtemb = dtemb + dt
        dh = self.mid_attn.backward(dh)
        dh, dt = self.mid1.backward(dh)
        dtemb = dtemb + dt
        for lv in reversed(range(self.config.n_levels)):
            if self.down[lv] is not None:
                dh = self.down[lv].backward(dh)
            dh = dh + dskips[lv]
            for blk in reversed(self.enc[lv]):
                if isinstance(blk, ResBlock):
                    dh, dt = blk.backward(dh)
                    dtemb = dtemb + dt
                else:
                    dh = blk.backward(dh)
        self.in_conv.backward(dh)
        self.t_lin1.backward(self.t_act.backward(self.t_lin2.backward(dtemb)))
        return self.gradients()
