"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line through :func:`conftest.record`;
the lines are repeated in the terminal summary. The trained-model checks
share session fixtures that train two flow-matching models and a score model
on the desk-scale dataset (about an hour on one core). Set
``FMCHEST_ACCEPTANCE_CACHE`` to a directory to keep the trained checkpoints
between runs.
"""

from __future__ import annotations

import os
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import finite_difference_check, record
from threadpoolctl import threadpool_limits

from fmchest.bench import Estimator, ExperimentSpec, run_sweep
from fmchest.channel import ChannelModelConfig, build_dataset, load_dataset, save_dataset
from fmchest.errors import FormatError
from fmchest.flow import FlowPathConfig, TrainConfig, cfm_loss, corrupt, train
from fmchest.nn import FM_MAGIC, SM_MAGIC, NetworkConfig, VelocityNet, load_checkpoint, save_checkpoint
from fmchest.nn.layers import AttentionBlock, Conv2d, GroupNorm, Linear, ResBlock, Upsample
from fmchest.pilots import PilotConfig
from fmchest.sampler import SamplerConfig, euler_estimate
from fmchest.score import LangevinConfig, ScoreModel, dsm_train
from fmchest.tensor import make_rng, randn_complex
from fmchest.training import OptimizerConfig

pytestmark = pytest.mark.slow

M, N, T = 8, 32, 32
SNR_GRID = (0.0, 5.0, 10.0, 15.0, 20.0)
FM_STEPS = (1, 2, 5, 20)
TRAIN_BUDGET_S = 30 * 60
# stop early enough that the final epoch cannot cross the budget
TRAIN_MAX_SECONDS = 1740.0
FM_LR = 1e-3
SM_TIMING_SAMPLES = 8
TIMING_BATCH = 8
CACHE = os.environ.get("FMCHEST_ACCEPTANCE_CACHE")


# ---------------------------------------------------------------- fixtures


@pytest.fixture(scope="session")
def desk_data():
    cfg = ChannelModelConfig(m_rx=M, n_tx=N, seed=2024)
    return build_dataset(cfg, (2000, 200, 200))


def _cached(name: str, magic: bytes, build):
    """Returns ``(model, meta)``, building and optionally caching it."""
    if CACHE:
        path = Path(CACHE) / name
        if path.exists():
            return load_checkpoint(path, magic)
    model, meta = build()
    if CACHE:
        Path(CACHE).mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, Path(CACHE) / name, magic, meta)
    return model, meta


def _train_fm(data, sigma_tilde):
    cfg = TrainConfig(
        epochs=60,
        batch_size=32,
        flow=FlowPathConfig(0.0, sigma_tilde),
        optimizer=OptimizerConfig(lr=FM_LR),
        max_seconds=TRAIN_MAX_SECONDS,
        seed=7,
    )

    def build():
        t0 = time.perf_counter()
        with threadpool_limits(limits=1):
            result = train(data, cfg, NetworkConfig())
        meta = {
            "sigma_tilde": sigma_tilde,
            "train_seconds": time.perf_counter() - t0,
            "epochs_run": result.history[-1].epoch,
            "best_epoch": result.best_epoch,
        }
        return result.model, meta

    return _cached(f"fm_sigma{sigma_tilde:g}.ckpt", FM_MAGIC, build)


@pytest.fixture(scope="session")
def fm_low(desk_data):
    return _train_fm(desk_data, 0.1)


@pytest.fixture(scope="session")
def fm_high(desk_data):
    return _train_fm(desk_data, 0.3)


@pytest.fixture(scope="session")
def sm_model(desk_data):
    ladder = LangevinConfig()

    def build():
        with threadpool_limits(limits=1):
            model, _ = dsm_train(desk_data, NetworkConfig(), ladder, epochs=1, optimizer=OptimizerConfig(lr=FM_LR),
                                 seed=3, max_steps=60)
        return model.net, {"sigma_max": ladder.sigma_max, "sigma_min": ladder.sigma_min}

    net, meta = _cached("sm.ckpt", SM_MAGIC, build)
    return ScoreModel(net, meta["sigma_max"], meta["sigma_min"])


def _sweep(model, data, estimators, snrs=SNR_GRID):
    spec = ExperimentSpec(
        estimators=[Estimator.parse(e) for e in estimators],
        snr_db=list(snrs),
        trials=len(data.test),
        pilots=PilotConfig(N, T),
        seed=11,
    )
    return run_sweep(spec, data, fm_model=model)


@pytest.fixture(scope="session")
def sweep_low(fm_low, desk_data):
    return _sweep(fm_low[0], desk_data, ["ls"] + [f"fm:{s}" for s in FM_STEPS])


@pytest.fixture(scope="session")
def sweep_high(fm_high, desk_data):
    return _sweep(fm_high[0], desk_data, ["ls", "fm:5"])


def _curve(report, estimator="fm", steps=5):
    return [report.lookup(estimator, s, steps).nmse_db for s in SNR_GRID]


def _fmt(values):
    return "[" + ", ".join(f"{v:.2f}" for v in values) + "]"


# ------------------------------------------------------------- criteria


def test_c1_ls_matches_analytic_oracle():
    t0 = time.perf_counter()
    channels = build_dataset(ChannelModelConfig(m_rx=M, n_tx=N, seed=1), (1, 1, 500)).test
    spec = ExperimentSpec([Estimator("ls")], list(SNR_GRID), 500, PilotConfig(N, T), seed=5)
    report = run_sweep(spec, channels)
    elapsed = time.perf_counter() - t0
    errs = [abs(report.lookup("ls", s).nmse_db + s) for s in SNR_GRID]
    ok = max(errs) <= 0.3 and elapsed < 60
    record(1, "LS NMSE equals -SNR within 0.3 dB", ok, f"max |err| {max(errs):.3f} dB, {elapsed:.1f}s")
    assert ok


def _layer_check(module, inputs, rng, skip=()):
    w = rng.standard_normal(module.forward(*inputs.values()).shape)

    def loss():
        return float(np.sum(module.forward(*inputs.values()) * w))

    module.zero_grad()
    module.forward(*inputs.values())
    din = module.backward(w)
    din = din if isinstance(din, tuple) else (din,)
    params = {k: v for k, v in module.named_parameters() if k not in skip}
    grads = dict(module.named_grads())
    worst = finite_difference_check(loss, params, grads, rng)[0] if params else 0.0
    return max(worst, finite_difference_check(loss, inputs, dict(zip(inputs, din)), rng)[0])


def _randomize(module, rng, scale):
    for _, p in module.named_parameters():
        p[...] = scale * rng.standard_normal(p.shape)
    return module


def test_c2_gradients_match_finite_differences():
    rng = make_rng(42)
    t0 = time.perf_counter()
    x = rng.standard_normal((2, 8, 8, 2))
    temb = rng.standard_normal((2, 6))
    errors = {
        "conv": _layer_check(Conv2d(2, 4, rng), {"x": x}, rng),
        "downsample": _layer_check(Conv2d(2, 4, rng, stride=2), {"x": x}, rng),
        "upsample": _layer_check(Upsample(2, 4, rng), {"x": x}, rng),
        "time-affine": _layer_check(Linear(6, 4, rng), {"t": temb}, rng),
        "groupnorm": _layer_check(_randomize(GroupNorm(2, groups=2), rng, 0.5), {"x": x}, rng),
        "resblock": _layer_check(
            _randomize(ResBlock(2, 4, t_dim=6, rng=rng, groups=2), rng, 0.3), {"x": x, "temb": temb}, rng
        ),
        # key bias gradient is identically zero; unit tests cover it separately
        "attention": _layer_check(
            _randomize(AttentionBlock(2, rng, groups=1), rng, 0.5), {"x": x}, rng, skip=("qkv.bias",)
        ),
    }
    net = _randomize(VelocityNet(NetworkConfig(base_channels=8, level_multipliers=(1, 2), res_blocks_per_level=1,
                                               time_embed_dim=8, groups=4, seed=3)), rng, 0.3)
    h1 = randn_complex(make_rng(0), 2, 8, 8)
    h0, _ = corrupt(h1, 0.1, make_rng(1))
    t = np.array([0.3, 0.8])
    net.zero_grad()
    cfm_loss(net, h0, h1, t=t)
    params = {k: v for k, v in net.parameters().items() if not k.endswith("attn.qkv.bias")}
    errors["cfm pipeline"] = finite_difference_check(
        lambda: cfm_loss(net, h0, h1, t=t, backward=False), params, net.gradients(), rng
    )[0]
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 300
    record(2, "gradients match central differences", ok,
           f"worst {worst} rel err {errors[worst]:.2e}, {elapsed:.1f}s")
    assert ok


class _ConstantField:
    def __init__(self, value):
        self.value = value

    def forward(self, x, t):
        return self.value


def test_c3_constant_field_integrated_exactly():
    from fmchest.flow import target_velocity
    from fmchest.tensor import complex_to_tensor

    h1 = randn_complex(make_rng(3), 4, M, N)
    h0, _ = corrupt(h1, 0.5, make_rng(4))
    field = _ConstantField(complex_to_tensor(target_velocity(h0, h1, 0.0)))
    errs = []
    for s in FM_STEPS:
        out = euler_estimate(field, h0, SamplerConfig(s))
        errs.append(np.linalg.norm(out - h1) / np.linalg.norm(h1))
    ok = max(errs) < 1e-10
    record(3, "Euler on the constant oracle field lands on H1", ok, f"max rel err {max(errs):.1e}")
    assert ok


def test_c4_fm_beats_ls_at_10db(fm_low, sweep_low, desk_data):
    _, meta = fm_low
    fm = sweep_low.lookup("fm", 10.0, 5).nmse_db
    ls = sweep_low.lookup("ls", 10.0).nmse_db
    budget_ok = meta["train_seconds"] <= TRAIN_BUDGET_S
    ok = fm <= ls - 5.0 and budget_ok and len(desk_data.test) >= 200
    record(4, "FM (S=5) at least 5 dB below LS at 10 dB", ok,
           f"FM {fm:.2f} dB, LS {ls:.2f} dB, gain {ls - fm:.2f} dB, "
           f"trained {meta['train_seconds']:.0f}s / {meta['epochs_run']} epochs")
    assert ok


def test_c5_more_steps_do_not_hurt(sweep_low):
    worst_rise = -np.inf
    for snr in SNR_GRID:
        vals = [sweep_low.lookup("fm", snr, s).nmse_db for s in FM_STEPS]
        worst_rise = max(worst_rise, max(b - a for a, b in zip(vals, vals[1:])))
    at10 = {s: sweep_low.lookup("fm", 10.0, s).nmse_db for s in FM_STEPS}
    gap = max(abs(sweep_low.lookup("fm", snr, 5).nmse_db - sweep_low.lookup("fm", snr, 20).nmse_db)
              for snr in SNR_GRID)
    ok = worst_rise <= 0.3 and gap <= 1.0
    record(5, "NMSE non-increasing in S; S=5 within 1 dB of S=20", ok,
           f"worst rise {worst_rise:+.2f} dB, max |S5-S20| {gap:.2f} dB, at 10 dB {_fmt(at10.values())}")
    assert ok


def test_c6_fm_sampling_much_faster_than_sm(fm_low, sm_model, desk_data):
    common = dict(snr_db=[10.0], pilots=PilotConfig(N, T), seed=13, batch_size=TIMING_BATCH)
    fm_report = run_sweep(ExperimentSpec([Estimator("fm", 5)], trials=len(desk_data.test), **common),
                          desk_data, fm_model=fm_low[0])
    sm_report = run_sweep(ExperimentSpec([Estimator("sm", 500, 3)], trials=SM_TIMING_SAMPLES, **common),
                          desk_data, sm_model=sm_model)
    fm_row, sm_row = fm_report.rows[0], sm_report.rows[0]
    n_test = len(desk_data.test)
    fm_per, sm_per = fm_row.evals / n_test, sm_row.evals / SM_TIMING_SAMPLES
    # SM total over the test set, extrapolated from the timed subset
    sm_total = sm_row.wall_s / SM_TIMING_SAMPLES * n_test
    ok = fm_row.wall_s <= sm_total / 20 and fm_per == 5 and sm_per == 1500
    record(6, "FM S=5 total time at most 1/20 of SM K=500 L=3", ok,
           f"FM {fm_row.wall_s:.2f}s, SM {sm_total:.1f}s (from {SM_TIMING_SAMPLES} samples), "
           f"ratio {sm_total / fm_row.wall_s:.0f}x, evals/sample {fm_per:g} vs {sm_per:g}")
    assert ok


def test_c7_sigma_tilde_tradeoff(sweep_low, sweep_high):
    lo_snr, hi_snr = SNR_GRID[0], SNR_GRID[-1]
    low_hi = sweep_low.lookup("fm", hi_snr, 5).nmse_db
    high_hi = sweep_high.lookup("fm", hi_snr, 5).nmse_db
    low_lo = sweep_low.lookup("fm", lo_snr, 5).nmse_db
    high_lo = sweep_high.lookup("fm", lo_snr, 5).nmse_db
    ok = low_hi < high_hi and high_lo <= low_lo + 0.5
    record(7, "small sigma wins at high SNR, large sigma holds at low SNR", ok,
           f"{hi_snr:g} dB: 0.1 -> {low_hi:.2f}, 0.3 -> {high_hi:.2f}; "
           f"{lo_snr:g} dB: 0.1 -> {low_lo:.2f}, 0.3 -> {high_lo:.2f}")
    assert ok


def test_c8_nmse_decreases_with_snr(sweep_low, sweep_high):
    curve = _curve(sweep_low)
    worst = max(b - a for a, b in zip(curve, curve[1:]))
    ok = worst < 0.5
    record(8, "trained FM NMSE falls across the SNR grid", ok,
           f"S=5 curve {_fmt(curve)} dB (sigma 0.3: {_fmt(_curve(sweep_high))}), worst step {worst:+.2f} dB")
    assert ok


def test_c9_persistence(tmp_path, desk_data):
    ds_path = tmp_path / "d.bin"
    save_dataset(desk_data, ds_path)
    ds_ok = load_dataset(ds_path) == desk_data
    net = _randomize(VelocityNet(NetworkConfig()), make_rng(0), 0.1)
    ck_path = tmp_path / "m.ckpt"
    save_checkpoint(net, ck_path, meta={"note": "x"})
    back, meta = load_checkpoint(ck_path)
    ck_ok = meta == {"note": "x"} and all(
        np.array_equal(a, back.parameters()[k]) for k, a in net.parameters().items()
    )
    ck_ok = ck_ok and back.config == net.config

    rng = make_rng(9)
    crashes, checked = [], 0
    for path, loader, head in ((ds_path, load_dataset, 64), (ck_path, load_checkpoint, 64)):
        raw = path.read_bytes()
        variants = [raw[:k] for k in (0, 4, 8, 20, head - 1)]
        for _ in range(60):
            buf = bytearray(raw)
            pos = int(rng.integers(0, head))
            buf[pos] ^= int(rng.integers(1, 256))
            variants.append(bytes(buf))
        for i, blob in enumerate(variants):
            bad = tmp_path / f"bad{checked}"
            bad.write_bytes(blob)
            checked += 1
            try:
                loader(bad)
            except FormatError:
                pass
            except Exception as exc:  # noqa: BLE001 - any other exception counts as a crash
                crashes.append(f"{path.name}#{i}: {type(exc).__name__}")
    ok = ds_ok and ck_ok and not crashes
    record(9, "files round-trip bit-exactly; corrupt headers raise FormatError", ok,
           f"dataset {ds_ok}, checkpoint {ck_ok}, {checked} corrupted files, crashes {crashes[:3]}")
    assert ok
