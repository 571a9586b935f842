"""Command-line entry point: ``fmchest <subcommand> [options]``.

Every subcommand accepts ``--config FILE``. For ``sweep`` and ``timing`` the
file is a JSON experiment (see :class:`fmchest.bench.ExperimentSpec`); for the
other subcommands it is a JSON object whose keys are option names (dashes or
underscores) that act as defaults. ``--seed`` always wins.

Exit status: 0 on success, 1 on configuration or usage errors, 2 on runtime
failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .bench import (
    Estimator,
    ExperimentSpec,
    emit_csv,
    nmse_db,
    run_sweep,
)
from .channel import ChannelModelConfig, build_dataset, load_dataset, save_dataset
from .errors import ConfigError, FmchestError
from .flow import FlowPathConfig, TrainConfig, train
from .nn import FM_MAGIC, SM_MAGIC, NetworkConfig, load_checkpoint, save_checkpoint
from .pilots import PilotConfig, ls_estimate, make_pilots, measure, snr_to_sigma
from .sampler import SamplerConfig, euler_estimate
from .score import LangevinConfig, dsm_train
from .tensor import derive_seed, make_rng
from .training import OptimizerConfig

log = logging.getLogger("fmchest")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_network_args(p):
    g = p.add_argument_group("network")
    g.add_argument("--base-channels", type=int, default=16)
    g.add_argument("--levels", type=_ints, default=[1, 2, 2], help="channel multipliers per level")
    g.add_argument("--res-blocks", type=int, default=2)
    g.add_argument("--attention", type=_ints, default=[], help="levels with extra attention blocks")
    g.add_argument("--time-dim", type=int, default=32)


def _add_train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--data", required=True, help="FMCHEST1 dataset")
    g.add_argument("--out", required=True, help="checkpoint path")
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr", type=float, default=1e-4)
    g.add_argument("--weight-decay", type=float, default=1e-2)
    g.add_argument("--max-steps", type=int, default=None)
    g.add_argument("--max-seconds", type=float, default=None, help="wall-clock training budget")
    g.add_argument("--log", default=None, help="per-epoch CSV log")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fmchest", description="Flow-matching MIMO channel estimation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    parser.subcommands = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        parser.subcommands[name] = p
        p.add_argument("--config", default=None, help="JSON file")
        p.add_argument("--seed", type=int, default=None)
        return p

    p = add("generate-data", "generate a synthetic channel dataset")
    p.add_argument("--m", type=int, default=8, help="receive antennas")
    p.add_argument("--n", type=int, default=32, help="transmit antennas")
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--val", type=int, default=200)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--clusters", type=int, default=ChannelModelConfig.n_clusters)
    p.add_argument("--rays", type=int, default=ChannelModelConfig.rays_per_cluster)
    p.add_argument("--spread", type=float, default=ChannelModelConfig.angular_spread_deg)
    p.add_argument("--max-angle", type=float, default=ChannelModelConfig.max_angle_deg)
    p.add_argument("--spacing", type=float, default=0.5)
    p.add_argument("--normalize", choices=["per_sample", "expected"], default="per_sample")
    p.add_argument("--float64", action="store_true", help="store 64-bit samples")
    p.add_argument("--out", required=True)

    p = add("train-fm", "train a flow-matching velocity field")
    _add_train_args(p)
    _add_network_args(p)
    p.add_argument("--sigma-tilde", type=float, default=0.1)
    p.add_argument("--sigma-min", type=float, default=0.0)
    p.add_argument("--preset", choices=["desk", "full"], default="desk")

    p = add("train-sm", "train the score-matching baseline")
    _add_train_args(p)
    _add_network_args(p)
    p.add_argument("--sigma-max", type=float, default=1.0)
    p.add_argument("--sigma-min", type=float, default=0.01)
    p.add_argument("--n-levels", type=int, default=500)

    p = add("estimate", "estimate test channels at one SNR")
    p.add_argument("--data", required=True)
    p.add_argument("--fm", default=None, help="FM checkpoint; LS only when omitted")
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--update-rule", choices=["standard-euler", "scaled-step"], default="standard-euler")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--t", type=int, default=None, help="pilot length (default N)")
    p.add_argument("--power", type=float, default=1.0)
    p.add_argument("--trajectory", default=None, help="CSV of (step, nmse_db)")

    p = add("sweep", "NMSE-vs-SNR sweep from an experiment file")
    p.add_argument("--out", required=True)

    p = add("timing", "sampling-time comparison at one SNR")
    p.add_argument("--data", default=None)
    p.add_argument("--fm", default=None)
    p.add_argument("--sm", default=None)
    p.add_argument("--fm-steps", type=_ints, default=[1, 5, 20, 100])
    p.add_argument("--sm-kl", type=_ints, default=[500, 3])
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--power", type=float, default=1.0)
    p.add_argument("--out", default=None, help="optional CSV report")
    return parser


def _network_config(a) -> NetworkConfig:
    return NetworkConfig(
        base_channels=a.base_channels,
        level_multipliers=tuple(a.levels),
        res_blocks_per_level=a.res_blocks,
        attention_levels=tuple(a.attention),
        time_embed_dim=a.time_dim,
        seed=a.seed,
    )


def cmd_generate(a) -> None:
    cfg = ChannelModelConfig(
        m_rx=a.m, n_tx=a.n, n_clusters=a.clusters, rays_per_cluster=a.rays, angular_spread_deg=a.spread,
        antenna_spacing=a.spacing, max_angle_deg=a.max_angle, normalize=a.normalize, seed=a.seed,
    )
    ds = build_dataset(cfg, (a.train, a.val, a.test), dtype=np.complex128 if a.float64 else np.complex64)
    save_dataset(ds, a.out)
    print(f"wrote {sum(ds.sizes)} channels ({a.m}x{a.n}) to {a.out}")


def cmd_train_fm(a) -> None:
    ds = load_dataset(a.data)
    opt = OptimizerConfig(lr=a.lr, weight_decay=a.weight_decay)
    flow = FlowPathConfig(a.sigma_min, a.sigma_tilde)
    if a.preset == "full":
        cfg = TrainConfig.full_scale_preset(flow=flow, seed=a.seed, max_steps=a.max_steps, max_seconds=a.max_seconds)
    else:
        cfg = TrainConfig(
            a.epochs, a.batch_size, flow, opt, seed=a.seed, max_steps=a.max_steps, max_seconds=a.max_seconds
        )
    meta = {"kind": "fm", "sigma_tilde": a.sigma_tilde, "sigma_min": a.sigma_min}
    result = train(ds, cfg, _network_config(a))
    save_checkpoint(result.model, a.out, FM_MAGIC, {**meta, "best_epoch": result.best_epoch})
    if a.log:
        result.write_log(a.log)
    best = result.history[result.best_epoch]
    print(f"best epoch {result.best_epoch}: val loss {best.val_loss:.5f}; saved {a.out}")


def cmd_train_sm(a) -> None:
    ds = load_dataset(a.data)
    ladder = LangevinConfig(n_levels=a.n_levels, sigma_max=a.sigma_max, sigma_min=a.sigma_min)
    opt = OptimizerConfig(lr=a.lr, weight_decay=a.weight_decay)
    score, result = dsm_train(
        ds, _network_config(a), ladder, epochs=a.epochs, batch_size=a.batch_size, optimizer=opt,
        seed=a.seed, max_steps=a.max_steps, max_seconds=a.max_seconds,
    )
    meta = {"kind": "sm", "sigma_max": a.sigma_max, "sigma_min": a.sigma_min, "n_levels": a.n_levels}
    save_checkpoint(score.net, a.out, SM_MAGIC, {**meta, "best_epoch": result.best_epoch})
    if a.log:
        result.write_log(a.log)
    print(f"best epoch {result.best_epoch}; saved {a.out}")


def cmd_estimate(a) -> None:
    ds = load_dataset(a.data)
    h = ds.test.astype(np.complex128)
    trials = a.trials or len(h)
    h = h[np.arange(trials) % len(h)]
    pcfg = PilotConfig(ds.config.n_tx, a.t or ds.config.n_tx, a.power, seed=a.seed)
    pilots = make_pilots(pcfg)
    meas = measure(h, pilots, snr_to_sigma(a.snr, a.power), make_rng(derive_seed(a.seed, 0)))
    h_ls = ls_estimate(meas, a.power)
    print(f"LS  NMSE @ {a.snr:g} dB: {nmse_db(h_ls, h):.3f} dB")
    if a.fm is None:
        return
    model, _ = load_checkpoint(a.fm, FM_MAGIC)
    scfg = SamplerConfig(a.steps, a.update_rule, record_trajectory=True)
    h_fm, states = euler_estimate(model, h_ls, scfg)
    print(f"FM  NMSE @ {a.snr:g} dB (S={a.steps}): {nmse_db(h_fm, h):.3f} dB")
    if a.trajectory:
        with open(a.trajectory, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "nmse_db"])
            for s, state in enumerate(states):
                w.writerow([s, repr(nmse_db(state, h))])


def _spec_from_args(a) -> ExperimentSpec:
    if a.config:
        spec = ExperimentSpec.from_json(a.config)
    else:
        if a.data is None:
            raise ConfigError("timing needs --config or --data")
        n = load_dataset(a.data).config.n_tx
        spec = ExperimentSpec(
            estimators=[Estimator("ls")],
            snr_db=[a.snr],
            trials=a.trials or len(load_dataset(a.data).test),
            pilots=PilotConfig(n, a.t or n, a.power),
            dataset=a.data,
        )
    if a.seed is not None:
        spec.seed = a.seed
    return spec


def cmd_sweep(a) -> None:
    if not a.config:
        raise ConfigError("sweep requires --config")
    spec = ExperimentSpec.from_json(a.config)
    if a.seed is not None:
        spec.seed = a.seed
    report = run_sweep(spec)
    emit_csv(report, a.out)
    Path(str(a.out) + ".meta.json").write_text(json.dumps(report.metadata, indent=2))
    for r in report.rows:
        print(f"{r.estimator:>3} S={r.steps:<5d} SNR={r.snr_db:6.1f} dB  NMSE={r.nmse_db:8.3f} dB")


def cmd_timing(a) -> None:
    spec = _spec_from_args(a)
    if len(a.sm_kl) != 2:
        raise ConfigError("--sm-kl takes K,L")
    ests = [Estimator("fm", s) for s in a.fm_steps]
    if a.sm or spec.sm_checkpoint:
        ests.append(Estimator("sm", a.sm_kl[0], a.sm_kl[1]))
    spec.estimators = ests
    spec.snr_db = [spec.snr_db[0]]
    spec.fm_checkpoint = a.fm or spec.fm_checkpoint
    spec.sm_checkpoint = a.sm or spec.sm_checkpoint
    report = run_sweep(spec)
    print(f"{'method':<8}{'steps':>8}{'evals/sample':>14}{'time (s)':>12}{'NMSE (dB)':>12}")
    for r in report.rows:
        per = r.evals // spec.trials
        print(f"{r.estimator.upper():<8}{r.steps:>8d}{per:>14d}{r.wall_s:>12.3f}{r.nmse_db:>12.3f}")
    if a.out:
        emit_csv(report, a.out)


COMMANDS = {
    "generate-data": cmd_generate,
    "train-fm": cmd_train_fm,
    "train-sm": cmd_train_sm,
    "estimate": cmd_estimate,
    "sweep": cmd_sweep,
    "timing": cmd_timing,
}


def _apply_option_file(parser, argv):
    """Parse ``argv``; option-style subcommands take defaults from ``--config``."""
    argv = list(sys.argv[1:] if argv is None else argv)
    command = next((tok for tok in argv if tok in COMMANDS), None)
    config = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
    if config and command not in (None, "sweep", "timing"):
        try:
            values = json.loads(Path(config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
        sub = parser.subcommands[command]
        dests = {act.dest for act in sub._actions}
        defaults = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = set(defaults) - dests
        if unknown:
            raise ConfigError(f"unknown keys in {config}: {sorted(unknown)}")
        for act in sub._actions:
            if act.dest in defaults:
                act.required = False
        sub.set_defaults(**defaults)
    a = parser.parse_args(argv)
    if a.seed is None:
        a.seed = 0
    return a


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = _apply_option_file(parser, argv)
    except ConfigError as exc:
        print(f"fmchest: config error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[a.command](a)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"fmchest: config error: {exc}", file=sys.stderr)
        return 1
    except (FmchestError, ValueError, OSError) as exc:
        print(f"fmchest: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
