"""NMSE sweeps, sampling-time measurements and CSV reports."""

from __future__ import annotations

import csv
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .channel import ChannelDataset, load_dataset
from .errors import ConfigError, InvalidParameterError
from .nn import FM_MAGIC, SM_MAGIC, load_checkpoint
from .pilots import PilotConfig, make_pilots, measure, ls_estimate, snr_to_sigma
from .sampler import SamplerConfig, euler_estimate
from .score import LangevinConfig, ScoreModel, annealed_langevin
from .tensor import derive_seed, frobenius_norm_sq, make_rng

NMSE_FLOOR_DB = -300.0
CSV_COLUMNS = ("estimator", "snr_db", "steps", "nmse_db", "nmse_stderr_db", "wall_s", "evals")


def nmse_ratio(h_est: np.ndarray, h_true: np.ndarray) -> np.ndarray | float:
    h_est, h_true = np.asarray(h_est), np.asarray(h_true)
    if h_est.shape != h_true.shape:
        raise InvalidParameterError(f"shape mismatch {h_est.shape} vs {h_true.shape}")
    ref = frobenius_norm_sq(h_true)
    if np.any(np.asarray(ref) == 0):
        raise InvalidParameterError("true channel has zero norm")
    return frobenius_norm_sq(h_est - h_true) / ref


def to_db(ratio: float) -> float:
    return NMSE_FLOOR_DB if ratio <= 0 else max(NMSE_FLOOR_DB, 10.0 * math.log10(ratio))


def nmse_db(h_est: np.ndarray, h_true: np.ndarray) -> float:
    """``10 log10(||H_est - H||_F^2 / ||H||_F^2)``, clamped at -300 dB.

    For a batch the per-sample ratios are averaged before taking the log.
    """
    return to_db(float(np.mean(nmse_ratio(h_est, h_true))))


def aggregate_nmse(ratios: np.ndarray) -> tuple[float, float]:
    """dB of the mean ratio, and its standard error mapped to dB by the delta method."""
    ratios = np.asarray(ratios, dtype=np.float64)
    mean = float(ratios.mean())
    if len(ratios) < 2 or mean <= 0:
        return to_db(mean), 0.0
    se = float(ratios.std(ddof=1) / math.sqrt(len(ratios)))
    return to_db(mean), 10.0 / math.log(10.0) * se / mean


@dataclass(frozen=True)
class Estimator:
    kind: str  # "ls", "fm" or "sm"
    steps: int = 0
    per_level: int = 0

    @classmethod
    def parse(cls, text: str) -> "Estimator":
        """``ls``, ``fm:<S>`` or ``sm:<K>:<L>``."""
        parts = str(text).strip().lower().split(":")
        try:
            if parts[0] == "ls" and len(parts) == 1:
                return cls("ls")
            if parts[0] == "fm" and len(parts) == 2:
                return cls("fm", int(parts[1]))
            if parts[0] == "sm" and len(parts) == 3:
                return cls("sm", int(parts[1]), int(parts[2]))
        except ValueError:
            pass
        raise ConfigError(f"cannot parse estimator {text!r}; expected ls, fm:<S> or sm:<K>:<L>")

    def __str__(self):
        return {"ls": "ls", "fm": f"fm:{self.steps}", "sm": f"sm:{self.steps}:{self.per_level}"}[self.kind]

    @property
    def evals_per_sample(self) -> int:
        return {"ls": 0, "fm": self.steps, "sm": self.steps * self.per_level}[self.kind]


@dataclass
class ExperimentSpec:
    """Sweep definition; :meth:`from_dict` reads the JSON experiment schema.

    JSON keys: ``dataset``, ``fm_checkpoint``, ``sm_checkpoint``,
    ``pilots: {n, t, power, seed}``, ``estimators`` (strings as accepted by
    :meth:`Estimator.parse`), ``snr_db``, ``trials``, ``seed``, and optionally
    ``split``, ``batch_size``, ``warmup``, ``update_rule`` and ``langevin``
    (overrides for :class:`LangevinConfig`).
    """

    estimators: list[Estimator]
    snr_db: list[float]
    trials: int
    pilots: PilotConfig
    seed: int = 0
    dataset: str | None = None
    fm_checkpoint: str | None = None
    sm_checkpoint: str | None = None
    split: str = "test"
    batch_size: int = 50
    warmup: int = 3
    update_rule: str = "standard-euler"
    langevin: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.estimators or not self.snr_db:
            raise ConfigError("estimators and snr_db must be non-empty")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentSpec":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        try:
            p = d.pop("pilots")
            pilots = PilotConfig(
                n_tx=int(p["n"]), t_slots=int(p["t"]), pilot_power=float(p.get("power", 1.0)),
                seed=int(p.get("seed", 0)),
            )
            d["estimators"] = [Estimator.parse(e) for e in d["estimators"]]
            d["snr_db"] = [float(s) for s in d["snr_db"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc
        for key in ("dataset", "fm_checkpoint", "sm_checkpoint"):
            if d.get(key) is not None and base_dir is not None:
                d[key] = str((base_dir / d[key]).resolve()) if not Path(d[key]).is_absolute() else d[key]
        try:
            return cls(pilots=pilots, **d)
        except TypeError as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read experiment file {path}: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent)


@dataclass
class BenchRow:
    estimator: str
    snr_db: float
    steps: int
    nmse_db: float
    nmse_stderr_db: float
    wall_s: float
    evals: int

    def as_tuple(self):
        return tuple(getattr(self, c) for c in CSV_COLUMNS)


@dataclass
class BenchReport:
    rows: list[BenchRow]
    metadata: dict = field(default_factory=dict)

    def lookup(self, estimator: str, snr_db: float, steps: int | None = None) -> BenchRow:
        for r in self.rows:
            if r.estimator == estimator and r.snr_db == snr_db and (steps is None or r.steps == steps):
                return r
        raise KeyError((estimator, snr_db, steps))


class CountingField:
    """Forwards ``forward`` to a model and counts per-sample evaluations."""

    def __init__(self, model):
        self.model = model
        self.evals = 0

    def forward(self, x, t):
        self.evals += x.shape[0] if x.ndim == 4 else 1
        return self.model.forward(x, t)


def environment_metadata() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor(),
    }


def _estimate(est: Estimator, h_ls, noise_var, fm_model, sm_model, spec, rng):
    if est.kind == "ls":
        return h_ls
    if est.kind == "fm":
        return euler_estimate(fm_model, h_ls, SamplerConfig(est.steps, spec.update_rule))
    lcfg = LangevinConfig(**{**spec.langevin, "n_levels": est.steps, "steps_per_level": est.per_level})
    # LS noise is CN(0, noise_var): noise_var / 2 per real coordinate
    return annealed_langevin(sm_model, h_ls, lcfg, rng, observation=h_ls, observation_var=noise_var / 2.0)


def run_sweep(
    spec: ExperimentSpec,
    dataset: ChannelDataset | np.ndarray | None = None,
    fm_model=None,
    sm_model: ScoreModel | None = None,
) -> BenchReport:
    """Estimate every (estimator, SNR) point and aggregate NMSE and wall time.

    Trial ``i`` uses channel ``i mod n`` of the chosen split with fresh noise;
    all estimators at one SNR see the same measurements. ``spec.warmup``
    estimates per point run before timing starts and are not counted.
    """
    if dataset is None:
        if spec.dataset is None:
            raise ConfigError("no dataset given")
        try:
            dataset = load_dataset(spec.dataset)
        except OSError as exc:
            raise ConfigError(f"cannot open dataset: {exc}") from exc
    channels = dataset.split(spec.split) if isinstance(dataset, ChannelDataset) else np.asarray(dataset)
    channels = np.asarray(channels, dtype=np.complex128)
    kinds = {e.kind for e in spec.estimators}
    if "fm" in kinds and fm_model is None:
        fm_model = _load_model(spec.fm_checkpoint, FM_MAGIC, "fm_checkpoint")
    if "sm" in kinds and sm_model is None:
        net, meta = _load_model(spec.sm_checkpoint, SM_MAGIC, "sm_checkpoint", with_meta=True)
        sm_model = ScoreModel(net, meta.get("sigma_max", 1.0), meta.get("sigma_min", 0.01))
    m, n = channels.shape[1:]
    if n != spec.pilots.n_tx:
        raise ConfigError(f"pilots are for {spec.pilots.n_tx} tx antennas, dataset has {n}")
    for model in (fm_model, sm_model.net if sm_model is not None else None):
        if model is not None:
            try:
                model.config.check_input_shape(m, n)
            except ValueError as exc:
                raise ConfigError(f"model does not fit the dataset: {exc}") from exc

    pilots = make_pilots(spec.pilots)
    e_p = spec.pilots.pilot_power
    idx = np.arange(spec.trials) % len(channels)
    h_true = channels[idx]
    rows = []
    with threadpool_limits(limits=1):
        for si, snr in enumerate(spec.snr_db):
            sigma = snr_to_sigma(snr, e_p)
            meas = measure(h_true, pilots, sigma, make_rng(derive_seed(spec.seed, si)))
            h_ls = ls_estimate(meas, e_p)
            noise_var = sigma**2 / e_p
            for ei, est in enumerate(spec.estimators):
                counter = CountingField(fm_model) if fm_model is not None else None
                if sm_model is not None:
                    sm_model.evals = 0
                rng = make_rng(derive_seed(spec.seed, si, ei))
                if spec.warmup and est.kind != "ls":
                    _estimate(est, h_ls[: spec.warmup], noise_var, counter, sm_model, spec, rng)
                if counter is not None:
                    counter.evals = 0
                if sm_model is not None:
                    sm_model.evals = 0
                out = np.empty_like(h_ls)
                t0 = time.perf_counter()
                for b in range(0, spec.trials, spec.batch_size):
                    sl = slice(b, b + spec.batch_size)
                    out[sl] = _estimate(est, h_ls[sl], noise_var, counter, sm_model, spec, rng)
                wall = time.perf_counter() - t0
                evals = {"ls": 0, "fm": counter.evals if counter else 0, "sm": sm_model.evals if sm_model else 0}
                db, se = aggregate_nmse(nmse_ratio(out, h_true))
                rows.append(BenchRow(est.kind, float(snr), est.steps, db, se, wall, evals[est.kind]))
    meta = environment_metadata()
    meta.update(trials=spec.trials, seed=spec.seed, m=m, n=n, t=spec.pilots.t_slots)
    return BenchReport(rows, meta)


def _load_model(path, magic, key, with_meta=False):
    if not path:
        raise ConfigError(f"{key} is required for the requested estimators")
    try:
        model, meta = load_checkpoint(path, magic)
    except OSError as exc:
        raise ConfigError(f"missing checkpoint {path}: {exc}") from exc
    return (model, meta) if with_meta else model


def emit_csv(report: BenchReport, dest) -> None:
    """Write the report to a path or an open text stream."""
    if hasattr(dest, "write"):
        _write_rows(report, dest)
        return
    with open(dest, "w", newline="", encoding="utf-8") as f:
        _write_rows(report, f)


def _write_rows(report: BenchReport, f) -> None:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([r.estimator, repr(r.snr_db), r.steps, repr(r.nmse_db), repr(r.nmse_stderr_db),
                    repr(r.wall_s), r.evals])


def read_csv(path) -> list[BenchRow]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected columns {header}")
        return [
            BenchRow(e, float(s), int(k), float(nm), float(se), float(w), int(ev))
            for e, s, k, nm, se, w, ev in reader
        ]
