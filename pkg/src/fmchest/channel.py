"""Geometric clustered MIMO channel model and the FMCHEST1 dataset format.

Each realization is a sum of plane-wave rays between two uniform linear
arrays. Rays are grouped in clusters sharing a mean angle of arrival and
departure; per-ray angles scatter around the cluster mean.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidParameterError
from .tensor import RNG_ALGORITHM, derive_seed, make_rng, randn_complex

MAGIC = b"FMCHEST1"
VERSION = 1
HEADER_SIZE = 64
# magic, version, M, N, n_train, n_val, n_test, dtype code, prng id, metadata length, reserved
_HEADER = struct.Struct("<8sIIIIIII16sI8x")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ChannelModelConfig:
    m_rx: int = 8
    n_tx: int = 32
    n_clusters: int = 3
    rays_per_cluster: int = 10
    angular_spread_deg: float = 5.0
    antenna_spacing: float = 0.5
    # Cluster mean angles are drawn uniformly from [-max_angle_deg, max_angle_deg].
    max_angle_deg: float = 5.0
    # "per_sample": every realization is scaled to ||H||_F^2 = M*N exactly.
    # "expected": fixed c = 1/sqrt(n_paths), so only E||H||_F^2 = M*N.
    normalize: str = "per_sample"
    seed: int = 0

    def __post_init__(self):
        if self.m_rx < 1 or self.n_tx < 1:
            raise InvalidParameterError("antenna counts must be >= 1")
        if self.n_clusters < 1 or self.rays_per_cluster < 1:
            raise InvalidParameterError("n_clusters and rays_per_cluster must be >= 1")
        if self.angular_spread_deg < 0:
            raise InvalidParameterError("angular_spread_deg must be >= 0")
        if not 0 <= self.max_angle_deg <= 90:
            raise InvalidParameterError("max_angle_deg must lie in [0, 90]")
        if self.normalize not in ("per_sample", "expected"):
            raise InvalidParameterError(f"unknown normalization {self.normalize!r}")

    @property
    def n_paths(self) -> int:
        return self.n_clusters * self.rays_per_cluster


def steering_vector(n_ant: int, angle_rad, spacing: float = 0.5) -> np.ndarray:
    """ULA response ``exp(j 2 pi d k sin(angle))`` for ``k = 0..n_ant-1``.

    ``angle_rad`` may be an array of angles, in which case the result has
    shape ``(n_ant, n_angles)``.
    """
    if n_ant < 1:
        raise InvalidParameterError("n_ant must be >= 1")
    k = np.arange(n_ant)
    phase = 2.0 * np.pi * spacing * np.multiply.outer(k, np.sin(angle_rad))
    return np.exp(1j * phase)


def clustered_channel(cfg: ChannelModelConfig, gains, aoa, aod) -> np.ndarray:
    """Deterministic channel ``c * sum_p gains[p] a_rx(aoa[p]) a_tx(aod[p])^H``.

    With ``normalize="expected"``, ``c = 1/sqrt(n_paths)``, which gives unit
    expected per-entry power for unit-variance gains. With ``"per_sample"``,
    ``c`` makes the per-entry power of this realization exactly one.
    """
    gains = np.asarray(gains, dtype=np.complex128).ravel()
    a_rx = steering_vector(cfg.m_rx, np.ravel(aoa), cfg.antenna_spacing)
    a_tx = steering_vector(cfg.n_tx, np.ravel(aod), cfg.antenna_spacing)
    h = (a_rx * gains) @ a_tx.conj().T
    if cfg.normalize == "expected":
        return h / np.sqrt(cfg.n_paths)
    energy = np.sum(h.real**2 + h.imag**2)
    if energy == 0.0:
        return h
    return h * np.sqrt(cfg.m_rx * cfg.n_tx / energy)


def generate_channel(cfg: ChannelModelConfig, rng: np.random.Generator) -> np.ndarray:
    lim = np.deg2rad(cfg.max_angle_deg)
    spread = np.deg2rad(cfg.angular_spread_deg)
    shape = (cfg.n_clusters, cfg.rays_per_cluster)
    mean_aoa = rng.uniform(-lim, lim, size=(cfg.n_clusters, 1))
    mean_aod = rng.uniform(-lim, lim, size=(cfg.n_clusters, 1))
    aoa = mean_aoa + spread * rng.standard_normal(shape)
    aod = mean_aod + spread * rng.standard_normal(shape)
    gains = randn_complex(rng, cfg.n_paths)
    return clustered_channel(cfg, gains, aoa, aod)


@dataclass
class ChannelDataset:
    config: ChannelModelConfig
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    rng_algorithm: str = RNG_ALGORITHM
    extra: dict = field(default_factory=dict)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    @property
    def shape(self) -> tuple[int, int]:
        return self.config.m_rx, self.config.n_tx

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def mean_power(self) -> float:
        allh = np.concatenate([self.train, self.val, self.test])
        return float(np.mean(np.abs(allh) ** 2))

    def __eq__(self, other):
        if not isinstance(other, ChannelDataset):
            return NotImplemented
        return (
            self.config == other.config
            and self.rng_algorithm == other.rng_algorithm
            and self.extra == other.extra
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in zip((self.train, self.val, self.test), (other.train, other.val, other.test))
            )
        )


def build_dataset(
    cfg: ChannelModelConfig,
    sizes: tuple[int, int, int],
    seed: int | None = None,
    dtype=np.complex64,
) -> ChannelDataset:
    """Draw train/val/test splits, one derived seed stream per sample.

    Samples are stored as ``complex64`` by default so a dataset survives the
    32-bit file format bit-exactly.
    """
    if len(sizes) != 3 or any(s < 1 for s in sizes):
        raise InvalidParameterError(f"split sizes must be three positive counts, got {sizes}")
    seed = cfg.seed if seed is None else seed
    splits = []
    for split_idx, n in enumerate(sizes):
        out = np.empty((n, cfg.m_rx, cfg.n_tx), dtype=dtype)
        for i in range(n):
            out[i] = generate_channel(cfg, make_rng(derive_seed(seed, split_idx, i)))
        splits.append(out)
    if seed != cfg.seed:
        cfg = ChannelModelConfig(**{**asdict(cfg), "seed": seed})
    return ChannelDataset(cfg, *splits)


def save_dataset(ds: ChannelDataset, path) -> None:
    dtype_code = 1 if ds.train.dtype == np.complex64 else 2
    real_dtype = _DTYPES[dtype_code]
    meta = json.dumps({"config": asdict(ds.config), "extra": ds.extra}, sort_keys=True).encode()
    m, n = ds.shape
    header = _HEADER.pack(
        MAGIC, VERSION, m, n, *ds.sizes, dtype_code, ds.rng_algorithm.encode("ascii"), len(meta)
    )
    with open(path, "wb") as f:
        f.write(header)
        for name in SPLITS:
            h = ds.split(name)
            f.write(np.stack([h.real, h.imag], axis=-1).astype(real_dtype).tobytes())
        f.write(meta)


def load_dataset(path) -> ChannelDataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"file is {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header", len(raw))
    magic, version, m, n, n_tr, n_va, n_te, code, prng, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    if m < 1 or n < 1:
        raise FormatError(f"invalid matrix shape {m}x{n}", 12)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 32)
    try:
        prng_id = prng.rstrip(b"\0").decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"PRNG id is not ASCII: {prng!r}", 36) from exc
    real_dtype = _DTYPES[code]
    counts = (n_tr, n_va, n_te)
    body = sum(counts) * m * n * 2 * real_dtype.itemsize
    expected = HEADER_SIZE + body + meta_len
    if len(raw) != expected:
        raise FormatError(f"file is {len(raw)} bytes, header implies {expected}", min(len(raw), expected))
    try:
        meta = json.loads(raw[HEADER_SIZE + body :].decode())
        cfg = ChannelModelConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt metadata block: {exc}", HEADER_SIZE + body) from exc
    if (cfg.m_rx, cfg.n_tx) != (m, n):
        raise FormatError("metadata shape disagrees with header", 12)
    cdtype = np.complex64 if code == 1 else np.complex128
    offset = HEADER_SIZE
    splits = []
    for cnt in counts:
        nbytes = cnt * m * n * 2 * real_dtype.itemsize
        arr = np.frombuffer(raw, dtype=real_dtype, count=cnt * m * n * 2, offset=offset)
        arr = arr.reshape(cnt, m, n, 2)
        h = np.empty((cnt, m, n), dtype=cdtype)
        h.real, h.imag = arr[..., 0], arr[..., 1]
        splits.append(h)
        offset += nbytes
    return ChannelDataset(cfg, *splits, rng_algorithm=prng_id, extra=meta.get("extra", {}))
