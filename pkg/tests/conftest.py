import numpy as np
import pytest

from fmchest.channel import ChannelModelConfig, build_dataset
from fmchest.nn import NetworkConfig

TINY_NET = NetworkConfig(
    base_channels=8,
    level_multipliers=(1, 2),
    res_blocks_per_level=1,
    attention_levels=(0,),
    time_embed_dim=8,
    groups=4,
    seed=1,
)


ACCEPTANCE_LINES: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> None:
    """Print and keep one acceptance verdict line."""
    line = f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(ChannelModelConfig(m_rx=8, n_tx=8, seed=5), (32, 8, 8))


@pytest.fixture
def tiny_net_cfg():
    return TINY_NET


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - f| / max(|a|, |f|, floor)``.

    The floor keeps structurally zero gradients (for example the key bias of
    softmax attention, which cancels in the normalisation) from turning
    round-off into a large ratio; below it the check is effectively absolute.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(loss, arrays, grads, rng, n_samples=100, h=1e-4):
    """Compare ``grads`` with central differences of ``loss()`` at sampled entries.

    ``arrays`` and ``grads`` are dicts of same-shaped arrays; ``loss`` must read
    ``arrays`` in place. Entries are sampled uniformly over all arrays.
    Returns the worst ``(relative_error, name, index)``.
    """
    names = list(arrays)
    sizes = np.array([arrays[n].size for n in names])
    picks = rng.choice(sizes.sum(), size=min(n_samples, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = (0.0, None, None)
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[k]
        idx = np.unravel_index(flat - offsets[k], arrays[name].shape)
        p = arrays[name]
        old = p[idx]
        p[idx] = old + h
        lp = loss()
        p[idx] = old - h
        lm = loss()
        p[idx] = old
        err = relative_error(grads[name][idx], (lp - lm) / (2 * h))
        if err > worst[0]:
            worst = (err, name, idx)
    return worst
