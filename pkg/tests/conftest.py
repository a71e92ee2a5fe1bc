import os
import pathlib
from collections.abc import Callable, Iterator, Sequence

import numpy as np
import pytest

from mspcaps.configuration import RunConfig
from mspcaps.data import write_mspd
from mspcaps.tensor import Tensor, backward, precision

DATA_DIR = os.getenv("MSPCAPS_DATA_DIR", "").strip()


@pytest.fixture
def f64() -> Iterator[None]:
    """Run the test with float64 as the default tensor dtype."""
    with precision(np.float64):
        yield


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def data_dir() -> pathlib.Path:
    if not DATA_DIR:
        pytest.skip("MSPCAPS_DATA_DIR is not set")
    return pathlib.Path(DATA_DIR)


def _numeric_grad(fn: Callable[[], float], array: np.ndarray, h: float, picks: Sequence[int]) -> np.ndarray:
    flat = array.reshape(-1)
    out = np.zeros(len(picks))
    for n, i in enumerate(picks):
        saved = flat[i]
        flat[i] = saved + h
        plus = fn()
        flat[i] = saved - h
        minus = fn()
        flat[i] = saved
        out[n] = (plus - minus) / (2 * h)
    return out


def _gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    *,
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    max_entries: int = 0,
    seed: int = 0,
) -> float:
    """Compare backward() with central differences for every input; return the worst relative error."""
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True, dtype=np.float64) for x in inputs]
    backward(fn(*tensors))
    worst = 0.0
    pick_rng = np.random.default_rng(seed)
    for t in tensors:
        assert t.grad is not None
        picks = np.arange(t.size)
        if max_entries and t.size > max_entries:
            picks = pick_rng.choice(t.size, size=max_entries, replace=False)
        numeric = _numeric_grad(lambda: fn(*tensors).item(), t.data, h, picks)
        analytic = t.grad.reshape(-1)[picks]
        err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric) + np.abs(analytic), atol)
        worst = max(worst, float(err.max()))
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
    return worst


@pytest.fixture
def gradcheck() -> Callable[..., float]:
    return _gradcheck


SMALL_MODEL = dict(
    channels=(4, 4, 6),
    caps_dims=(3, 3, 4),
    d_mid=4,
    d_out=3,
    resolution=16,
)
"""A scaled-down architecture on 16x16 inputs; pair it with patch_size=2."""


def write_small_svhn(root: pathlib.Path, n_train: int = 12, n_test: int = 8) -> pathlib.Path:
    """Write random 16x16 SVHN-layout splits under `root/svhn/` and return `root`."""
    folder = root / "svhn"
    folder.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(11)
    for split, n in (("train", n_train), ("test", n_test)):
        images = rng.uniform(size=(n, 3, 16, 16)).astype(np.float32)
        write_mspd(folder / f"svhn_{split}.mspd", images, np.arange(n) % 10)
    return root


@pytest.fixture
def small_run(tmp_path: pathlib.Path) -> RunConfig:
    """A resolved two-epoch run of the small model on synthetic SVHN-layout data."""
    data_root = write_small_svhn(tmp_path / "data")
    return RunConfig(
        dataset="svhn",
        data_dir=str(data_root),
        patch_size=2,
        dropout_rate=0.1,
        model_overrides=dict(SMALL_MODEL),
        epochs=2,
        batch_size=4,
        lr=1e-3,
        timing=False,
        out_dir=str(tmp_path / "run"),
        init_seed=1,
        shuffle_seed=2,
        dropout_seed=3,
    ).resolve()
