import math

import numpy as np
import pytest

from vidsparse.layout import LayoutSpec
from vidsparse.masks import MaskSpec

_ACCEPTANCE = {}


def naive_masked_attention(q, k, v, mask=None, scale=None):
    """Row-by-row softmax(q k^T * scale) v in float64 with plain exp/sum."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    out = np.empty((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        keys = np.arange(k.shape[0]) if mask is None else np.flatnonzero(mask[i])
        s = scale * (k[keys] @ q[i])
        e = np.exp(s - s.max())
        out[i] = (e / e.sum()) @ v[keys]
    return out


def random_layout(rng, max_seq, max_text=32):
    while True:
        t = int(rng.integers(0, max_text + 1))
        n = int(rng.integers(1, 13))
        L = int(rng.integers(1, 65))
        if t + n * L <= max_seq:
            return LayoutSpec(t, n, L)


def random_mask_spec(rng, layout):
    return MaskSpec(
        layout,
        c_s=int(rng.integers(1, layout.num_frames + 1)),
        c_t=int(rng.integers(1, min(layout.num_frames * layout.tokens_per_frame, 2 * layout.tokens_per_frame + 1) + 1)),
        include_first_frame=bool(rng.integers(2)),
        include_text=bool(rng.integers(2)),
    )


def qkv(rng, n, d, dtype=np.float64, spread=1.0):
    return tuple((spread * rng.standard_normal((n, d))).astype(dtype) for _ in range(3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    prev_title, prev_ok = _ACCEPTANCE.get(number, (title, True))
    _ACCEPTANCE[number] = (prev_title, prev_ok and report.passed)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}")
