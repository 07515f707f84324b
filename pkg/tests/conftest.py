import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sparsedecode.kv_store import CacheConfig, PagedKvCache  # noqa: E402

_ACCEPTANCE: list[tuple[int, str, str, str]] = []


def make_cache(rng, seqs, H, D, page_size=16, width=4, scale=1.0):
    """Cache filled with standard normal rows; returns (cache, {seq: (K, V)}) with K/V as stored."""
    cache = PagedKvCache(CacheConfig(H, D, page_size, width))
    raw = {}
    for s, n in seqs.items():
        K = rng.standard_normal((n, H, D)) * scale
        V = rng.standard_normal((n, H, D)) * scale
        cache.append_tokens(s, K, V)
        raw[s] = (K.astype(cache.config.dtype).astype(np.float64),
                  V.astype(cache.config.dtype).astype(np.float64))
    return cache, raw


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    marker = props.get("acceptance")
    if marker:
        n, title = marker
        _ACCEPTANCE.append((n, title, report.outcome, props.get("detail", "")))


def pytest_runtest_setup(item):
    m = item.get_closest_marker("acceptance")
    if m:
        item.user_properties.append(("acceptance", (m.kwargs["criterion"], m.kwargs["title"])))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, outcome, detail in sorted(_ACCEPTANCE):
        tag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{tag}] AC{n}: {title}" + (f" ({detail})" if detail else ""))
