import numpy as np
import pytest

from segqa.dataset import (attach_labels, build_label_table, read_confusions, read_sources,
                           records_from_sources, split_manifest)
from segqa.model import FeatureStore, ModelConfig
from segqa.synthetic import make_synthetic_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cfg():
    return ModelConfig(d_sem=32, d_seg=16, d_fused=64, d_hidden=32, heads=4)


def load_corpus(info, split=(0.8, 0.2), seed=0):
    recs = records_from_sources(read_sources(info["sources"]), 1024, info["feature_refs"])
    man = split_manifest(recs, split, seed=seed)
    man = attach_labels(man, build_label_table(man, read_confusions(info["confusions"])))
    return man, FeatureStore(info["feature_root"])


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """32 patches (2 sources of 4096^2), 3 methods."""
    d = tmp_path_factory.mktemp("corpus")
    info = make_synthetic_corpus(d, n_sources=2, methods=["m1", "m2", "m3"], seed=7)
    return info


@pytest.fixture
def corpus(corpus_dir):
    return load_corpus(corpus_dir)


ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(n, title) -> context manager."""
    import contextlib
    import time

    @contextlib.contextmanager
    def run(n, title):
        t0 = time.perf_counter()
        ok = False
        detail = {}
        try:
            yield detail
            ok = True
        finally:
            extra = ", ".join(f"{k}={v}" for k, v in detail.items())
            line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({time.perf_counter() - t0:.2f}s" \
                   + (f"; {extra})" if extra else ")")
            ACCEPTANCE.append((n, line))
            print(line)

    return run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
