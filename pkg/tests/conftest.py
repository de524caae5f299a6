import sys

import numpy as np
import pytest

from cutnmix.datasets import Split, channel_stats, encode_records


def random_split(n, K, seed, coarse=False):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8)
    labels = rng.integers(0, K, n).astype(np.int64)
    mean, std = channel_stats(images[:64])
    return Split("random", images, labels, K, mean, std,
                 coarse=rng.integers(0, 20, n).astype(np.uint8) if coarse else None)


@pytest.fixture(scope="session")
def cifar100_dir(tmp_path_factory):
    """Full-size CIFAR-100 binary files filled with random records."""
    root = tmp_path_factory.mktemp("c100") / "cifar-100-binary"
    root.mkdir()
    for name, n, seed in (("train.bin", 50_000, 1), ("test.bin", 10_000, 2)):
        s = random_split(n, 100, seed, coarse=True)
        (root / name).write_bytes(encode_records(np.stack([s.coarse, s.labels], 1), s.images))
    return root.parent


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance criteria lines at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
