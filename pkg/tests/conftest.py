import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_probs(rng, c, h, w):
    """Random (C, H, W) probability map, strictly inside the simplex."""
    return rng.dirichlet(np.ones(c), size=(h, w)).transpose(2, 0, 1).copy()


def blocky_image(rng, h, w, n_rects=3, noise=4.0):
    """Piecewise-constant RGB image with a little pixel noise."""
    img = np.full((h, w, 3), rng.integers(0, 256, 3), dtype=np.float64)
    for _ in range(n_rects):
        r0, c0 = rng.integers(0, h - 1), rng.integers(0, w - 1)
        r1, c1 = rng.integers(r0 + 1, h + 1), rng.integers(c0 + 1, w + 1)
        img[r0:r1, c0:c1] = rng.integers(0, 256, 3)
    return np.clip(img + rng.normal(0, noise, img.shape), 0, 255).astype(np.uint8)


def tree_digest(root):
    """SHA-256 over every file under ``root``: relative path, then bytes."""
    import hashlib
    from pathlib import Path

    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


ACCEPTANCE_LINES = {}


def record_acceptance(number, ok, detail, seconds):
    """Remember one criterion's outcome for the end-of-run summary."""
    status = "PASS" if ok else "FAIL"
    line = f"criterion {number}: {status}  {detail}  ({seconds:.1f} s)"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
