import numpy as np
import pytest

from etvae.data import CLASSES, render_galaxy, sample_spec

S = 64


def gaussian_blobs(rng, size=S, n_blobs=3):
    """Smooth test image: a few Gaussian blobs inside the central disc."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size] - c
    img = np.zeros((size, size))
    for _ in range(n_blobs):
        r = rng.uniform(0, size * 0.3)
        a = rng.uniform(0, 2 * np.pi)
        sigma = rng.uniform(size * 0.06, size * 0.12)
        img += rng.uniform(0.3, 1.0) * np.exp(-((xx - r * np.cos(a)) ** 2 + (yy - r * np.sin(a)) ** 2) / (2 * sigma**2))
    return img / img.max()


@pytest.fixture(scope="session")
def blob_corpus():
    rng = np.random.default_rng(123)
    return np.stack([gaussian_blobs(rng) for _ in range(20)])[:, None]


@pytest.fixture(scope="session")
def galaxy_corpus():
    """50 noise-free synthetic galaxies, classes in rotation."""
    rng = np.random.default_rng(2024)
    imgs = [render_galaxy(sample_spec(CLASSES[i % 3], rng, noise_sigma=0.0), S) for i in range(50)]
    return np.stack(imgs)[:, None]


# -- acceptance summary: one PASS/FAIL line per criterion -----------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number = int(name.split("_")[2])
        measured = dict(report.user_properties).get("measured", "")
        status = "PASS" if report.outcome == "passed" else "FAIL"
        if report.outcome != "passed" and not measured:
            measured = f"{report.when} {report.outcome}"
        _CRITERIA[number] = f"criterion {number}: {status}  {measured}"


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
