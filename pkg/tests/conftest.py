from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_shape(rng, p=7, scale=20.0, center=(50.0, 50.0)):
    """A well-spread random shape with ``p`` landmarks."""
    return rng.normal(size=(p, 2)) * scale + np.asarray(center)


def random_affine(rng, max_rot=np.pi, scale=(0.5, 2.0), shear=0.3, shift=30.0):
    from mixalign.geometry import AffineTransform

    th = rng.uniform(-max_rot, max_rot)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    lin = rot @ np.diag(rng.uniform(*scale, size=2)) @ np.array([[1.0, rng.uniform(-shear, shear)], [0.0, 1.0]])
    return AffineTransform(lin, rng.uniform(-shift, shift, size=2))


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Append ``(criterion, passed, detail)``; lines are printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str):
        _ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
