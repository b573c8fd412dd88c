import numpy as np
import pytest

from hardest.model import BoundingBox, Detection, GroundTruthBox, ImageRecord

_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    """Collects one status line per acceptance criterion for the terminal summary."""

    def log(criterion, passed, detail=""):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        _ACCEPTANCE_LINES.append(f"[{status}] criterion {criterion}: {detail}")

    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def det(x0, y0, x1, y1, cls=1, score=0.9, index=0, **kw):
    return Detection(BoundingBox(x0, y0, x1, y1), cls, score, index=index, **kw)


def gt(x0, y0, x1, y1, cls=1, crowd=False, annotation_id=None):
    return GroundTruthBox(BoundingBox(x0, y0, x1, y1), cls, crowd, annotation_id)


def image(detections=(), ground_truths=None, width=100.0, height=100.0, image_id=1):
    return ImageRecord(image_id, width, height, tuple(detections), None if ground_truths is None else tuple(ground_truths))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
