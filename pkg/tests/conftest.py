import os

# single-threaded BLAS keeps float reductions in a fixed order
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import pytest  # noqa: E402

from fidqa.corpus import Passage  # noqa: E402


def make_passages(texts, prefix="p", titles=None):
    titles = titles or [""] * len(texts)
    return [Passage(f"{prefix}{i + 1}", f"d{i + 1}", t, x, len(x.split())) for i, (t, x) in enumerate(zip(titles, texts))]


@pytest.fixture
def hand_corpus():
    return make_passages(["cat sat mat", "dog sat log", "cat cat hat"])


# acceptance verdicts, printed as one line per criterion at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
