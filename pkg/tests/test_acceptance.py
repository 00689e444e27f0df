"""Acceptance criteria, one experiment each, at the registered default configuration.

Every test prints one ``PASS``/``FAIL`` line and the summary hook in
``conftest.py`` repeats all of them at the end of the session.
"""

import io

import pytest

from fracpmp.cli import EXIT_PASS, run_experiment
from fracpmp.experiments import resolve

CRITERIA = [
    (1, "fbm-covariance"),
    (2, "h-half-degeneration"),
    (3, "frac-calculus"),
    (4, "operator-duality"),
    (5, "sde-solver"),
    (6, "variational"),
    (7, "adjoint-gradient"),
    (8, "lq-classical-riccati"),
    (9, "adjoint-q-malliavin"),
    (10, "fbm-mp-residual"),
    (11, "rho-divergence"),
    (12, "determinism"),
]

RESULTS = {}


@pytest.mark.parametrize("number, name", CRITERIA, ids=[f"{k:02d}-{e}" for k, e in CRITERIA])
def test_criterion(number, name, tmp_path):
    cfg = resolve(name, {"out": str(tmp_path)})
    report = io.StringIO()
    status = run_experiment(cfg, stream=report)
    lines = report.getvalue().splitlines()
    verdict = "PASS" if status == EXIT_PASS else "FAIL"
    detail = "; ".join(line for line in lines[1:] if not line.startswith("#"))
    RESULTS[number] = f"{verdict} criterion {number:2d} {name}: {detail}"
    print(RESULTS[number])
    assert status == EXIT_PASS, "\n".join(lines)
