from __future__ import annotations

import numpy as np
import pytest

import dg3d.losses
from dg3d.gradcheck import check_op, format_report, roster_names, run_gradcheck


def test_every_operation_passes() -> None:
    results = run_gradcheck(points=3)
    assert [result.name for result in results] == roster_names()
    failed = [str(result) for result in results if not result.passed]
    assert not failed


def test_report_lists_each_operation_once() -> None:
    results = run_gradcheck(points=1)
    report = format_report(results, color=False)
    for name in roster_names():
        assert sum(line.split("max rel err")[0].strip().endswith(name) for line in report.splitlines()) == 1
    assert report.splitlines()[-1] == f"{len(results)}/{len(results)} passed"


def test_broken_adjoint_is_caught(monkeypatch: pytest.MonkeyPatch) -> None:
    assert check_op("tv2d", points=2).passed
    adjoint = dg3d.losses._tv2d_adjoint

    def flipped(x: np.ndarray, axes: tuple[int, int]) -> np.ndarray:
        return -adjoint(x, axes)

    monkeypatch.setattr(dg3d.losses, "_tv2d_adjoint", flipped)
    result = check_op("tv2d", points=2)
    assert not result.passed
    assert "FAIL" in str(result)
