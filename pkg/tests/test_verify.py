import numpy as np
import pytest

from sama import verify
from sama.autodiff import grad_check


def test_full_report_passes_and_lists_checks():
    results, table = verify.run_checks()
    assert len(results) >= 12
    failed = [(c.name, c.detail) for c in results if not c.passed]
    assert not failed
    report = verify.format_report(results, table)
    assert all(c.name in report for c in results)
    assert {row["op"] for row in table} == set(verify.OP_CASES)


def test_fault_hook_is_detected_and_cleared():
    verify.FAULTS.add(verify.QUAD_FAULT)
    try:
        (check,), _ = verify.run_checks(["dual_form_equivalence"])
    finally:
        verify.FAULTS.clear()
    assert not check.passed
    (check,), _ = verify.run_checks(["dual_form_equivalence"])
    assert check.passed


def test_crashing_check_is_reported(monkeypatch):
    def boom():
        raise RuntimeError("kaput")

    monkeypatch.setitem(verify.NAMED_CHECKS, "boom", boom)
    (check,), _ = verify.run_checks(["boom"])
    assert not check.passed and "kaput" in check.detail


@pytest.mark.parametrize("name", ["scan_chunked", "ssi_scan", "msm_scan_linear", "attention"])
def test_registered_case_passes(name):
    rng = np.random.default_rng(3)
    f, point = verify.OP_CASES[name](rng)
    assert grad_check(f, point).passed


def test_random_pose_pairs_are_independent():
    rng = np.random.default_rng(0)
    pred, gt = verify.random_pose_pair(rng)
    assert pred.shape == gt.shape == (4, 17, 3)
    assert abs(np.corrcoef(pred.ravel(), gt.ravel())[0, 1]) < 0.2
