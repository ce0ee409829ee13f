"""Shared test helpers: independent finite differences, golden hashing, and
one printed pass/fail line per acceptance criterion."""

from __future__ import annotations

import hashlib
import sys

import numpy as np
import torch


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end runs")


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        verdict = "PASS" if report.passed else "FAIL"
        print(f"[ACCEPTANCE] {name}: {verdict}", file=sys.stderr)


def central_diff_grad(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of scalar f() w.r.t. every element of x.

    Mutates x in place element by element; x must be float64 and f must read
    x afresh on every call.
    """
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def assert_grads_close(analytic: torch.Tensor, fd: torch.Tensor,
                       rel: float = 1e-4, label: str = "") -> None:
    scale = float(fd.abs().max()) + 1e-8
    err = float((analytic - fd).abs().max())
    assert err <= rel * scale + 1e-10, \
        f"{label} gradient mismatch: max err {err:.3e} vs scale {scale:.3e}"


def golden_hash(array, decimals: int = 6) -> str:
    """Short stable hash of an array rounded to `decimals` places."""
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    rounded = np.round(np.asarray(array, dtype=np.float64), decimals) + 0.0
    return hashlib.sha256(rounded.tobytes()).hexdigest()[:16]
