"""Shared fixtures plus the acceptance-criteria summary.

Tests marked ``@pytest.mark.acceptance("<nn> <label>")`` feed a per-criterion
PASS/FAIL digest printed after the run.  A criterion with several tests passes
only if none of them fail; strict xfails document contract conflicts and show
up as such instead of being folded silently into PASS.
"""

from __future__ import annotations

import numpy as np
import pytest

from vesselseg.volume import BinaryVolume

_STATUS: dict[str, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    bucket = _STATUS.setdefault(marker.args[0], [])
    if rep.when == "setup" and (rep.failed or rep.skipped):
        bucket.append("FAIL" if rep.failed else "SKIP")
    elif rep.when == "call":
        if hasattr(rep, "wasxfail") and rep.skipped:
            bucket.append("XFAIL")
        elif rep.passed:
            bucket.append("PASS")
        else:
            bucket.append("FAIL")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _STATUS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_STATUS):
        marks = _STATUS[label]
        n_xfail = sum(1 for s in marks if s == "XFAIL")
        if any(s == "FAIL" for s in marks):
            verdict = "FAIL"
        elif all(s in ("XFAIL", "SKIP") for s in marks):
            verdict = "XFAIL (documented contract conflict)"
        elif n_xfail:
            verdict = f"PASS ({n_xfail} documented contract conflict xfail)"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {label}: {verdict}")


# ---------------------------------------------------------------------------
# geometry helpers shared between centerline/morphometry/acceptance tests
# ---------------------------------------------------------------------------


def make_cylinder(
    dims: tuple[int, int, int],
    radius: float,
    axis: int = 0,
    center: tuple[float, float] | None = None,
    spacing=(1.0, 1.0, 1.0),
) -> tuple[BinaryVolume, np.ndarray]:
    """Solid straight tube spanning the volume along one axis.

    Returns (mask, axis voxel coordinates) with the axis centered on integer
    voxels so thinning has an unambiguous medial line.
    """
    other = [a for a in range(3) if a != axis]
    if center is None:
        center = (dims[other[0]] // 2, dims[other[1]] // 2)
    coords = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    d2 = (coords[other[0]] - center[0]) ** 2 + (coords[other[1]] - center[1]) ** 2
    mask = d2 <= radius * radius
    pts = np.zeros((dims[axis], 3), dtype=int)
    pts[:, axis] = np.arange(dims[axis])
    pts[:, other[0]] = center[0]
    pts[:, other[1]] = center[1]
    return BinaryVolume(mask, spacing), pts


def mask_from_points(points, dims) -> BinaryVolume:
    """Binary volume with exactly the given integer voxels set."""
    vox = np.zeros(dims, dtype=bool)
    for p in points:
        vox[tuple(p)] = True
    return BinaryVolume(vox)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_max_rel_err(spec, params, x, y, per_tensor=4, h=1e-5, seed=123):
    """Worst relative error between backprop and central differences.

    Requires dropout_rate 0 (so train-mode caches match the eval-mode loss
    surface) and a parameter point whose mask is stable under +-h; callers
    arrange that by biasing the output layer away from the 0.5 threshold.
    """
    from vesselseg.net.loss import loss_masked_ce, masked_ce_logit_grad
    from vesselseg.net.model import backward, forward

    assert spec.dropout_rate == 0.0

    def loss_at():
        probs, _ = forward(spec, params, x, mode="eval")
        return loss_masked_ce(probs, y)[0]

    probs, caches = forward(spec, params, x, mode="train", rng=np.random.default_rng(0))
    _, mask = loss_masked_ce(probs, y)
    grads = backward(spec, params, caches, masked_ce_logit_grad(probs, y, mask))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_at()
            flat[i] = orig - h
            lm = loss_at()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            analytic = grads[name].reshape(-1)[i]
            scale = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst
