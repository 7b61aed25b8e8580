"""Shared test helpers: synthetic sky maps and the acceptance summary."""

from __future__ import annotations

import numpy as np


def synthetic_sky(
    width: int = 128,
    rows: int = 32,
    sun_peak: float = 500.0,
    sun_u: float = 38.5 / 128,
    sun_v: float = 14.5 / 64,
    sigma_u: float = 0.018,
    sigma_v: float = 0.018,
) -> np.ndarray:
    """Upper-crop sky: smooth zenith-to-horizon gradient plus one Gaussian sun.

    The sun center sits on a texel center so the map's maximum equals the sun
    peak plus the local base level. u wraps; v covers [0, 0.5) over `rows`.
    """
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(rows) + 0.5) / (2 * rows)
    uu, vv = np.meshgrid(u, v)
    base = 0.25 + 0.9 * (1.0 - 2.0 * vv)
    tint = np.stack([base * 0.9, base * 1.0, base * 1.15], axis=2)
    du = np.minimum(np.abs(uu - sun_u), 1.0 - np.abs(uu - sun_u))
    blob = np.exp(-(du**2 / (2 * sigma_u**2) + (vv - sun_v) ** 2 / (2 * sigma_v**2)))
    sky = tint + (sun_peak * blob)[:, :, None] * np.array([1.0, 0.95, 0.85])
    return sky.astype(np.float32)


def shift_columns(img: np.ndarray, columns: int) -> np.ndarray:
    """Rotate an equirectangular map horizontally (sun relighting stand-in)."""
    return np.roll(img, columns, axis=1)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One verdict line per acceptance criterion at the end of the run."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = str(getattr(rep, "nodeid", ""))
            if "test_acceptance.py" in nodeid:
                lines.append((nodeid.split("::")[-1], "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, verdict in sorted(lines):
            terminalreporter.write_line(f"{verdict}: {name}")
