"""Frequency-domain verification: norms, stability verdicts, margins, poles.

Everything here consumes sampled responses on a grid rather than models, so
the same checks run on measured data, synthesized closed loops, and rational
reconstructions alike.  Norm conventions for discrete time with conjugate
symmetry: the squared H2 norm is (1/pi) times the integral of the squared
Frobenius norm over positive frequencies, and the H-infinity norm is the
largest singular value over the grid.
"""

from __future__ import annotations

import csv
import dataclasses
import math

import numpy as np

from loopsynth.policy import NumericPolicy, default_policy

__all__ = [
    "hinf_norm",
    "h2_norm_sq",
    "StabilityVerdict",
    "winding_stability",
    "MarginReport",
    "margins",
    "WorstCaseMargins",
    "worst_case",
    "export_margin_csv",
    "PoleCheck",
    "pole_check",
    "cascade_characteristic",
    "dual_characteristic",
]


def hinf_norm(response: np.ndarray) -> tuple[float, int]:
    """Peak gain over the grid and the index where it occurs.

    ``response`` is (F,) scalar samples or (F, rows, cols) matrix samples;
    matrix gain is the largest singular value.
    """
    resp = np.asarray(response)
    if resp.ndim == 1:
        gains = np.abs(resp)
    elif resp.ndim == 3:
        gains = np.linalg.svd(resp, compute_uv=False)[:, 0]
    else:
        raise ValueError("response must be (F,) or (F, rows, cols)")
    idx = int(np.argmax(gains))
    return float(gains[idx]), idx


def h2_norm_sq(omega: np.ndarray, response: np.ndarray) -> float:
    """Squared H2 norm over the sampled band: (1/pi) * integral of ||H||_F^2.

    The trapezoid rule on the given positive frequencies; content outside the
    band is not represented, so compare like with like.
    """
    omega = np.asarray(omega, dtype=float)
    resp = np.asarray(response)
    if resp.ndim == 1:
        frob = np.abs(resp) ** 2
    else:
        frob = np.sum(np.abs(resp.reshape(resp.shape[0], -1)) ** 2, axis=1)
    if omega.shape != (resp.shape[0],):
        raise ValueError("omega and response lengths differ")
    return float(np.trapezoid(frob, omega) / np.pi)


@dataclasses.dataclass(frozen=True)
class StabilityVerdict:
    """Outcome of the sampled encirclement test.

    ``stable`` is None when the grid is too coarse to count windings safely.
    ``winding`` is the net number of encirclements of the origin along the
    sampled arc (full circle by conjugate symmetry).
    """

    stable: bool | None
    min_real: float
    winding: float
    reason: str


def winding_stability(
    d_samples: np.ndarray, policy: NumericPolicy | None = None
) -> StabilityVerdict:
    """Certify a denominator's samples wind zero times around the origin.

    Samples strictly in the right half plane cannot encircle the origin, which
    is the fast path the synthesis constraints are designed to hit.  Otherwise
    the phase increments are accumulated; any single step of at least
    ``winding_max_step`` makes the count unreliable and the verdict None.
    """
    policy = policy or default_policy()
    d = np.asarray(d_samples).reshape(-1)
    if d.size < 2:
        raise ValueError("need at least two samples along the arc")
    min_real = float(np.min(d.real))
    if np.any(np.abs(d) == 0.0):
        return StabilityVerdict(False, min_real, math.nan, "sample exactly at the origin")
    if min_real > 0.0:
        return StabilityVerdict(True, min_real, 0.0, "samples stay in the right half plane")
    steps = np.angle(d[1:] / d[:-1])
    worst = float(np.max(np.abs(steps)))
    total = float(np.sum(steps))
    # conjugate symmetry doubles the arc
    winding = 2.0 * total / (2.0 * np.pi)
    if worst >= policy.winding_max_step:
        return StabilityVerdict(
            None, min_real, winding,
            f"phase step {worst:.3f} rad exceeds the trustworthy limit",
        )
    stable = bool(abs(winding) < 0.5)
    reason = "winding number zero" if stable else f"winding number {winding:.2f}"
    return StabilityVerdict(stable, min_real, winding, reason)


@dataclasses.dataclass(frozen=True)
class MarginReport:
    """Classical margins of one loop transfer sampled on a grid."""

    gain_margin_db: float
    gm_freq_hz: float
    phase_margin_deg: float
    pm_freq_hz: float
    sens_peak_db: float
    sens_freq_hz: float


def _interp(x0, x1, f0, f1):
    """Root of the line through (x0, f0), (x1, f1)."""
    if f1 == f0:
        return x0
    return x0 - f0 * (x1 - x0) / (f1 - f0)


def margins(l_samples: np.ndarray, freqs_hz: np.ndarray) -> MarginReport:
    """Gain margin, phase margin, and sensitivity peak from loop samples.

    Crossings are found by linear interpolation in log magnitude and
    unwrapped phase.  Margins with no crossing in the band come back inf.
    """
    l = np.asarray(l_samples).reshape(-1)
    freqs = np.asarray(freqs_hz, dtype=float)
    if l.shape != freqs.shape:
        raise ValueError("loop samples and frequencies must align")
    mag = np.abs(l)
    if np.any(mag == 0.0):
        raise ValueError("loop gain vanishes on the grid")
    logmag = np.log10(mag)
    phase = np.unwrap(np.angle(l))

    # gain margins: phase crossings of odd multiples of pi
    gm_db = math.inf
    gm_freq = math.nan
    level = (phase + np.pi) / (2.0 * np.pi)  # integers at -180 deg equivalents
    near = np.abs(level - np.round(level)) < 1e-12
    for i in np.where(near)[0]:
        cand = -20.0 * logmag[i]
        if cand < gm_db:
            gm_db, gm_freq = float(cand), float(freqs[i])
    for i in range(level.size - 1):
        lo, hi = level[i], level[i + 1]
        for n in range(int(np.ceil(min(lo, hi))), int(np.floor(max(lo, hi))) + 1):
            if near[i] or near[i + 1]:
                continue
            f_star = _interp(freqs[i], freqs[i + 1], lo - n, hi - n)
            m_star = np.interp(f_star, freqs[i : i + 2], logmag[i : i + 2])
            cand = -20.0 * m_star
            if cand < gm_db:
                gm_db, gm_freq = float(cand), float(f_star)

    # phase margins: unit-magnitude crossings
    pm_deg = math.inf
    pm_freq = math.nan

    def consider(phi, f_star):
        nonlocal pm_deg, pm_freq
        principal = (phi + np.pi) % (2.0 * np.pi) - np.pi
        cand = math.degrees(principal + np.pi)
        if cand < pm_deg:
            pm_deg, pm_freq = float(cand), float(f_star)

    for i in np.where(logmag == 0.0)[0]:
        consider(phase[i], freqs[i])
    sign_change = np.where(logmag[:-1] * logmag[1:] < 0.0)[0]
    for i in sign_change:
        f_star = _interp(freqs[i], freqs[i + 1], logmag[i], logmag[i + 1])
        phi = np.interp(f_star, freqs[i : i + 2], phase[i : i + 2])
        consider(phi, f_star)

    sens = 1.0 / np.abs(1.0 + l)
    s_idx = int(np.argmax(sens))
    return MarginReport(
        gain_margin_db=gm_db,
        gm_freq_hz=gm_freq,
        phase_margin_deg=pm_deg,
        pm_freq_hz=pm_freq,
        sens_peak_db=float(20.0 * np.log10(sens[s_idx])),
        sens_freq_hz=float(freqs[s_idx]),
    )


@dataclasses.dataclass(frozen=True)
class WorstCaseMargins:
    """Most pessimistic margins across a set of measurements."""

    gain_margin_db: float
    gm_freq_hz: float
    gm_measurement: int
    phase_margin_deg: float
    pm_freq_hz: float
    pm_measurement: int
    sens_peak_db: float
    sens_freq_hz: float
    sens_measurement: int


def worst_case(reports: list[MarginReport]) -> WorstCaseMargins:
    if not reports:
        raise ValueError("no margin reports given")
    gm = min(range(len(reports)), key=lambda i: reports[i].gain_margin_db)
    pm = min(range(len(reports)), key=lambda i: reports[i].phase_margin_deg)
    sp = max(range(len(reports)), key=lambda i: reports[i].sens_peak_db)
    return WorstCaseMargins(
        gain_margin_db=reports[gm].gain_margin_db,
        gm_freq_hz=reports[gm].gm_freq_hz,
        gm_measurement=gm,
        phase_margin_deg=reports[pm].phase_margin_deg,
        pm_freq_hz=reports[pm].pm_freq_hz,
        pm_measurement=pm,
        sens_peak_db=reports[sp].sens_peak_db,
        sens_freq_hz=reports[sp].sens_freq_hz,
        sens_measurement=sp,
    )


def export_margin_csv(reports: list[MarginReport], out_file) -> None:
    """One row per measurement plus a worst-case row."""
    wc = worst_case(reports)
    writer = csv.writer(out_file)
    writer.writerow(
        ["measurement", "gain_margin_db", "gm_freq_hz", "phase_margin_deg",
         "pm_freq_hz", "sens_peak_db", "sens_freq_hz"]
    )
    for i, rep in enumerate(reports):
        writer.writerow(
            [i, rep.gain_margin_db, rep.gm_freq_hz, rep.phase_margin_deg,
             rep.pm_freq_hz, rep.sens_peak_db, rep.sens_freq_hz]
        )
    writer.writerow(
        ["worst", wc.gain_margin_db, wc.gm_freq_hz, wc.phase_margin_deg,
         wc.pm_freq_hz, wc.sens_peak_db, wc.sens_freq_hz]
    )


@dataclasses.dataclass(frozen=True)
class PoleCheck:
    stable: bool
    spectral_radius: float
    roots: np.ndarray


def _trim_leading(coeffs: np.ndarray, policy: NumericPolicy) -> np.ndarray:
    c = np.asarray(coeffs, dtype=complex)
    if np.all(c == 0):
        raise ValueError("zero polynomial has no roots to check")
    floor = np.max(np.abs(c)) * policy.coeff_zero_rel
    nz = np.where(np.abs(c) > floor)[0]
    return c[nz[0] :]


def pole_check(coeffs: np.ndarray, policy: NumericPolicy | None = None) -> PoleCheck:
    """Roots of a descending-coefficient polynomial against the unit circle.

    Stability demands every root inside the circle by at least
    ``pole_margin``; a root flagged on the margin is reported unstable rather
    than rounded inward.
    """
    policy = policy or default_policy()
    c = _trim_leading(coeffs, policy)
    if c.size == 1:
        return PoleCheck(True, 0.0, np.zeros(0, dtype=complex))
    roots = np.roots(c)
    radius = float(np.max(np.abs(roots))) if roots.size else 0.0
    return PoleCheck(radius < 1.0 - policy.pole_margin, radius, roots)


def cascade_characteristic(plant_num, plant_den, k_num, k_den) -> np.ndarray:
    """Closed-loop characteristic polynomial of a unity-feedback pair.

    All polynomials use descending powers.
    """
    return np.polyadd(np.polymul(plant_den, k_den), np.polymul(plant_num, k_num))


def dual_characteristic(vcm, micro, k_num_v, k_num_m, k_den) -> np.ndarray:
    """Characteristic polynomial of the parallel two-actuator loop.

    ``vcm`` and ``micro`` are (num, den) pairs; the two compensator branches
    share the denominator ``k_den``: y = G_v (a/c) e + G_m (b/c) e.
    """
    nv, dv = vcm
    nm, dm = micro
    term0 = np.polymul(np.polymul(dv, dm), k_den)
    term1 = np.polymul(np.polymul(nv, k_num_v), dm)
    term2 = np.polymul(np.polymul(nm, k_num_m), dv)
    return np.polyadd(np.polyadd(term0, term1), term2)
