"""Balanced order reduction of synthesized compensators.

The coefficient form that synthesis returns can carry more states than the
response needs, so the compensator is realized in state space, its Hankel
singular values are computed from the two gramians, and the balanced
realization is truncated.  The a-priori bound 2 * sum of the discarded
values is checked against the measured response error on every call.

Integrators never pass through reduction directly: a compensator with a
simple pole at z = 1 is additively split as c / (z - 1) plus a stable
remainder, only the remainder is balanced and truncated, and the boundary
term is reattached as one extra state afterwards.  The split is exact, so
the reduction error of the whole compensator equals that of the remainder.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib

import numpy as np

from loopsynth import linalg
from loopsynth.policy import NumericPolicy, default_policy

__all__ = [
    "RealizationError",
    "StateSpace",
    "ReductionReport",
    "realize",
    "hankel_values",
    "balanced_truncate",
    "split_boundary_pole",
    "reduce_compensator",
    "save_state_space",
    "load_state_space",
]


class RealizationError(ValueError):
    """The coefficient data does not describe a proper rational function."""


@dataclasses.dataclass(frozen=True)
class StateSpace:
    """Real discrete-time state-space model x+ = Ax + Bu, y = Cx + Du."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.atleast_2d(np.asarray(self.b, dtype=float))
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        d = np.atleast_2d(np.asarray(self.d, dtype=float))
        n = a.shape[0]
        if a.shape != (n, n):
            raise ValueError("A must be square")
        if b.shape[0] != n or c.shape[1] != n:
            raise ValueError("B and C must share the state dimension of A")
        if d.shape != (c.shape[0], b.shape[1]):
            raise ValueError("D must be (outputs, inputs)")
        for mat in (a, b, c, d):
            if not np.all(np.isfinite(mat)):
                raise ValueError("state-space matrices must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", d)

    @property
    def order(self) -> int:
        return self.a.shape[0]

    def response(self, omega: np.ndarray) -> np.ndarray:
        """Samples C (zI - A)^{-1} B + D on z = exp(1j*omega), shape (F, p, m)."""
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        out = np.empty((len(omega), self.c.shape[0], self.b.shape[1]), dtype=complex)
        eye = np.eye(self.order)
        for k, w in enumerate(omega):
            z = np.exp(1j * w)
            if self.order:
                out[k] = self.c @ np.linalg.solve(z * eye - self.a, self.b) + self.d
            else:
                out[k] = self.d
        return out

    def dc_gain(self) -> np.ndarray:
        return self.response(np.array([0.0]))[0].real

    def spectral_radius(self) -> float:
        if not self.order:
            return 0.0
        return float(np.max(np.abs(linalg.eigenvalues(self.a))))


@dataclasses.dataclass(frozen=True)
class ReductionReport:
    """Hankel values, the kept order, and the two error numbers.

    ``error_bound`` is the a-priori twice-the-tail bound; ``grid_error`` is
    the measured peak response deviation.  Construction fails when the
    measurement exceeds the bound, because that means the arithmetic broke.
    """

    hankel: tuple[float, ...]
    kept_order: int
    error_bound: float
    grid_error: float

    def __post_init__(self):
        object.__setattr__(self, "hankel", tuple(float(v) for v in self.hankel))
        scale = max(self.hankel[0] if self.hankel else 0.0, 1.0)
        if self.grid_error > self.error_bound * (1.0 + 1e-6) + 1e-12 * scale:
            raise ArithmeticError(
                f"measured error {self.grid_error:.3e} exceeds the bound "
                f"{self.error_bound:.3e}"
            )


def _strip_leading(coeffs: np.ndarray, rel: float) -> np.ndarray:
    scale = float(np.max(np.abs(coeffs))) if coeffs.size else 0.0
    keep = np.abs(coeffs) > rel * scale
    if not np.any(keep):
        return coeffs[:0]
    return coeffs[int(np.argmax(keep)):]


def realize(num, den, policy: NumericPolicy | None = None) -> StateSpace:
    """Controllable canonical realization of num(z)/den(z), descending powers."""
    pol = policy or default_policy()
    num = np.atleast_1d(np.asarray(num, dtype=float))
    den = np.atleast_1d(np.asarray(den, dtype=float))
    den = _strip_leading(den, pol.coeff_zero_rel)
    num = _strip_leading(num, pol.coeff_zero_rel)
    if den.size == 0:
        raise RealizationError("denominator is identically zero")
    if num.size > den.size:
        raise RealizationError(
            f"improper transfer function: numerator degree {num.size - 1} "
            f"exceeds denominator degree {den.size - 1}"
        )
    den = den / den[0]
    n = den.size - 1
    full = np.zeros(n + 1)
    if num.size:
        full[n + 1 - num.size:] = num
    d = full[0]
    c = full[1:] - d * den[1:]
    a = np.zeros((n, n))
    if n:
        a[0, :] = -den[1:]
        a[1:, :-1] = np.eye(n - 1)
    b = np.zeros((n, 1))
    if n:
        b[0, 0] = 1.0
    return StateSpace(a, b, c.reshape(1, n), np.array([[d]]))


def _gramians(ss: StateSpace, pol: NumericPolicy) -> tuple[np.ndarray, np.ndarray]:
    radius = ss.spectral_radius()
    if radius >= 1.0 - pol.pole_margin:
        raise ValueError(
            f"spectral radius {radius:.9f} is not inside the unit circle; "
            "split boundary poles out before reduction"
        )
    wc = linalg.solve_discrete_lyapunov(ss.a, ss.b @ ss.b.T, pol)
    wo = linalg.solve_discrete_lyapunov(ss.a.T, ss.c.T @ ss.c, pol)
    return wc, wo


def _psd_factor(w: np.ndarray) -> np.ndarray:
    # symmetric square root with clipped spectrum; gramians of non-minimal
    # realizations are only semidefinite, so Cholesky is not an option
    vals, vecs = np.linalg.eigh(0.5 * (w + w.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))[None, :]


def hankel_values(ss: StateSpace, policy: NumericPolicy | None = None) -> np.ndarray:
    """Hankel singular values, descending; empty for a static system."""
    pol = policy or default_policy()
    if ss.order == 0:
        return np.zeros(0)
    wc, wo = _gramians(ss, pol)
    s = linalg.svd(_psd_factor(wo).T @ _psd_factor(wc)).s
    return np.sort(s)[::-1]


def _auto_order(hsv: np.ndarray, dc: float, pol: NumericPolicy) -> int:
    scale = max(abs(dc), float(hsv[0]) if hsv.size else 0.0)
    if scale == 0.0:
        return 0
    tail = 2.0 * np.cumsum(hsv[::-1])[::-1]  # tail[r] = 2 sum_{k >= r} hsv_k
    keep = np.nonzero(tail > pol.reduction_auto_rel * scale)[0]
    return int(keep[-1]) + 1 if keep.size else 0


def balanced_truncate(
    ss: StateSpace,
    r: int | None = None,
    omega: np.ndarray | None = None,
    policy: NumericPolicy | None = None,
) -> tuple[StateSpace, ReductionReport]:
    """Square-root balanced truncation to ``r`` states.

    ``r = None`` picks the smallest order whose a-priori error bound stays
    under ``reduction_auto_rel`` relative to the DC gain.  ``omega`` is the
    grid for the measured error, ten points per state by default.
    """
    pol = policy or default_policy()
    if ss.order == 0:
        report = ReductionReport(hankel=(), kept_order=0, error_bound=0.0, grid_error=0.0)
        return ss, report
    wc, wo = _gramians(ss, pol)
    svd = linalg.svd(_psd_factor(wo).T @ _psd_factor(wc))
    hsv = svd.s
    if r is None:
        r = _auto_order(hsv, float(np.max(np.abs(ss.dc_gain()))), pol)
    if not 0 <= r <= ss.order:
        raise ValueError(f"kept order {r} outside [0, {ss.order}]")
    if omega is None:
        omega = np.linspace(0.0, np.pi, max(10 * ss.order, 64))

    if r == ss.order:
        reduced = ss
    elif r == 0:
        reduced = StateSpace(np.zeros((0, 0)), np.zeros((0, ss.b.shape[1])),
                             np.zeros((ss.c.shape[0], 0)), ss.d)
    else:
        scale = np.sqrt(hsv[:r])
        t = _psd_factor(wc) @ svd.vh[:r].T / scale[None, :]
        ti = (svd.u[:, :r] / scale[None, :]).T @ _psd_factor(wo).T
        reduced = StateSpace(ti @ ss.a @ t, ti @ ss.b, ss.c @ t, ss.d)

    err = ss.response(omega) - reduced.response(omega)
    grid_error = float(np.max(np.linalg.norm(err, ord=2, axis=(1, 2))))
    report = ReductionReport(
        hankel=tuple(hsv), kept_order=r,
        error_bound=2.0 * float(np.sum(hsv[r:])), grid_error=grid_error,
    )
    return reduced, report


def split_boundary_pole(num, den, pole: float = 1.0,
                        policy: NumericPolicy | None = None):
    """Split num/den = c / (z - pole) + remainder, all coefficients descending.

    The pole must be a simple root of the denominator.  Returns
    (c, num_rem, den_rem) with the remainder proper and free of the pole.
    """
    pol = policy or default_policy()
    num = np.atleast_1d(np.asarray(num, dtype=float))
    den = np.atleast_1d(np.asarray(den, dtype=float))
    scale = float(np.max(np.abs(den)))
    if abs(np.polyval(den, pole)) > 1e-8 * scale:
        raise ValueError(f"z = {pole:g} is not a root of the denominator")
    den_rem, rem = np.polydiv(den, np.array([1.0, -pole]))
    del rem  # zero up to roundoff by the root check
    if abs(np.polyval(den_rem, pole)) < 1e-8 * float(np.max(np.abs(den_rem))):
        raise ValueError(f"z = {pole:g} is at least a double pole; only simple "
                         "boundary poles can be split")
    c = float(np.polyval(num, pole) / np.polyval(den_rem, pole))
    # num - c * den_rem vanishes at the pole, so the division is exact
    shifted = np.zeros(max(num.size, den_rem.size))
    shifted[-num.size:] = num
    shifted[-den_rem.size:] -= c * den_rem
    num_rem, _ = np.polydiv(shifted, np.array([1.0, -pole]))
    num_rem = _strip_leading(np.atleast_1d(num_rem), pol.coeff_zero_rel)
    return c, num_rem, den_rem


def reduce_compensator(num, den, r: int | None = None,
                       policy: NumericPolicy | None = None
                       ) -> tuple[StateSpace, ReductionReport]:
    """Reduce a compensator given as num/den, splitting a z = 1 pole if present.

    ``r`` counts the states of the stable part; the reattached integrator
    adds one more.  The boundary term cancels in the error, so the report's
    numbers cover the complete compensator, not just the remainder.
    """
    pol = policy or default_policy()
    den_arr = np.atleast_1d(np.asarray(den, dtype=float))
    has_integrator = abs(np.polyval(den_arr, 1.0)) <= 1e-8 * float(np.max(np.abs(den_arr)))
    if not has_integrator:
        return balanced_truncate(realize(num, den, pol), r, policy=pol)
    c, num_rem, den_rem = split_boundary_pole(num, den, 1.0, pol)
    reduced, report = balanced_truncate(realize(num_rem, den_rem, pol), r, policy=pol)
    n = reduced.order
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = reduced.a
    a[n, n] = 1.0
    b = np.vstack([reduced.b, np.ones((1, 1))])
    cc = np.hstack([reduced.c, np.array([[c]])])
    return StateSpace(a, b, cc, reduced.d), report


def save_state_space(ss: StateSpace, path) -> None:
    data = {
        "structure": "state-space",
        "order": ss.order,
        "inputs": ss.b.shape[1],
        "outputs": ss.c.shape[0],
        "a": ss.a.tolist(),
        "b": ss.b.tolist(),
        "c": ss.c.tolist(),
        "d": ss.d.tolist(),
    }
    pathlib.Path(path).write_text(json.dumps(data, indent=2) + "\n")


def load_state_space(path) -> StateSpace:
    data = json.loads(pathlib.Path(path).read_text())
    if data.get("structure") != "state-space":
        raise ValueError(f"{path}: not a state-space controller file")
    n, m, p = int(data["order"]), int(data["inputs"]), int(data["outputs"])
    return StateSpace(
        np.asarray(data["a"], dtype=float).reshape(n, n),
        np.asarray(data["b"], dtype=float).reshape(n, m),
        np.asarray(data["c"], dtype=float).reshape(p, n),
        np.asarray(data["d"], dtype=float).reshape(p, m),
    )
