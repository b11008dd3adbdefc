"""Iterated H2 upper bounds as rotated cones, plus the step certificate.

The squared H2 norm of a weighted path integrates |a|^2 / |D|^2 over the
band, with a the colored numerator.  |D|^2 is not concave in the controller
coefficients, but around the previous iterate's denominator P the affine
substitution

    s(rho) = 2 Re(conj(P) D(rho)) - |P|^2  =  |D|^2 - |D - P|^2

never exceeds |D|^2, so a slack t with ||a(rho)||^2 <= t s(rho) dominates
the true per-frequency value and the quadrature sum of t is a certified
upper bound.  It touches the truth exactly at D = P, which is what makes
the fixed point of the iteration meaningful.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from loopsynth.closed_loop import PathId
from loopsynth.cones import ConeGroup
from loopsynth.factorization import (
    ControllerFrd,
    ControllerParameterization,
    ControllerStructure,
    PlantFactorization,
)
from loopsynth.paths import single_loop
from loopsynth.policy import NumericPolicy, default_policy

__all__ = [
    "H2TermSpec",
    "H2Assembly",
    "H2Certificate",
    "quadrature_weights",
    "assemble_h2_term",
    "assemble_h2",
    "h2_bound",
    "h2_constraint",
    "StabilityStepReport",
    "verify_stability_step",
]


@dataclasses.dataclass(frozen=True)
class H2TermSpec:
    """One averaged squared-norm term: q * (1/l) sum_i ||H_i . spectrum||_2^2.

    ``spectrum`` is the coloring filter sampled on the grid (scalar or (F,),
    complex allowed); only its modulus matters since the term is a norm.
    ``loop`` names the geometry for multi-loop problems.
    """

    path: PathId | str
    q: float = 1.0
    spectrum: object = None
    label: str = ""
    loop: str = ""

    def __post_init__(self):
        if not np.isfinite(self.q) or self.q < 0.0:
            raise ValueError(f"weight q must be a nonnegative real, got {self.q}")
        if self.spectrum is not None and not np.all(np.isfinite(np.asarray(self.spectrum))):
            raise ValueError(f"spectrum for {self.path} is unbounded on the grid")

    def name(self) -> str:
        if self.label:
            return self.label
        if self.loop:
            return f"{self.loop}:{self.path}"
        return str(self.path)


def quadrature_weights(omega: np.ndarray) -> np.ndarray:
    """Trapezoid weights over the positive band, scaled for the H2 integral.

    The norm definition integrates over the full circle with a 1/(2 pi)
    factor; conjugate symmetry of real-coefficient responses doubles the
    positive-frequency content, leaving trapezoid / pi.
    """
    omega = np.asarray(omega, dtype=float)
    if omega.ndim != 1 or omega.size < 2:
        raise ValueError("quadrature needs a 1-d grid with at least two points")
    if np.any(np.diff(omega) <= 0):
        raise ValueError("grid must be strictly increasing")
    w = np.empty_like(omega)
    w[0] = (omega[1] - omega[0]) / 2.0
    w[-1] = (omega[-1] - omega[-2]) / 2.0
    w[1:-1] = (omega[2:] - omega[:-2]) / 2.0
    return w / np.pi


@dataclasses.dataclass(frozen=True)
class H2Certificate:
    """Solved slacks for one term: the bound and what it was linearized at."""

    term: H2TermSpec
    t: np.ndarray  # (l, F) slack values
    quad: np.ndarray  # (F,) quadrature weights
    bound: float
    p_prev: np.ndarray  # (l, F) linearization denominators


@dataclasses.dataclass(frozen=True)
class H2Assembly:
    """Rotated cones for one term plus the linear functional they bound.

    The slacks live at ``t_cols`` in the enclosing program's variable
    vector; ``t_weights`` are quad * q / l, so the term's contribution to
    any objective or budget is t_weights @ x[t_cols].
    """

    term: H2TermSpec
    group: ConeGroup
    t_cols: np.ndarray
    t_weights: np.ndarray
    quad: np.ndarray
    p_prev: np.ndarray

    def bound_value(self, x: np.ndarray) -> float:
        return float(self.t_weights @ np.asarray(x)[self.t_cols])

    def certificate(self, x: np.ndarray) -> H2Certificate:
        l, nf = self.p_prev.shape
        t = np.asarray(x)[self.t_cols].reshape(l, nf)
        return H2Certificate(
            term=self.term,
            t=t,
            quad=self.quad,
            bound=self.bound_value(x),
            p_prev=self.p_prev,
        )


def assemble_h2_term(term: H2TermSpec, geometry, p_prev: np.ndarray,
                     first_col: int,
                     policy: NumericPolicy | None = None) -> H2Assembly:
    """Rotated-cone rows ||a(rho)||^2 <= t * s(rho) for every (i, w).

    ``p_prev`` holds the previous iterate's denominators; the affine
    minorant s = 2 Re(conj(p_prev) D(rho)) - |p_prev|^2 replaces |D|^2.
    Slack columns start at ``first_col`` and run measurement-major.
    """
    p_prev = np.asarray(p_prev, dtype=complex)
    l = geometry.measurements
    nf = len(geometry.grid)
    if p_prev.shape != (l, nf):
        raise ValueError(f"p_prev must be ({l}, {nf}), got {p_prev.shape}")
    if np.min(np.real(p_prev)) <= 0.0:
        raise ValueError(
            "invalid linearization point: the previous denominator must keep "
            f"a positive real part, min Re = {np.min(np.real(p_prev)):.3e}"
        )
    path = geometry.numerator(term.path)
    if term.spectrum is not None:
        path = path.weighted(term.spectrum)
    u = path.u_coeff * path.v_norm()[:, :, None, None]
    mu, p = u.shape[2], u.shape[3]
    d_coeff = geometry.denominator().coeff

    n = l * nf
    a = np.zeros((n, 2 + 2 * mu, p + 1))
    a[:, 0, p] = 1.0  # the slack t
    a[:, 1, :p] = (2.0 * np.real(np.conj(p_prev)[:, :, None] * d_coeff)).reshape(n, p)
    a[:, 2 : 2 + mu, :p] = np.real(u).reshape(n, mu, p)
    a[:, 2 + mu :, :p] = np.imag(u).reshape(n, mu, p)
    b = np.zeros((n, 2 + 2 * mu))
    b[:, 1] = -(np.abs(p_prev) ** 2).ravel()
    t_cols = first_col + np.arange(n, dtype=np.intp)
    cols = np.concatenate(
        [np.broadcast_to(np.arange(p, dtype=np.intp), (n, p)), t_cols[:, None]], axis=1
    )
    freqs = geometry.grid.freqs_hz
    labels = tuple(
        f"{term.name()} i={i} f={freqs[k]:.6g}Hz"
        for i in range(l)
        for k in range(nf)
    )
    quad = quadrature_weights(geometry.grid.omega)
    t_weights = np.broadcast_to(quad[None, :] * (term.q / l), (l, nf)).ravel()
    return H2Assembly(
        term=term,
        group=ConeGroup("rsoc", a, b, cols, labels),
        t_cols=t_cols,
        t_weights=t_weights.copy(),
        quad=quad,
        p_prev=p_prev,
    )


def _as_frd(controller, omega: np.ndarray) -> ControllerFrd:
    if isinstance(controller, ControllerParameterization):
        return controller.evaluate(omega)
    return controller


def assemble_h2(term: H2TermSpec, pf: PlantFactorization, prev,
                structure: ControllerStructure,
                policy: NumericPolicy | None = None,
                first_col: int | None = None) -> H2Assembly:
    """Assemble one term against a plant, linearized at a previous controller."""
    geometry = single_loop(pf, structure)
    p_prev = pf.denominators(_as_frd(prev, pf.grid.omega))
    if first_col is None:
        first_col = geometry.rho_dim
    return assemble_h2_term(term, geometry, p_prev, first_col, policy)


def h2_bound(certificate: H2Certificate) -> float:
    """Recompute the quadrature sum from the certificate's own fields."""
    l = certificate.t.shape[0]
    return float(certificate.term.q / l * np.sum(certificate.quad[None, :] * certificate.t))


def h2_constraint(assemblies, eta: float) -> ConeGroup:
    """One nonnegative row budgeting the summed bound of several terms.

    ``assemblies`` may be a single H2Assembly or a list sharing one eta,
    matching budgets that sum a quantity over several sources.
    """
    if eta <= 0.0 or not np.isfinite(eta):
        raise ValueError(f"bound eta must be a positive real, got {eta}")
    if isinstance(assemblies, H2Assembly):
        assemblies = [assemblies]
    if not assemblies:
        raise ValueError("no terms to budget")
    cols = np.concatenate([asm.t_cols for asm in assemblies])
    weights = np.concatenate([asm.t_weights for asm in assemblies])
    names = "+".join(asm.term.name() for asm in assemblies)
    return ConeGroup(
        "nonneg",
        -weights[None, None, :],
        np.array([[eta]]),
        cols[None, :],
        labels=(f"budget {names} <= {eta:g}",),
    )


@dataclasses.dataclass(frozen=True)
class StabilityStepReport:
    """Theorem-style step check between consecutive iterates.

    ``cross_positive``: Re(conj(P_prev) P_next) > 0 at every (i, w).
    ``y_overlap``: Re(conj(Y_prev) Y_next) > |Y_prev|^2 / 2 pointwise, the
    scalar form of the denominator-factor overlap condition.
    ``same_structure``: the iterates share the fixed boundary poles; known
    only when both carry a structure, else judged by matching shapes.
    """

    ok: bool
    cross_positive: bool
    cross_min: float
    y_overlap: bool
    y_overlap_min: float
    same_structure: bool


def verify_stability_step(pf: PlantFactorization, prev, next) -> StabilityStepReport:
    """Check that stepping prev -> next preserves the stability argument."""
    omega = pf.grid.omega
    prev_frd = _as_frd(prev, omega)
    next_frd = _as_frd(next, omega)
    p_prev = pf.denominators(prev_frd)
    p_next = pf.denominators(next_frd)
    cross = np.real(np.conj(p_prev) * p_next)
    cross_min = float(np.min(cross))
    overlap = np.real(np.conj(prev_frd.y) * next_frd.y) - 0.5 * np.abs(prev_frd.y) ** 2
    overlap_min = float(np.min(overlap))
    if isinstance(prev, ControllerParameterization) and isinstance(
        next, ControllerParameterization
    ):
        same = prev.structure == next.structure
    else:
        same = prev_frd.x.shape == next_frd.x.shape
    return StabilityStepReport(
        ok=cross_min > 0.0 and overlap_min > 0.0 and same,
        cross_positive=cross_min > 0.0,
        cross_min=cross_min,
        y_overlap=overlap_min > 0.0,
        y_overlap_min=overlap_min,
        same_structure=same,
    )
