"""H-infinity constraint assembly and gamma minimization over response data.

Every closed-loop path factors as u(rho) v^T / D(rho) with u affine in the
stacked controller coefficients and v fixed data, so bounding the weighted
path gain below gamma at every measurement and grid point is exactly one
second-order cone per (i, w):

    gamma^{-1} ||v|| ||W u(rho)|| + eps <= Re(D_i(rho)).

The margin eps turns the strict inequality into solver-friendly form, and
Re(D) > 0 across the grid doubles as the non-encirclement argument that makes
a feasible point a stabilizing controller, not just a norm bound.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from loopsynth.closed_loop import PathId
from loopsynth.cones import ConeGroup, ConeProgram, Solution, feasibility
from loopsynth.factorization import (
    ControllerParameterization,
    ControllerStructure,
    PlantFactorization,
)
from loopsynth.paths import LoopGeometry, single_loop
from loopsynth.policy import NumericPolicy, default_policy

__all__ = [
    "HinfConstraintSpec",
    "InfeasibleError",
    "hinf_group",
    "assemble_hinf",
    "synthesize_hinf",
    "BisectionResult",
    "minimize_hinf_bisection",
]


@dataclasses.dataclass(frozen=True)
class HinfConstraintSpec:
    """One ||W H||_inf < gamma bound on a closed-loop path.

    ``weight`` takes any form the path weighting accepts: a scalar, a
    per-frequency gain (F,), a constant matrix (o, rows) or a per-frequency
    stack (F, o, rows); complex entries are fine.  ``loop`` names the
    geometry the path lives in when a problem spans several loops; the
    single-loop entry points ignore it.
    """

    path: PathId | str
    gamma: float = 1.0
    weight: object = None
    label: str = ""
    loop: str = ""

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma <= 0.0:
            raise ValueError(f"gamma must be a positive real, got {self.gamma}")
        if self.weight is not None and not np.all(np.isfinite(np.asarray(self.weight))):
            raise ValueError(f"weight for {self.path} is unbounded on the grid")

    def name(self) -> str:
        if self.label:
            return self.label
        if self.loop:
            return f"{self.loop}:{self.path}"
        return str(self.path)


class InfeasibleError(RuntimeError):
    """The solver certified the constraint set empty.

    ``certificate`` is the solver's labeled ray; for constraint groups built
    here the label names the most violated (spec, measurement, frequency).
    """

    def __init__(self, message: str, certificate: dict | None = None,
                 solution: Solution | None = None):
        super().__init__(message)
        self.certificate = certificate
        self.solution = solution


def hinf_group(spec, geometry, policy: NumericPolicy | None = None,
               gamma: float | None = None) -> ConeGroup:
    """Second-order cone group enforcing ``spec`` on one loop geometry.

    One cone per (measurement, grid point): row 0 carries Re(D(rho)) - eps,
    the rest the real and imaginary parts of gamma^{-1} ||v|| (W u)(rho).
    ``gamma`` overrides the spec's own bound during bisection.
    """
    pol = policy or default_policy()
    g = float(spec.gamma if gamma is None else gamma)
    if g <= 0.0:
        raise ValueError(f"gamma must be positive, got {g}")
    path = geometry.numerator(spec.path)
    if spec.weight is not None:
        path = path.weighted(spec.weight)
    u = path.u_coeff
    nmeas, nf, mu, p = u.shape
    scale = path.v_norm()[:, :, None, None] / g
    top = np.real(geometry.denominator().coeff)[:, :, None, :]
    rows = np.concatenate([top, np.real(u) * scale, np.imag(u) * scale], axis=2)
    a = rows.reshape(nmeas * nf, 1 + 2 * mu, p)
    b = np.zeros((a.shape[0], a.shape[1]))
    b[:, 0] = -pol.strict_margin
    freqs = geometry.grid.freqs_hz
    labels = tuple(
        f"{spec.name()} i={i} f={freqs[k]:.6g}Hz"
        for i in range(nmeas)
        for k in range(nf)
    )
    return ConeGroup("soc", a, b, np.arange(p), labels)


def assemble_hinf(spec: HinfConstraintSpec, pf: PlantFactorization,
                  structure: ControllerStructure,
                  policy: NumericPolicy | None = None) -> ConeGroup:
    """Assemble one spec against a plant factorization and controller shape."""
    return hinf_group(spec, single_loop(pf, structure), policy)


def _append(program: ConeProgram, group: ConeGroup) -> None:
    program.add_group(group.cone, group.a, group.b, group.cols, group.labels)


def _recheck(specs, geometry, rho: np.ndarray, pol: NumericPolicy,
             gamma: float | None = None) -> None:
    """Direct norm evaluation of a claimed-feasible point.

    The solver works on the cone formulation; this walks the original
    definition (weighted gain over |D|) and the positivity of Re(D), so a
    pass means the two agree and not merely that the solver converged.
    """
    d = geometry.denominator().evaluate(rho)
    if np.min(np.real(d)) < pol.strict_margin / 2.0:
        raise ArithmeticError(
            f"returned point leaves Re(D) at {np.min(np.real(d)):.3e}, "
            "below half the strict margin"
        )
    for spec in specs:
        path = geometry.numerator(spec.path)
        if spec.weight is not None:
            path = path.weighted(spec.weight)
        g = float(spec.gamma if gamma is None else gamma)
        ratio = path.gain(rho) / (np.abs(d) * g)
        worst = float(np.max(ratio))
        if worst > 1.0 + 10.0 * pol.cone_tol:
            raise ArithmeticError(
                f"returned point violates {spec.name()}: gain ratio {worst:.6f}"
            )


def synthesize_hinf(specs, pf: PlantFactorization, structure: ControllerStructure,
                    policy: NumericPolicy | None = None) -> ControllerParameterization:
    """Find controller coefficients meeting every spec, or certify none exist.

    The returned parameterization is re-verified by direct norm evaluation on
    the grid before it is handed back.
    """
    pol = policy or default_policy()
    specs = list(specs)
    if not specs:
        raise ValueError("no constraints to synthesize against")
    geometry = single_loop(pf, structure)
    program = ConeProgram(geometry.rho_dim)
    for spec in specs:
        _append(program, hinf_group(spec, geometry, pol))
    sol = feasibility(program, pol)
    if sol.status != "optimal":
        detail = ""
        if sol.certificate and sol.certificate.get("label"):
            detail = f" (most violated: {sol.certificate['label']})"
        raise InfeasibleError(
            f"H-infinity constraint set is {sol.status}{detail}",
            certificate=sol.certificate,
            solution=sol,
        )
    _recheck(specs, geometry, sol.x, pol)
    return ControllerParameterization.from_rho(structure, sol.x)


@dataclasses.dataclass(frozen=True)
class BisectionResult:
    """Outcome of the alternating gamma bisection.

    ``gammas`` traces the accepted bound after each closed-form update,
    starting from the caller's ceiling.  The trace is the whole claim: the
    alternation converges to a point the data cannot locally improve, not a
    certified global optimum.
    """

    gamma: float
    controller: ControllerParameterization
    gammas: tuple


def minimize_hinf_bisection(specs, pf: PlantFactorization,
                            structure: ControllerStructure, gamma_hi: float,
                            tol: float = 1e-3,
                            policy: NumericPolicy | None = None) -> BisectionResult:
    """Minimize a bound shared by every spec, alternating two easy problems.

    With gamma fixed, feasibility in rho is a cone program; with rho fixed,
    the best gamma is the closed-form grid maximum of gain / (Re(D) - eps).
    Each update can only shrink gamma, so the alternation stops once two
    successive bounds agree within ``tol``.  Individual ``spec.gamma`` values
    are ignored: the shared bound is the unknown.
    """
    pol = policy or default_policy()
    specs = list(specs)
    if not specs:
        raise ValueError("no constraints to minimize over")
    if gamma_hi <= 0.0:
        raise ValueError("gamma_hi must be positive")
    geometry = single_loop(pf, structure)
    groups = [hinf_group(spec, geometry, pol, gamma=1.0) for spec in specs]
    d_coeff = np.real(geometry.denominator().coeff)

    def solve_at(g: float) -> Solution:
        program = ConeProgram(geometry.rho_dim)
        for grp in groups:
            # rescale the norm rows only; row 0 is gamma-free
            a = grp.a.copy()
            a[:, 1:, :] /= g
            program.add_group(grp.cone, a, grp.b, grp.cols, grp.labels)
        return feasibility(program, pol)

    def closed_form(rho: np.ndarray) -> float:
        headroom = np.einsum("lfp,p->lf", d_coeff, rho) - pol.strict_margin
        best = pol.strict_margin
        for spec in specs:
            path = geometry.numerator(spec.path)
            if spec.weight is not None:
                path = path.weighted(spec.weight)
            num = path.gain(rho)
            ratio = np.where(num > 0.0, num / np.maximum(headroom, 1e-300), 0.0)
            best = max(best, float(np.max(ratio)))
        return best

    gamma = float(gamma_hi)
    sol = solve_at(gamma)
    if sol.status != "optimal":
        detail = ""
        if sol.certificate and sol.certificate.get("label"):
            detail = f" (most violated: {sol.certificate['label']})"
        raise InfeasibleError(
            f"gamma_hi = {gamma:g} is already {sol.status}, raise it{detail}",
            certificate=sol.certificate,
            solution=sol,
        )
    rho = sol.x
    trace = [gamma]
    for _ in range(1000):
        # solver slop can leave headroom barely negative where the gain
        # vanishes; feasibility at the current bound caps the true ratio
        gamma_next = min(closed_form(rho), gamma)
        trace.append(gamma_next)
        if gamma - gamma_next < tol:
            gamma = gamma_next
            break
        gamma = gamma_next
        sol = solve_at(gamma)
        if sol.status != "optimal":
            # marginal program: the previous iterate sits on the boundary,
            # nothing strictly better exists at this bound
            break
        rho = sol.x
    else:
        raise ArithmeticError("gamma alternation failed to settle in 1000 rounds")
    _recheck(specs, geometry, rho, pol, gamma=gamma)
    return BisectionResult(
        gamma=gamma,
        controller=ControllerParameterization.from_rho(structure, rho),
        gammas=tuple(trace),
    )
