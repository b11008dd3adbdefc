"""Staged mixed-objective synthesis over one or several renormalized loops.

The schedule follows the convex-concave flowchart: iteration 1 solves the
pure H-infinity feasibility program, iteration 2 adds the H2 objective
around that point, and iterations 3 onward also enforce the H2 budget rows.
After every iteration all plant factorizations are divided by their own
D(rho_k), so the next linearization point is exactly 1 on the grid and the
scale-flat direction of K = X / Y cannot drift the iterates.

Loops are named: the empty name is the primary loop and every constraint
or term carries the name of the loop whose geometry it reads.  Extra loops
let one rho serve several path tables at once, such as a composite
controller together with its fallback configuration.
"""

from __future__ import annotations

import csv
import dataclasses
import json

import numpy as np

from loopsynth.analysis import StabilityVerdict, winding_stability
from loopsynth.cones import ConeGroup, ConeProgram, feasibility, solve
from loopsynth.factorization import (
    ControllerParameterization,
    ControllerStructure,
    PlantFactorization,
)
from loopsynth.frd import FrequencyGrid
from loopsynth.h2 import H2TermSpec, assemble_h2_term, h2_constraint, quadrature_weights
from loopsynth.hinf import HinfConstraintSpec, InfeasibleError, hinf_group
from loopsynth.paths import single_loop
from loopsynth.policy import NumericPolicy, default_policy

__all__ = [
    "LoopBinding",
    "SynthesisProblem",
    "IterationRecord",
    "RunTrace",
    "run",
    "CheckResult",
    "VerificationReport",
    "verify_design",
]


def _display(name: str) -> str:
    return name or "primary"


@dataclasses.dataclass(frozen=True)
class LoopBinding:
    """A named loop: measured factorization plus the geometry built over it.

    ``geometry`` maps (pf, structure) to a path table; it is re-invoked
    after every renormalization, so closures over frozen data (a first-stage
    compensator, say) are fine as long as the factorization argument is the
    one thing that changes.  ``None`` means the plain single loop.
    """

    name: str
    pf: PlantFactorization
    geometry: object = None

    def build(self, pf: PlantFactorization, structure: ControllerStructure):
        make = self.geometry if self.geometry is not None else single_loop
        return make(pf, structure)


def _as_budget(entry) -> tuple[tuple[H2TermSpec, ...], float]:
    terms, eta = entry
    if isinstance(terms, H2TermSpec):
        terms = (terms,)
    terms = tuple(terms)
    if not terms or not all(isinstance(t, H2TermSpec) for t in terms):
        raise ValueError("each budget entry needs one or more H2 terms")
    eta = float(eta)
    if not np.isfinite(eta) or eta <= 0:
        raise ValueError("budget level must be positive and finite")
    return terms, eta


@dataclasses.dataclass(frozen=True)
class SynthesisProblem:
    """Everything one synthesis run needs, validated once up front.

    ``h2_constraints`` entries are (term or terms, eta) pairs; the terms in
    one entry share a single budget row.  ``loops`` adds named secondary
    loops on top of the primary ``pf``; specs and terms select loops by
    name, the empty string meaning the primary.
    """

    pf: PlantFactorization | None
    structure: ControllerStructure
    hinf_specs: tuple[HinfConstraintSpec, ...]
    h2_objective: tuple[H2TermSpec, ...] = ()
    h2_constraints: tuple = ()
    loops: tuple[LoopBinding, ...] = ()
    iterations: int = 10
    early_stop_rel: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "hinf_specs", tuple(self.hinf_specs))
        object.__setattr__(self, "h2_objective", tuple(self.h2_objective))
        object.__setattr__(
            self, "h2_constraints", tuple(_as_budget(e) for e in self.h2_constraints)
        )
        bindings = tuple(self.loops)
        if self.pf is not None:
            bindings = (LoopBinding("", self.pf),) + bindings
        object.__setattr__(self, "loops", bindings)
        if not bindings:
            raise ValueError("problem needs a primary factorization or explicit loops")
        names = [b.name for b in bindings]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate loop names: {sorted(names)}")
        if not self.hinf_specs:
            raise ValueError("at least one H-infinity constraint is required")
        known = set(names)
        for spec in self.hinf_specs:
            if spec.loop not in known:
                raise ValueError(f"constraint {spec.name()!r} names unknown loop {spec.loop!r}")
        for term in self._all_terms():
            if term.loop not in known:
                raise ValueError(f"H2 term {term.name()!r} names unknown loop {term.loop!r}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError("iterations must be a positive integer")
        object.__setattr__(self, "iterations", int(self.iterations))
        if self.h2_objective and self.iterations < 2:
            raise ValueError("the H2 objective activates at iteration 2; raise iterations")
        if self.h2_constraints and self.iterations < 3:
            raise ValueError("H2 budgets activate at iteration 3; raise iterations")
        if self.early_stop_rel is not None and not self.early_stop_rel > 0:
            raise ValueError("early_stop_rel must be positive when set")

    def _all_terms(self):
        for term in self.h2_objective:
            yield term
        for terms, _ in self.h2_constraints:
            yield from terms


@dataclasses.dataclass(frozen=True)
class IterationRecord:
    """One row of the run trace.

    ``normalization`` holds max|D|/min|D| per loop at the accepted point,
    measured just before dividing it out.  ``rho`` is the accepted iterate;
    renormalization rescales the plant factors, never the controller basis,
    so the vectors are directly comparable across rows.
    """

    index: int
    stage: str  # hinf | h2_objective | h2_full
    status: str
    objective: float | None
    budget_slacks: dict[str, float]
    normalization: dict[str, float]
    step_checks: dict[str, dict[str, float]]
    rho: tuple[float, ...]


@dataclasses.dataclass(frozen=True)
class RunTrace:
    records: tuple[IterationRecord, ...]

    def objectives(self) -> list[float | None]:
        return [r.objective for r in self.records]

    def to_json(self, indent: int = 2) -> str:
        payload = {"iterations": [dataclasses.asdict(r) for r in self.records]}
        return json.dumps(payload, indent=indent)

    def write_csv(self, path) -> None:
        slack_keys = sorted({k for r in self.records for k in r.budget_slacks})
        cond_keys = sorted({k for r in self.records for k in r.normalization})
        check_keys = sorted({k for r in self.records for k in r.step_checks})
        header = ["iteration", "stage", "status", "objective"]
        header += [f"slack:{k}" for k in slack_keys]
        header += [f"cond:{k}" for k in cond_keys]
        for k in check_keys:
            header += [f"cross_min:{k}", f"y_overlap_min:{k}"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for r in self.records:
                row = [r.index, r.stage, r.status,
                       "" if r.objective is None else repr(r.objective)]
                row += [repr(r.budget_slacks[k]) if k in r.budget_slacks else ""
                        for k in slack_keys]
                row += [repr(r.normalization[k]) if k in r.normalization else ""
                        for k in cond_keys]
                for k in check_keys:
                    chk = r.step_checks.get(k)
                    row += ["" if chk is None else repr(chk["cross_min"]),
                            "" if chk is None else repr(chk["y_overlap_min"])]
                writer.writerow(row)


def _add(program: ConeProgram, group: ConeGroup) -> None:
    program.add_group(group.cone, group.a, group.b, group.cols, group.labels)


def _renormalize(states: dict, bindings, structure: ControllerStructure,
                 rho: np.ndarray) -> dict[str, float]:
    """Divide every loop's factors by its own D(rho); returns max/min |D|."""
    conds = {}
    for b in bindings:
        geom = b.build(states[b.name], structure)
        d = geom.denominator().evaluate(rho)
        mags = np.abs(d)
        if not np.all(np.isfinite(mags)) or np.min(mags) <= 0.0:
            raise ArithmeticError(
                f"loop {_display(b.name)!r}: denominator vanished at the accepted point"
            )
        conds[_display(b.name)] = float(np.max(mags) / np.min(mags))
        states[b.name] = states[b.name].normalized_by(d)
    return conds


def _step_checks(geoms: dict, bindings, rho_prev: np.ndarray,
                 rho: np.ndarray) -> dict[str, dict[str, float]]:
    # Descent-step certificate pieces, in the current (normalized) chart:
    # Re(conj(D_prev) D_next) > 0 everywhere and the Y factors overlapping
    # by more than half |Y_prev|^2.  Recorded, not enforced; a long early
    # step can fail the overlap without invalidating the run.
    out = {}
    for b in bindings:
        geom = geoms[b.name]
        field = geom.denominator()
        cross = np.real(np.conj(field.evaluate(rho_prev)) * field.evaluate(rho))
        y_prev = geom.y_coeff @ rho_prev
        y_next = geom.y_coeff @ rho
        overlap = np.real(np.conj(y_prev) * y_next) - 0.5 * np.abs(y_prev) ** 2
        out[_display(b.name)] = {
            "cross_min": float(np.min(cross)),
            "y_overlap_min": float(np.min(overlap)),
        }
    return out


def _spec_worst_ratio(spec: HinfConstraintSpec, geom, rho: np.ndarray) -> float:
    path = geom.numerator(spec.path)
    if spec.weight is not None:
        path = path.weighted(spec.weight)
    d = geom.denominator().evaluate(rho)
    return float(np.max(path.gain(rho) / (np.abs(d) * spec.gamma)))


def _tight_bound(asm, geom, rho: np.ndarray) -> float:
    """Minimal feasible slack at rho: the certified value of one term.

    The solver only pins the slacks that appear in the objective; budget
    slacks float anywhere between the cone floor and the budget row, so the
    trace recomputes the floor.  Never larger than the solver's own sum.
    """
    term = asm.term
    path = geom.numerator(term.path)
    if term.spectrum is not None:
        path = path.weighted(term.spectrum)
    d = geom.denominator().evaluate(rho)
    s = 2.0 * np.real(np.conj(asm.p_prev) * d) - np.abs(asm.p_prev) ** 2
    sq = path.gain(rho) ** 2
    t = np.where(sq > 0.0, sq / np.maximum(s, 1e-300), 0.0)
    return float(asm.t_weights @ t.ravel())


def _term_direct_value(term: H2TermSpec, geom, rho: np.ndarray) -> float:
    """Quadrature of the true per-frequency squared gain, no slack involved."""
    path = geom.numerator(term.path)
    if term.spectrum is not None:
        path = path.weighted(term.spectrum)
    d = geom.denominator().evaluate(rho)
    sq = (path.gain(rho) / np.abs(d)) ** 2
    quad = quadrature_weights(geom.grid.omega)
    return float(term.q * np.sum(sq @ quad) / sq.shape[0])


def _final_recheck(problem: SynthesisProblem, states: dict, rho: np.ndarray,
                   pol: NumericPolicy) -> None:
    # The cone rows certify gamma at the solver's tolerance; walk the
    # original definition once before handing the controller back.
    geoms = {b.name: b.build(states[b.name], problem.structure) for b in problem.loops}
    for b in problem.loops:
        d = geoms[b.name].denominator().evaluate(rho)
        worst = float(np.min(np.real(d)))
        if worst < pol.strict_margin / 2.0:
            raise ArithmeticError(
                f"loop {_display(b.name)!r}: Re(D) = {worst:.3e} after the final "
                "iteration, below half the strict margin"
            )
    for spec in problem.hinf_specs:
        ratio = _spec_worst_ratio(spec, geoms[spec.loop], rho)
        if ratio > 1.0 + 10.0 * pol.cone_tol:
            raise ArithmeticError(
                f"constraint {spec.name()!r} violated at the final point: "
                f"gain ratio {ratio:.6f}"
            )


def run(problem: SynthesisProblem,
        policy: NumericPolicy | None = None
        ) -> tuple[ControllerParameterization, RunTrace]:
    """Execute the staged schedule; returns the controller and its trace.

    Raises InfeasibleError when iteration 1 has no solution (the constraint
    set itself is empty) or when a budgeted iteration stays infeasible after
    one extra renormalization around the last feasible iterate.  The
    returned coefficients are coordinate-free even though the internal
    states are renormalized every iteration.
    """
    pol = policy or default_policy()
    structure = problem.structure
    p = structure.rho_dim
    bindings = problem.loops
    states = {b.name: b.pf for b in bindings}

    def build_geometries():
        return {b.name: b.build(states[b.name], structure) for b in bindings}

    def certificate_detail(sol):
        if sol.certificate and sol.certificate.get("label"):
            return f" (most violated: {sol.certificate['label']})"
        return ""

    records: list[IterationRecord] = []

    geoms = build_geometries()
    program = ConeProgram(p)
    for spec in problem.hinf_specs:
        _add(program, hinf_group(spec, geoms[spec.loop], pol))
    sol = feasibility(program, pol)
    if sol.status != "optimal":
        raise InfeasibleError(
            f"iteration 1 (H-infinity stage) is {sol.status}{certificate_detail(sol)}",
            certificate=sol.certificate,
            solution=sol,
        )
    rho = sol.x
    conds = _renormalize(states, bindings, structure, rho)
    records.append(IterationRecord(
        index=1, stage="hinf", status="optimal", objective=None,
        budget_slacks={}, normalization=conds, step_checks={},
        rho=tuple(float(v) for v in rho),
    ))

    if not problem.h2_objective and not problem.h2_constraints:
        _final_recheck(problem, states, rho, pol)
        return ControllerParameterization.from_rho(structure, rho), RunTrace(tuple(records))

    k = 2
    retried = False
    while k <= problem.iterations:
        with_budgets = k >= 3 and bool(problem.h2_constraints)
        stage = "h2_full" if with_budgets else "h2_objective"
        geoms = build_geometries()

        # Layout: controller coefficients first, then one slack per (term,
        # measurement, frequency), objective terms before budgeted ones.
        offset = p
        objective_asms = []
        for term in problem.h2_objective:
            geom = geoms[term.loop]
            ones = np.ones((geom.measurements, len(geom.grid)))
            asm = assemble_h2_term(term, geom, ones, offset, pol)
            objective_asms.append(asm)
            offset += asm.t_cols.size
        budget_rows = []
        budget_asms = []
        if with_budgets:
            for terms, eta in problem.h2_constraints:
                group_asms = []
                for term in terms:
                    geom = geoms[term.loop]
                    ones = np.ones((geom.measurements, len(geom.grid)))
                    asm = assemble_h2_term(term, geom, ones, offset, pol)
                    group_asms.append(asm)
                    offset += asm.t_cols.size
                budget_asms.append(group_asms)
                budget_rows.append(h2_constraint(group_asms, eta))

        program = ConeProgram(offset)
        for spec in problem.hinf_specs:
            _add(program, hinf_group(spec, geoms[spec.loop], pol))
        for asm in objective_asms:
            _add(program, asm.group)
        for group_asms in budget_asms:
            for asm in group_asms:
                _add(program, asm.group)
        for row in budget_rows:
            _add(program, row)
        if objective_asms:
            c = np.zeros(offset)
            for asm in objective_asms:
                c[asm.t_cols] = asm.t_weights
            program.set_objective(c)
            sol = solve(program, pol)
        else:
            sol = feasibility(program, pol)

        if sol.status != "optimal":
            records.append(IterationRecord(
                index=k, stage=stage, status=sol.status, objective=None,
                budget_slacks={}, normalization={}, step_checks={},
                rho=tuple(float(v) for v in rho),
            ))
            if k == 2 or retried:
                err = InfeasibleError(
                    f"iteration {k} ({stage}) is {sol.status}"
                    f"{certificate_detail(sol)}; keeping the last feasible iterate "
                    "did not recover it",
                    certificate=sol.certificate,
                    solution=sol,
                )
                err.trace = RunTrace(tuple(records))
                raise err
            # Budget conservatism can bite on a long step.  Keep the last
            # feasible iterate, renormalize around it once more, and retry
            # the same iteration before giving up.
            _renormalize(states, bindings, structure, rho)
            retried = True
            continue
        retried = False

        rho_new = sol.x[:p]
        checks = _step_checks(geoms, bindings, rho, rho_new)
        objective = None
        if objective_asms:
            objective = float(sum(asm.bound_value(sol.x) for asm in objective_asms))
        slacks = {}
        for (terms, eta), group_asms in zip(problem.h2_constraints, budget_asms):
            key = "+".join(t.name() for t in terms)
            certified = sum(_tight_bound(asm, geoms[asm.term.loop], rho_new)
                            for asm in group_asms)
            slacks[key] = float(eta - certified)
        rho = rho_new
        conds = _renormalize(states, bindings, structure, rho)
        records.append(IterationRecord(
            index=k, stage=stage, status="optimal", objective=objective,
            budget_slacks=slacks, normalization=conds, step_checks=checks,
            rho=tuple(float(v) for v in rho),
        ))

        if problem.early_stop_rel is not None and objective is not None:
            same = [r.objective for r in records if r.stage == stage
                    and r.objective is not None]
            if len(same) >= 3:
                drop = same[-3] - same[-1]
                if drop < problem.early_stop_rel * max(abs(same[-3]), 1e-12):
                    break
        k += 1

    _final_recheck(problem, states, rho, pol)
    return ControllerParameterization.from_rho(structure, rho), RunTrace(tuple(records))


@dataclasses.dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    limit: float | None
    ok: bool


@dataclasses.dataclass(frozen=True)
class VerificationReport:
    """Direct evaluation of a finished design against its problem.

    H-infinity rows compare the weighted peak gain against gamma, H2 rows
    compare the quadrature of the true squared gain against eta, and the
    stability verdicts come from the winding of each loop denominator.
    ``ok`` is the conjunction of every row and every verdict.
    """

    hinf: tuple[CheckResult, ...]
    h2_terms: tuple[CheckResult, ...]
    h2_budgets: tuple[CheckResult, ...]
    re_d_min: dict[str, float]
    winding: dict[str, tuple[StabilityVerdict, ...]]
    grid_points: dict[str, int]
    ok: bool

    def to_json(self, indent: int = 2) -> str:
        payload = dataclasses.asdict(self)
        return json.dumps(payload, indent=indent)


def _dense_binding(binding: LoopBinding, factory, factor: int) -> LoopBinding:
    grid = binding.pf.grid
    count = (len(grid) - 1) * factor + 1
    dense_grid = FrequencyGrid(
        np.linspace(grid.freqs_hz[0], grid.freqs_hz[-1], count), grid.sample_rate_hz
    )
    dense = factory(dense_grid)
    if not isinstance(dense, LoopBinding) or dense.name != binding.name:
        raise ValueError(f"dense factory for loop {_display(binding.name)!r} "
                         "must return a binding with the same name")
    return dense


def verify_design(controller, problem: SynthesisProblem,
                  dense: dict | None = None, dense_factor: int = 4,
                  policy: NumericPolicy | None = None) -> VerificationReport:
    """Check a controller against every constraint of ``problem``.

    Runs on the problem's measured grids by default.  ``dense`` maps loop
    names to factories rebuilding that loop's binding from a model on an
    arbitrary grid; those loops are then checked on a ``dense_factor``
    times finer grid, which is only honest when the factory evaluates a
    rational truth model rather than interpolating the data.
    """
    pol = policy or default_policy()
    rho = controller.rho() if hasattr(controller, "rho") else np.asarray(controller, float)
    bindings = {}
    for b in problem.loops:
        if dense is not None and b.name in dense:
            bindings[b.name] = _dense_binding(b, dense[b.name], dense_factor)
        else:
            bindings[b.name] = b
    geoms = {name: b.build(b.pf, problem.structure) for name, b in bindings.items()}

    hinf_rows = []
    for spec in problem.hinf_specs:
        ratio = _spec_worst_ratio(spec, geoms[spec.loop], rho)
        hinf_rows.append(CheckResult(
            name=spec.name(), value=ratio * spec.gamma, limit=spec.gamma,
            ok=ratio <= 1.0 + 10.0 * pol.cone_tol,
        ))

    term_rows = []
    for term in problem.h2_objective:
        value = _term_direct_value(term, geoms[term.loop], rho)
        term_rows.append(CheckResult(name=term.name(), value=value, limit=None, ok=True))
    budget_rows = []
    for terms, eta in problem.h2_constraints:
        value = sum(_term_direct_value(t, geoms[t.loop], rho) for t in terms)
        budget_rows.append(CheckResult(
            name="+".join(t.name() for t in terms), value=float(value), limit=eta,
            ok=value <= eta * (1.0 + 10.0 * pol.cone_tol),
        ))

    re_d_min = {}
    winding = {}
    points = {}
    for name, b in bindings.items():
        d = geoms[name].denominator().evaluate(rho)
        re_d_min[_display(name)] = float(np.min(np.real(d)))
        winding[_display(name)] = tuple(winding_stability(d[i], pol)
                                        for i in range(d.shape[0]))
        points[_display(name)] = len(geoms[name].grid)

    verdicts_ok = all(v.stable is True for vs in winding.values() for v in vs)
    ok = (all(r.ok for r in hinf_rows) and all(r.ok for r in budget_rows)
          and verdicts_ok)
    return VerificationReport(
        hinf=tuple(hinf_rows), h2_terms=tuple(term_rows),
        h2_budgets=tuple(budget_rows), re_d_min=re_d_min, winding=winding,
        grid_points=points, ok=ok,
    )
