"""Staged driver: schedule, renormalization, budgets, traces, verification."""

import csv
import json

import numpy as np
import pytest

from loopsynth import driver
from loopsynth import factorization as fz
from loopsynth import frd
from loopsynth import hinf
from loopsynth import paths
from loopsynth.closed_loop import PathId
from loopsynth.driver import LoopBinding, SynthesisProblem, run, verify_design
from loopsynth.h2 import H2TermSpec
from loopsynth.hinf import HinfConstraintSpec


def _grid(points=40):
    return frd.make_linear_grid(10.0, 450.0, points, 1000.0)


def _mild_pf(grid, l=3, jitter=0.03, seed=7):
    g = 0.8 * (1.0 + 0.3 / grid.z)
    rng = np.random.default_rng(seed)
    gains = 1.0 + jitter * rng.standard_normal(l)
    nt = (gains[:, None] * g[None, :])[:, :, None]
    mt = np.ones((l, len(grid)), dtype=complex)
    return fz.PlantFactorization(grid, nt, mt, label="mild")


def _structure(order=6):
    return fz.ControllerStructure(outputs=1, order=order, kind="fir")


def _tracking_specs(gamma=3.0):
    return (
        HinfConstraintSpec(PathId("e_from_r"), gamma=gamma),
        HinfConstraintSpec(PathId("y_from_r"), gamma=gamma),
    )


def _objective():
    return (H2TermSpec(PathId("e_from_r")), H2TermSpec(PathId("e_from_n"), q=0.04))


def test_degenerate_problem_is_plain_feasibility():
    grid = _grid()
    pf = _mild_pf(grid)
    st = _structure()
    specs = _tracking_specs()
    problem = SynthesisProblem(pf, st, specs)
    ctrl, trace = run(problem)
    assert len(trace.records) == 1
    assert trace.records[0].stage == "hinf"
    assert trace.records[0].status == "optimal"
    assert trace.records[0].objective is None
    # same program, same solver, same point
    direct = hinf.synthesize_hinf(specs, pf, st)
    assert np.array_equal(ctrl.rho(), direct.rho())


def test_schedule_stages_and_objective_activation():
    grid = _grid()
    pf = _mild_pf(grid)
    problem = SynthesisProblem(
        pf, _structure(), _tracking_specs(),
        h2_objective=_objective(),
        h2_constraints=[(H2TermSpec(PathId("u_from_r")), 50.0)],
        iterations=5,
    )
    _, trace = run(problem)
    stages = [r.stage for r in trace.records]
    assert stages == ["hinf", "h2_objective", "h2_full", "h2_full", "h2_full"]
    assert trace.records[0].objective is None
    assert trace.records[0].budget_slacks == {}
    assert trace.records[1].objective is not None
    assert trace.records[1].budget_slacks == {}
    for r in trace.records[2:]:
        assert set(r.budget_slacks) == {"u_from_r"}
        assert r.budget_slacks["u_from_r"] > 0.0
    assert all(r.status == "optimal" for r in trace.records)


def test_renormalization_pins_the_denominator_at_one():
    grid = _grid()
    pf = _mild_pf(grid)
    problem = SynthesisProblem(
        pf, _structure(), _tracking_specs(), h2_objective=_objective(), iterations=6
    )
    ctrl, trace = run(problem)
    # near the fixed point the accepted iterate barely moves, so the factor
    # divided out each round approaches a constant field: condition -> 1
    conds = [r.normalization["primary"] for r in trace.records]
    assert conds[-1] == pytest.approx(1.0, abs=1e-4)
    assert conds[-1] <= conds[1]
    checks = trace.records[-1].step_checks["primary"]
    assert checks["cross_min"] == pytest.approx(1.0, abs=1e-3)
    assert checks["y_overlap_min"] > 0.0
    # the objective sequence is non-increasing once the stage is fixed
    objs = [r.objective for r in trace.records if r.stage != "hinf"]
    assert all(b <= a + 1e-12 for a, b in zip(objs, objs[1:]))
    # rho snapshots share the controller basis: the last two nearly agree
    last, prev = np.asarray(trace.records[-1].rho), np.asarray(trace.records[-2].rho)
    assert np.linalg.norm(last - prev) < 1e-4 * max(1.0, np.linalg.norm(prev))
    assert np.array_equal(ctrl.rho(), last)


def test_runs_are_deterministic():
    grid = _grid(30)
    pf = _mild_pf(grid)
    problem = SynthesisProblem(
        pf, _structure(4), _tracking_specs(), h2_objective=_objective(), iterations=4
    )
    a_ctrl, a_trace = run(problem)
    b_ctrl, b_trace = run(problem)
    assert np.array_equal(a_ctrl.rho(), b_ctrl.rho())
    assert a_trace.to_json() == b_trace.to_json()


def _certified_budget_value(pf, st, specs, term, eta_probe=1e6):
    problem = SynthesisProblem(
        pf, st, specs, h2_objective=_objective(),
        h2_constraints=[(term, eta_probe)], iterations=4,
    )
    _, trace = run(problem)
    return eta_probe - trace.records[-1].budget_slacks[term.name()]


def test_binding_budget_shifts_the_optimum():
    grid = _grid()
    pf = _mild_pf(grid)
    st = _structure()
    specs = _tracking_specs()
    term = H2TermSpec(PathId("u_from_r"))
    loose_value = _certified_budget_value(pf, st, specs, term)
    assert loose_value > 0.0

    free = SynthesisProblem(pf, st, specs, h2_objective=_objective(), iterations=6)
    _, free_trace = run(free)
    tight = SynthesisProblem(
        pf, st, specs, h2_objective=_objective(),
        h2_constraints=[(term, 0.5 * loose_value)], iterations=6,
    )
    ctrl, tight_trace = run(tight)
    # the budget cuts into the feasible set, so the minimum cannot improve
    assert tight_trace.records[-1].objective >= free_trace.records[-1].objective - 1e-12
    slack = tight_trace.records[-1].budget_slacks[term.name()]
    assert slack >= -1e-9
    assert slack < 0.05 * loose_value  # binding, not slack by half

    report = verify_design(ctrl, tight)
    assert report.ok
    (budget_row,) = report.h2_budgets
    assert budget_row.value <= budget_row.limit * (1.0 + 1e-6)


def test_impossible_budget_fails_after_one_retry():
    grid = _grid()
    pf = _mild_pf(grid)
    # e_from_r <= 0.8 forces |Y/D| near 1 over the band, so u = X/D must
    # carry roughly 1/g of drive; a near-zero u budget cannot coexist
    problem = SynthesisProblem(
        pf, _structure(), _tracking_specs(gamma=0.8),
        h2_objective=_objective(),
        h2_constraints=[(H2TermSpec(PathId("u_from_r")), 1e-6)],
        iterations=6,
    )
    with pytest.raises(hinf.InfeasibleError, match="keeping the last feasible"):
        run(problem)
    try:
        run(problem)
    except hinf.InfeasibleError as err:
        statuses = [(r.index, r.status) for r in err.trace.records]
        # one failed attempt, one failed retry, both at iteration 3
        assert statuses[:2] == [(1, "optimal"), (2, "optimal")]
        assert statuses[2][0] == 3 and statuses[2][1] != "optimal"
        assert statuses[3][0] == 3 and statuses[3][1] != "optimal"
        assert err.certificate is not None


def test_iteration_one_infeasibility_carries_the_certificate():
    grid = _grid()
    pf = _mild_pf(grid)
    # complementarity floor: both maps below 0.45 is impossible
    problem = SynthesisProblem(pf, _structure(8), _tracking_specs(gamma=0.45))
    with pytest.raises(hinf.InfeasibleError, match="iteration 1") as info:
        run(problem)
    assert info.value.certificate is not None


def _dual_setup(grid, l=2, seed=3):
    """Two-actuator plant plus the single-actuator fallback factorization."""
    rng = np.random.default_rng(seed)
    z = grid.z
    gv = 0.8 * (1.0 + 0.3 / z)
    gm = 0.3 / z
    gains = 1.0 + 0.02 * rng.standard_normal((2, l))
    nt = np.stack(
        [gains[0][:, None] * gv[None, :], gains[1][:, None] * gm[None, :]], axis=2
    )
    mt = np.ones((l, len(grid)), dtype=complex)
    pf = fz.PlantFactorization(grid, nt, mt, label="dual")
    pf_first = fz.PlantFactorization(grid, nt[:, :, :1], mt, label="dual-fallback")
    ghat = gm.copy()
    return pf, pf_first, ghat


def test_fallback_loop_is_normalized_and_checked_alongside():
    grid = _grid()
    pf, pf_first, ghat = _dual_setup(grid)
    st = fz.ControllerStructure(outputs=2, order=5, kind="fir")
    fallback = LoopBinding(
        "fallback", pf_first,
        geometry=lambda f, s: paths.vcm_stage_loop(f, s, ghat),
    )
    specs = (
        HinfConstraintSpec(PathId("e_from_r"), gamma=3.0),
        HinfConstraintSpec(PathId("y_from_r"), gamma=3.0),
        HinfConstraintSpec(PathId("e_from_r"), gamma=8.0, loop="fallback"),
    )
    problem = SynthesisProblem(
        pf, st, specs,
        h2_objective=(H2TermSpec(PathId("e_from_r")),
                      H2TermSpec(PathId("e_from_n"), q=0.04)),
        loops=(fallback,),
        iterations=5,
    )
    ctrl, trace = run(problem)
    for record in trace.records:
        assert set(record.normalization) == {"primary", "fallback"}
    assert set(trace.records[-1].step_checks) == {"primary", "fallback"}
    assert trace.records[-1].normalization["fallback"] == pytest.approx(1.0, abs=5e-3)

    report = verify_design(ctrl, problem)
    assert report.ok
    assert report.re_d_min["primary"] > 0.0
    assert report.re_d_min["fallback"] > 0.0
    assert all(v.stable is True for v in report.winding["fallback"])
    names = [row.name for row in report.hinf]
    assert "fallback:e_from_r" in names


def test_trace_exports_round_trip(tmp_path):
    grid = _grid(30)
    pf = _mild_pf(grid)
    problem = SynthesisProblem(
        pf, _structure(4), _tracking_specs(), h2_objective=_objective(),
        h2_constraints=[(H2TermSpec(PathId("u_from_r")), 50.0)], iterations=4,
    )
    _, trace = run(problem)
    payload = json.loads(trace.to_json())
    assert len(payload["iterations"]) == len(trace.records)
    assert payload["iterations"][0]["stage"] == "hinf"
    assert payload["iterations"][-1]["budget_slacks"]["u_from_r"] == pytest.approx(
        trace.records[-1].budget_slacks["u_from_r"]
    )
    assert len(payload["iterations"][0]["rho"]) == problem.structure.rho_dim

    out = tmp_path / "trace.csv"
    trace.write_csv(out)
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["iteration", "stage", "status", "objective"]
    assert "slack:u_from_r" in rows[0]
    assert "cond:primary" in rows[0]
    assert len(rows) == len(trace.records) + 1
    obj_col = rows[0].index("objective")
    assert rows[1][obj_col] == ""  # stage 1 has no objective
    assert float(rows[-1][obj_col]) == pytest.approx(trace.records[-1].objective)


def test_verify_design_flags_a_corrupted_controller():
    grid = _grid()
    pf = _mild_pf(grid)
    problem = SynthesisProblem(
        pf, _structure(), _tracking_specs(gamma=1.2), h2_objective=_objective(),
        iterations=4,
    )
    ctrl, _ = run(problem)
    assert verify_design(ctrl, problem).ok

    # sign or scale changes of rho leave every gain ratio alone (numerator
    # and denominator are both homogeneous), so corrupt the direction
    bad_rho = np.random.default_rng(0).standard_normal(problem.structure.rho_dim)
    report = verify_design(bad_rho, problem)
    assert not report.ok
    assert any(not row.ok for row in report.hinf)
    assert any(v.stable is not True for v in report.winding["primary"])
    assert report.re_d_min["primary"] < 0.0


def test_dense_verification_uses_the_truth_model():
    grid = _grid()
    pf = _mild_pf(grid, l=1, jitter=0.0)
    problem = SynthesisProblem(
        pf, _structure(), _tracking_specs(), h2_objective=_objective(), iterations=4
    )
    ctrl, _ = run(problem)

    def primary_factory(dense_grid):
        return LoopBinding("", _mild_pf(dense_grid, l=1, jitter=0.0))

    report = verify_design(ctrl, problem, dense={"": primary_factory}, dense_factor=4)
    assert report.grid_points["primary"] == (len(grid) - 1) * 4 + 1
    assert report.ok
    coarse = verify_design(ctrl, problem)
    assert coarse.grid_points["primary"] == len(grid)
    # same rational plant, finer sampling: the peak can only be found larger
    assert report.hinf[0].value >= coarse.hinf[0].value - 1e-12

    with pytest.raises(ValueError, match="same name"):
        verify_design(
            ctrl, problem,
            dense={"": lambda g: LoopBinding("oops", _mild_pf(g, l=1, jitter=0.0))},
        )


def test_problem_validation():
    grid = _grid(20)
    pf = _mild_pf(grid)
    st = _structure(3)
    specs = _tracking_specs()
    term = H2TermSpec(PathId("e_from_r"))
    with pytest.raises(ValueError, match="at least one H-infinity"):
        SynthesisProblem(pf, st, ())
    with pytest.raises(ValueError, match="unknown loop"):
        SynthesisProblem(pf, st, (HinfConstraintSpec(PathId("e_from_r"), loop="x"),))
    with pytest.raises(ValueError, match="unknown loop"):
        SynthesisProblem(pf, st, specs, h2_objective=(H2TermSpec(PathId("e_from_r"), loop="x"),))
    with pytest.raises(ValueError, match="duplicate loop"):
        SynthesisProblem(pf, st, specs, loops=(LoopBinding("", pf),))
    with pytest.raises(ValueError, match="primary factorization or explicit loops"):
        SynthesisProblem(None, st, specs)
    with pytest.raises(ValueError, match="iteration 2"):
        SynthesisProblem(pf, st, specs, h2_objective=(term,), iterations=1)
    with pytest.raises(ValueError, match="iteration 3"):
        SynthesisProblem(pf, st, specs, h2_constraints=[(term, 1.0)], iterations=2)
    with pytest.raises(ValueError, match="budget level"):
        SynthesisProblem(pf, st, specs, h2_constraints=[(term, 0.0)])
    with pytest.raises(ValueError, match="one or more H2 terms"):
        SynthesisProblem(pf, st, specs, h2_constraints=[((), 1.0)])
    with pytest.raises(ValueError, match="early_stop_rel"):
        SynthesisProblem(pf, st, specs, early_stop_rel=0.0)
    # a lone term in a budget entry is wrapped, grouped terms stay grouped
    grouped = SynthesisProblem(
        pf, st, specs, h2_constraints=[(term, 2.0), ((term, term), 3.0)], iterations=3
    )
    assert grouped.h2_constraints[0][0] == (term,)
    assert len(grouped.h2_constraints[1][0]) == 2


def test_early_stop_trims_the_schedule():
    grid = _grid(30)
    pf = _mild_pf(grid)
    problem = SynthesisProblem(
        pf, _structure(4), _tracking_specs(), h2_objective=_objective(),
        iterations=12, early_stop_rel=1e-3,
    )
    _, trace = run(problem)
    assert len(trace.records) < 12
    assert all(r.status == "optimal" for r in trace.records)
    full = SynthesisProblem(
        pf, _structure(4), _tracking_specs(), h2_objective=_objective(), iterations=12
    )
    _, full_trace = run(full)
    assert len(full_trace.records) == 12
    # stopping early costs nearly nothing at this tolerance
    assert trace.records[-1].objective <= full_trace.records[-1].objective * (1 + 1e-2)


def test_budgets_without_objective_run_as_feasibility_rounds():
    grid = _grid(30)
    pf = _mild_pf(grid)
    problem = SynthesisProblem(
        pf, _structure(4), _tracking_specs(),
        h2_constraints=[(H2TermSpec(PathId("u_from_r")), 50.0)],
        iterations=3,
    )
    ctrl, trace = run(problem)
    assert [r.stage for r in trace.records] == ["hinf", "h2_objective", "h2_full"]
    assert all(r.objective is None for r in trace.records)
    assert trace.records[-1].budget_slacks["u_from_r"] > 0.0
    assert verify_design(ctrl, problem).ok
