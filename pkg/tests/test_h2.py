"""Rotated-cone H2 bounds: tightness, descent, and the step certificate."""

import numpy as np
import pytest

from loopsynth import analysis
from loopsynth import cones
from loopsynth import factorization as fz
from loopsynth import frd
from loopsynth import h2
from loopsynth import hinf
from loopsynth import paths


def _grid(points=40):
    return frd.make_linear_grid(10.0, 450.0, points, 1000.0)


def _mild_plant(grid, l=1, jitter=0.0, seed=0):
    g = 0.8 * (1.0 + 0.3 / grid.z)
    rng = np.random.default_rng(seed)
    gains = 1.0 + jitter * rng.standard_normal(l)
    nt = (gains[:, None] * g[None, :])[:, :, None]
    mt = np.ones((l, len(grid)), dtype=complex)
    return fz.PlantFactorization(grid, nt, mt, label="mild")


def _anchored_param(rng, structure, scale=0.1):
    """Previous iterate whose denominator keeps a positive real part."""
    rho_x = scale * rng.standard_normal((structure.outputs, structure.coeff_count))
    rho_y = np.zeros(structure.coeff_count)
    rho_y[0] = 1.0
    return fz.ControllerParameterization(structure, rho_x, rho_y)


def test_quadrature_matches_trapezoid_oracle():
    rng = np.random.default_rng(2)
    omega = np.sort(rng.uniform(0.05, 3.0, size=37))
    values = rng.uniform(0.0, 5.0, size=37)
    w = h2.quadrature_weights(omega)
    assert np.sum(w * values) == pytest.approx(np.trapezoid(values, omega) / np.pi, rel=1e-12)
    with pytest.raises(ValueError, match="increasing"):
        h2.quadrature_weights(omega[::-1])
    with pytest.raises(ValueError, match="two points"):
        h2.quadrature_weights(np.array([1.0]))


def test_rotated_cone_matches_block_matrix_eigenvalues():
    # the scalar slack replaces the paper's matrix Gamma: ||a||^2 <= t s with
    # t, s >= 0 must coincide with PSD-ness of [[t, a^H], [a, s I]]
    rng = np.random.default_rng(8)
    checked = 0
    for _ in range(300):
        mu = rng.integers(1, 4)
        a = rng.standard_normal(mu) + 1j * rng.standard_normal(mu)
        a *= rng.uniform(0.0, 1.5)
        t = rng.uniform(-0.5, 2.0)
        s = rng.uniform(-0.5, 2.0)
        block = np.zeros((mu + 1, mu + 1), dtype=complex)
        block[0, 0] = t
        block[1:, 0] = a
        block[0, 1:] = np.conj(a)
        block[1:, 1:] = s * np.eye(mu)
        margin_cone = min(t, s, t * s - np.linalg.norm(a) ** 2)
        if abs(margin_cone) < 1e-9:
            continue
        in_cone = margin_cone > 0.0
        psd = np.min(np.linalg.eigvalsh(block)) >= -1e-12
        assert in_cone == psd
        checked += 1
    assert checked > 250


def test_fixed_point_slack_is_the_true_squared_gain():
    rng = np.random.default_rng(4)
    grid = _grid()
    pf = _mild_plant(grid, l=2, jitter=0.05, seed=4)
    structure = fz.ControllerStructure(outputs=1, order=5, kind="fir")
    prev = _anchored_param(rng, structure)
    spectrum = 1.0 / (1.0 + (grid.omega / 0.8) ** 2)
    term = h2.H2TermSpec("e_from_r", q=1.5, spectrum=spectrum)
    asm = h2.assemble_h2(term, pf, prev, structure)

    geom = paths.single_loop(pf, structure)
    rho = prev.rho()
    d = geom.denominator().evaluate(rho)
    assert np.min(np.real(d)) > 0.0
    response = geom.numerator("e_from_r").evaluate(rho)[:, :, 0, 0] * spectrum / d
    t_min = np.abs(response) ** 2
    # at rho = rho_prev the minorant s equals |D|^2, so the minimal slack is
    # the true per-frequency squared weighted gain and the bound is the norm
    x = np.concatenate([rho, t_min.ravel()])
    rows = np.einsum("ndk,nk->nd", asm.group.a, x[asm.group.cols]) + asm.group.b
    np.testing.assert_allclose(
        np.sum(rows[:, 2:] ** 2, axis=1), rows[:, 0] * rows[:, 1], rtol=1e-9, atol=1e-12
    )
    direct = np.mean(
        [analysis.h2_norm_sq(grid.omega, response[i]) for i in range(pf.count)]
    )
    assert asm.bound_value(x) == pytest.approx(1.5 * direct, rel=1e-10)
    cert = asm.certificate(x)
    assert h2.h2_bound(cert) == pytest.approx(asm.bound_value(x), rel=1e-12)
    assert np.min(cert.t) >= 0.0
    np.testing.assert_allclose(cert.p_prev, d, rtol=1e-12)


def test_constant_numerator_toy_reduces_to_textbook_row():
    grid = _grid(2)
    nt = np.ones((1, 2, 1), dtype=complex)
    mt = np.ones((1, 2), dtype=complex)
    pf = fz.PlantFactorization(grid, nt, mt)
    structure = fz.ControllerStructure(outputs=1, order=1, kind="fir")
    prev = fz.ControllerParameterization(
        structure, np.array([[0.0, 0.0]]), np.array([1.0, 0.0])
    )
    term = h2.H2TermSpec("y_from_r")
    asm = h2.assemble_h2(term, pf, prev, structure)
    # numerator X = 2, Y = y0: the cone must read 4 <= t (2 Re(X + Y) - 1)
    for y0, s_expect in ((0.0, 3.0), (-0.5, 2.0)):
        rho = np.array([2.0, 0.0, y0, 0.0])
        for t_val, holds in ((4.0 / s_expect + 1e-6, True), (4.0 / s_expect - 1e-4, False)):
            x = np.concatenate([rho, np.full(2, t_val)])
            rows = np.einsum("ndk,nk->nd", asm.group.a, x[asm.group.cols]) + asm.group.b
            np.testing.assert_allclose(rows[:, 1], s_expect, atol=1e-12)
            margin = rows[:, 0] * rows[:, 1] - np.sum(rows[:, 2:] ** 2, axis=1)
            assert (np.min(margin) >= 0.0) == holds


def test_iterated_minimization_descends_onto_the_true_norm():
    # the error energy needs both the reference and the noise term: with
    # only the sensitivity in the objective the optimum degenerates to Y = 0.
    # rho scale is a flat direction of the true objective (K = X/Y), so the
    # iteration re-normalizes the factors at each linearization, exactly as
    # the mixed flow does; convergence is judged on the bound, never on rho.
    grid = _grid()
    pf0 = _mild_plant(grid, l=2, jitter=0.05, seed=11)
    structure = fz.ControllerStructure(outputs=1, order=6, kind="fir")
    r_spec = 1.0 / (1.0 + (grid.omega / 0.8) ** 2)
    n_spec = 0.2
    terms = [
        h2.H2TermSpec("e_from_r", spectrum=r_spec),
        h2.H2TermSpec("e_from_n", spectrum=n_spec),
    ]

    rng = np.random.default_rng(0)
    rho = _anchored_param(rng, structure, scale=0.0).rho()
    p, n_t = structure.rho_dim, pf0.count * len(grid)
    one = np.ones((pf0.count, len(grid)), dtype=complex)
    bounds, directs, reports = [], [], []
    for _ in range(12):
        prev = fz.ControllerParameterization.from_rho(structure, rho)
        pf = pf0.normalized_by(pf0.denominators(prev.evaluate(grid.omega)))
        geom = paths.single_loop(pf, structure)
        guard = hinf.hinf_group(hinf.HinfConstraintSpec("e_from_r", gamma=10.0), geom)
        asms = [
            h2.assemble_h2_term(term, geom, one, first_col=p + k * n_t)
            for k, term in enumerate(terms)
        ]
        program = cones.ConeProgram(p + 2 * n_t)
        c = np.zeros(p + 2 * n_t)
        for asm in asms:
            c[asm.t_cols] = asm.t_weights
        program.set_objective(c)
        program.add_group(guard.cone, guard.a, guard.b, guard.cols, guard.labels)
        for asm in asms:
            program.add_group(asm.group.cone, asm.group.a, asm.group.b,
                              asm.group.cols, asm.group.labels)
        sol = cones.solve(program)
        assert sol.status == "optimal"
        rho = sol.x[:p]
        reports.append(
            h2.verify_stability_step(
                pf, prev, fz.ControllerParameterization.from_rho(structure, rho)
            )
        )
        bounds.append(sum(asm.bound_value(sol.x) for asm in asms))
        d = geom.denominator().evaluate(rho)
        s_resp = geom.numerator("e_from_r").evaluate(rho)[:, :, 0, 0] * r_spec / d
        t_resp = geom.numerator("e_from_n").evaluate(rho)[:, :, 0, 0] * n_spec / d
        directs.append(
            np.mean(
                [
                    analysis.h2_norm_sq(grid.omega, s_resp[i])
                    + analysis.h2_norm_sq(grid.omega, t_resp[i])
                    for i in range(pf0.count)
                ]
            )
        )

    bounds = np.array(bounds)
    directs = np.array(directs)
    assert np.all(np.diff(bounds) <= 1e-9), "bound must not increase"
    # every iterate's bound certifies its own loop from above
    assert np.all(bounds >= directs - 1e-12)
    gaps = (bounds - directs) / directs
    assert gaps[-1] < 1e-3 and gaps[-1] < gaps[4]
    assert directs[-1] < directs[0]
    assert all(r.cross_positive for r in reports)
    assert all(r.ok for r in reports[-3:])


def test_zero_spectrum_minimizes_to_zero():
    grid = _grid(20)
    pf = _mild_plant(grid)
    structure = fz.ControllerStructure(outputs=1, order=3, kind="fir")
    geom = paths.single_loop(pf, structure)
    rng = np.random.default_rng(1)
    prev = _anchored_param(rng, structure)
    p_prev = pf.denominators(prev.evaluate(grid.omega))
    term = h2.H2TermSpec("u_from_r", spectrum=0.0)
    asm = h2.assemble_h2_term(term, geom, p_prev, first_col=structure.rho_dim)
    guard = hinf.hinf_group(hinf.HinfConstraintSpec("e_from_r", gamma=10.0), geom)
    p, n_t = structure.rho_dim, pf.count * len(grid)
    program = cones.ConeProgram(p + n_t)
    c = np.zeros(p + n_t)
    c[asm.t_cols] = asm.t_weights
    program.set_objective(c)
    program.add_group(guard.cone, guard.a, guard.b, guard.cols, guard.labels)
    program.add_group(asm.group.cone, asm.group.a, asm.group.b,
                      asm.group.cols, asm.group.labels)
    sol = cones.solve(program)
    assert sol.status == "optimal"
    assert asm.bound_value(sol.x) <= 1e-9


def test_linearization_point_must_stay_right_of_the_axis():
    grid = _grid(10)
    pf = _mild_plant(grid)
    structure = fz.ControllerStructure(outputs=1, order=2, kind="fir")
    geom = paths.single_loop(pf, structure)
    p_prev = np.ones((1, 10), dtype=complex)
    p_prev[0, 4] = -0.2 + 0.5j
    with pytest.raises(ValueError, match="linearization"):
        h2.assemble_h2_term(h2.H2TermSpec("e_from_r"), geom, p_prev, first_col=6)


def test_budget_row_sums_terms_against_eta():
    grid = _grid(8)
    pf = _mild_plant(grid, l=2)
    structure = fz.ControllerStructure(outputs=1, order=2, kind="fir")
    geom = paths.single_loop(pf, structure)
    rng = np.random.default_rng(6)
    prev = _anchored_param(rng, structure)
    p_prev = pf.denominators(prev.evaluate(grid.omega))
    p = structure.rho_dim
    n_t = pf.count * len(grid)
    asm_a = h2.assemble_h2_term(h2.H2TermSpec("e_from_r"), geom, p_prev, first_col=p)
    asm_b = h2.assemble_h2_term(
        h2.H2TermSpec("e_from_n"), geom, p_prev, first_col=p + n_t
    )
    budget = h2.h2_constraint([asm_a, asm_b], eta=2.5)
    assert budget.cone == "nonneg"
    x = np.zeros(p + 2 * n_t)
    t = rng.uniform(0.0, 1.0, size=2 * n_t)
    x[p:] = t
    row = float(budget.a[0, 0] @ x[budget.cols[0]] + budget.b[0, 0])
    expected = 2.5 - asm_a.bound_value(x) - asm_b.bound_value(x)
    assert row == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError, match="positive"):
        h2.h2_constraint(asm_a, eta=0.0)
    with pytest.raises(ValueError, match="no terms"):
        h2.h2_constraint([], eta=1.0)


def test_step_verification_cases():
    grid = _grid(12)
    pf = _mild_plant(grid, l=2, jitter=0.03, seed=9)
    structure = fz.ControllerStructure(outputs=1, order=3, kind="fir")
    rng = np.random.default_rng(5)
    prev = _anchored_param(rng, structure)

    same = h2.verify_stability_step(pf, prev, prev)
    assert same.ok and same.cross_positive and same.y_overlap and same.same_structure

    flipped = fz.ControllerParameterization(structure, -prev.rho_x, -prev.rho_y)
    report = h2.verify_stability_step(pf, prev, flipped)
    assert not report.ok and not report.cross_positive

    nudged = fz.ControllerParameterization(
        structure, prev.rho_x * 1.01, prev.rho_y * 1.01
    )
    assert h2.verify_stability_step(pf, prev, nudged).ok

    other = fz.ControllerStructure(outputs=1, order=2, kind="integrator", alpha=0.9)
    reshaped = _anchored_param(rng, other)
    report = h2.verify_stability_step(pf, prev, reshaped)
    assert not report.same_structure and not report.ok

    # plain frequency-response iterates: structure judged by shape only
    frd_report = h2.verify_stability_step(
        pf, prev.evaluate(grid.omega), nudged.evaluate(grid.omega)
    )
    assert frd_report.ok


def test_term_spec_validation():
    with pytest.raises(ValueError, match="nonnegative"):
        h2.H2TermSpec("e_from_r", q=-1.0)
    with pytest.raises(ValueError, match="unbounded"):
        h2.H2TermSpec("e_from_r", spectrum=np.array([1.0, np.inf]))
    assert h2.H2TermSpec("e_from_r", loop="dual").name() == "dual:e_from_r"
    assert h2.H2TermSpec("e_from_r", label="tracking").name() == "tracking"
