"""Closed-loop table pinned against direct block-diagram elimination."""

import numpy as np
import pytest

from loopsynth import closed_loop as cl
from loopsynth import factorization as fz
from loopsynth import frd


def _random_loop(seed, n_act=3, points=6):
    rng = np.random.default_rng(seed)
    grid = frd.make_linear_grid(5.0, 450.0, points, 1000.0)
    g = rng.standard_normal((1, points, 1, n_act)) + 1j * rng.standard_normal((1, points, 1, n_act))
    fset = frd.FrdSet("g", (frd.FrdMeasurement(grid, g[0]),))
    pf = fz.factorize_stable(fset)
    x = rng.standard_normal((n_act, points)) + 1j * rng.standard_normal((n_act, points))
    y = rng.standard_normal(points) + 1j * rng.standard_normal(points)
    cf = fz.ControllerFrd(omega=grid.omega, x=x, y=y)
    return pf, cf, g[0, :, 0, :], x, y


def _oracle(g, x, y):
    """Solve e = r - y_out, u = K (e + n), y_out = g (u + w) directly."""
    points, n_act = g.shape
    k = x / y  # (n, F) broadcast later
    out = {}
    for source in ("r", "n") + tuple(f"w{a}" for a in range(n_act)):
        e = np.empty(points, dtype=complex)
        u = np.empty((points, n_act), dtype=complex)
        yo = np.empty(points, dtype=complex)
        for f in range(points):
            gk = g[f] @ k[:, f]
            r = 1.0 if source == "r" else 0.0
            n = 1.0 if source == "n" else 0.0
            w = np.zeros(n_act, dtype=complex)
            if source.startswith("w"):
                w[int(source[1:])] = 1.0
            # e (1 + gK) = r - gK n - g w
            e[f] = (r - gk * n - g[f] @ w) / (1.0 + gk)
            u[f] = k[:, f] * (e[f] + n)
            yo[f] = g[f] @ (u[f] + w)
        out[source] = (e, u, yo)
    return out


def test_all_nine_entries_match_oracle():
    pf, cf, g, x, y = _random_loop(0)
    table = cl.closed_loop(pf, cf, 0)
    oracle = _oracle(g, x, y)

    e_r, u_r, y_r = oracle["r"]
    assert np.allclose(table.entry("e_from_r")[:, 0, 0], e_r, atol=1e-11)
    assert np.allclose(table.entry("u_from_r")[:, :, 0], u_r, atol=1e-11)
    assert np.allclose(table.entry("y_from_r")[:, 0, 0], y_r, atol=1e-11)

    e_n, u_n, y_n = oracle["n"]
    assert np.allclose(table.entry("e_from_n")[:, 0, 0], e_n, atol=1e-11)
    assert np.allclose(table.entry("u_from_n")[:, :, 0], u_n, atol=1e-11)
    assert np.allclose(table.entry("y_from_n")[:, 0, 0], y_n, atol=1e-11)

    for a in range(3):
        e_w, u_w, y_w = oracle[f"w{a}"]
        assert np.allclose(table.entry("e_from_w")[:, 0, a], e_w, atol=1e-11)
        assert np.allclose(table.entry("u_from_w")[:, :, a], u_w, atol=1e-11)
        assert np.allclose(table.entry("y_from_w")[:, 0, a], y_w, atol=1e-11)


def test_pinned_unit_factors():
    grid = frd.make_linear_grid(10.0, 100.0, 2, 1000.0)
    pf = fz.PlantFactorization(grid, np.ones((1, 2, 1)), np.ones((1, 2)))
    cf = fz.ControllerFrd(omega=grid.omega, x=np.ones((1, 2)), y=np.ones(2))
    table = cl.closed_loop(pf, cf, 0)
    assert np.allclose(table.entry("e_from_r"), 0.5)
    assert np.allclose(table.entry("u_from_w"), -0.5)
    assert np.allclose(table.denominator, 2.0)


def test_complementarity_invariant():
    pf, cf, _, _, _ = _random_loop(7)
    table = cl.closed_loop(pf, cf, 0)
    total = table.entry("e_from_r")[:, 0, 0] + table.entry("y_from_r")[:, 0, 0]
    assert np.allclose(total, 1.0, atol=1e-11)


def test_ysplit_entries_sum_to_output_path():
    pf, cf, _, _, _ = _random_loop(9)
    table = cl.closed_loop(pf, cf, 0)
    split = table.entries["ysplit_from_r"][:, 0, :]
    assert np.allclose(split.sum(axis=1), table.entry("y_from_r")[:, 0, 0], atol=1e-11)
    # column sums of the disturbance split recover the aggregate row
    split_w = table.entries["ysplit_from_w"]
    assert np.allclose(split_w.sum(axis=1), table.entry("y_from_w")[:, 0, :], atol=1e-11)


def test_single_index_names_the_column_on_row_blocks():
    pf, cf, _, _, _ = _random_loop(13)
    table = cl.closed_loop(pf, cf, 0)
    assert np.allclose(
        table.entry("e_from_w[1]"), table.entry("e_from_w[0,1]"), atol=0
    )
    assert np.allclose(
        table.entry("ysplit_from_r[2]")[:, 0, 0],
        table.entries["ysplit_from_r"][:, 0, 2],
        atol=0,
    )


def test_path_id_parsing():
    pid = cl.PathId.parse("u_from_w[1,0]")
    assert pid.entry == "u_from_w" and pid.row == 1 and pid.col == 0
    assert str(pid) == "u_from_w[1,0]"
    with pytest.raises(ValueError):
        cl.PathId.parse("nonsense_path")
    with pytest.raises(ValueError):
        cl.PathId("ysplit_from_r")


def test_dual_stage_map_matches_simo_factor_table():
    rng = np.random.default_rng(21)
    points = 8
    grid = frd.make_linear_grid(10.0, 450.0, points, 1000.0)
    gv = rng.standard_normal(points) + 1j * rng.standard_normal(points)
    gm = rng.standard_normal(points) + 1j * rng.standard_normal(points)
    ghat = np.exp(-1j * grid.omega)
    x = rng.standard_normal((2, points)) + 1j * rng.standard_normal((2, points))
    y = rng.standard_normal(points) + 1j * rng.standard_normal(points)

    # factor route: two-actuator standard loop for the composite controller
    dual = np.stack([gv, gm], axis=-1).reshape(points, 1, 2)
    pf = fz.factorize_stable(frd.FrdSet("dual", (frd.FrdMeasurement(grid, dual),)))
    cf = fz.ControllerFrd(omega=grid.omega, x=x, y=y)
    table = cl.closed_loop(pf, cf, 0)

    # block-diagram route: recover K_v, K_m from the composite column
    km = x[1] / y
    kv = (x[0] / y) / (1.0 + km * ghat)
    direct = cl.dual_stage_map(gv, gm, kv, km, ghat, omega=grid.omega)

    assert np.allclose(direct.get("e", "r"), table.entry("e_from_r")[:, 0, 0], atol=1e-10)
    assert np.allclose(direct.get("u_v", "n"), table.entry("u_from_n")[:, 0, 0], atol=1e-10)
    assert np.allclose(direct.get("u_m", "w_v"), table.entry("u_from_w")[:, 1, 0], atol=1e-10)
    assert np.allclose(direct.get("y", "w_m"), table.entry("y_from_w")[:, 0, 1], atol=1e-10)
    assert np.allclose(direct.get("y_m", "r"), table.entry("ysplit_from_r[1]")[:, 0, 0], atol=1e-10)
    for a, sig in enumerate(("y_v", "y_m")):
        for b, src in enumerate(("w_v", "w_m")):
            got = table.entry(f"ysplit_from_w[{a},{b}]")[:, 0, 0]
            assert np.allclose(direct.get(sig, src), got, atol=1e-10)


def test_dual_stage_sensitivity_decoupling():
    # with ghat = gm exactly, the dual-stage sensitivity factors into the
    # product of the two single-loop sensitivities
    rng = np.random.default_rng(33)
    points = 10
    om = np.linspace(0.1, 3.0, points)
    gv = rng.standard_normal(points) + 1j * rng.standard_normal(points)
    gm = rng.standard_normal(points) + 1j * rng.standard_normal(points)
    kv = rng.standard_normal(points) + 1j * rng.standard_normal(points)
    km = rng.standard_normal(points) + 1j * rng.standard_normal(points)
    dual = cl.dual_stage_map(gv, gm, kv, km, gm, omega=om)
    s_product = 1.0 / ((1.0 + gv * kv) * (1.0 + gm * km))
    assert np.allclose(dual.get("e", "r"), s_product, atol=1e-11)


def test_single_stage_degenerate_case():
    rng = np.random.default_rng(44)
    points = 5
    gv = rng.standard_normal(points) + 1j * rng.standard_normal(points)
    kv = rng.standard_normal(points) + 1j * rng.standard_normal(points)
    zero = np.zeros(points)
    single = cl.dual_stage_map(gv, zero, kv, zero, zero)
    assert np.allclose(single.get("e", "r"), 1.0 / (1.0 + gv * kv), atol=1e-12)
    assert np.allclose(single.get("u_v", "n"), kv / (1.0 + gv * kv), atol=1e-12)


def test_export_entry_csv(tmp_path):
    pf, cf, _, _, _ = _random_loop(11)
    table = cl.closed_loop(pf, cf, 0)
    out = tmp_path / "entry.csv"
    cl.export_entry_csv(table, "e_from_r", out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "freq_hz,mag_db,phase_deg"
    assert len(lines) == len(pf.grid) + 1
    with pytest.raises(ValueError, match="not scalar"):
        cl.export_entry_csv(table, "u_from_w", out)
