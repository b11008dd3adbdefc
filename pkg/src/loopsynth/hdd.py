"""Synthetic dual-stage track-following study.

Measured drive responses are proprietary, so the study runs on a seeded
synthetic family shaped like them: a coarse actuator that rolls off like a
double integrator into a handful of lightly damped modes, and a fine
actuator that stays flat until its own modes take over.  Five perturbed
samples per actuator stand in for unit-to-unit spread.  Over that family
the study compares two strategies on identical constraint sets: a
composite controller synthesized across both actuators at once, and a
two-step sequence that closes the coarse loop first and designs the fine
loop against the resulting equivalent plant.  Scenario rows sweep the
fine-stage output budget; the comparison report tracks how error
variances, control budgets, and margins move in response.

Every curve beyond the measurements themselves (noise coloring, shaping
weights) is a demo asset defined in this file and versioned with the code.
Absolute variances are therefore arbitrary; the relationships between
scenarios are the product.

Actuator outputs are expressed in units of 10 nm, controller outputs in
volts.  Fine-stage output budgets are quoted in nm^2 at the interface and
converted once, in :func:`eta_ym_internal`.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import pathlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from loopsynth.analysis import (
    MarginReport,
    cascade_characteristic,
    dual_characteristic,
    export_margin_csv,
    h2_norm_sq,
    margins,
    pole_check,
    worst_case,
)
from loopsynth.driver import (
    LoopBinding,
    RunTrace,
    SynthesisProblem,
    VerificationReport,
    run,
    verify_design,
)
from loopsynth.factorization import (
    ControllerParameterization,
    ControllerStructure,
    factorize_stable,
    save_controller,
)
from loopsynth.frd import (
    FrdMeasurement,
    FrdSet,
    FrequencyGrid,
    evaluate_rational,
    make_linear_grid,
    save_frd_set,
)
from loopsynth.h2 import H2TermSpec
from loopsynth.hinf import HinfConstraintSpec
from loopsynth.paths import SequentialStage2, vcm_stage_loop

__all__ = [
    "SAMPLE_RATE_HZ",
    "INTEGRATOR_ALPHA",
    "active_profile",
    "design_grid",
    "Rational",
    "PlantTruth",
    "generate_family",
    "DemoSpectra",
    "DemoWeights",
    "DesignScenario",
    "scenario_table",
    "eta_ym_internal",
    "build_single_stage_problem",
    "build_dual_stage_problem",
    "decompose_simo",
    "DecompositionSingularError",
    "SensitivityDecouplingStructure",
    "dual_sensitivity_factors",
    "ScenarioResult",
    "ScenarioComparison",
    "run_scenarios",
]

# 19 kHz sits just under Nyquist: the stability argument reads the winding
# of D off the grid, so the band has to exhaust the sampled frequency axis
SAMPLE_RATE_HZ = 38_400.0
BAND_HZ = (10.0, 19_000.0)
INTEGRATOR_ALPHA = 0.9988
ITERATIONS = 10

_PROFILES = ("full", "fast")
_GRID_POINTS = {"full": 200, "fast": 50}
_COMPOSITE_ORDER = {"full": 25, "fast": 8}
_STAGE1_ORDER = {"full": 16, "fast": 6}
_STAGE2_ORDER = {"full": 20, "fast": 8}

# Fine-stage outputs are measured in units of 10 nm; budgets arrive in nm^2.
OUTPUT_UNIT_NM = 10.0


def active_profile(override: str | None = None) -> str:
    """Resolve the run profile: explicit argument, else LOOP_PROFILE, else full."""
    name = override or os.environ.get("LOOP_PROFILE", "full")
    if name not in _PROFILES:
        raise ValueError(f"unknown profile {name!r}, expected one of {_PROFILES}")
    return name


def design_grid(profile: str | None = None) -> FrequencyGrid:
    """The design band: 10 Hz to 19 kHz, linear on the full profile.

    The coarse profile keeps the point count but trades spacing: a linear
    50-point grid leaves a single sample under 400 Hz, and the winding
    argument collapses inside a gap that wide, so the servo band is covered
    logarithmically before the grid goes linear out to the band edge.
    """
    prof = active_profile(profile)
    count = _GRID_POINTS[prof]
    if prof == "fast":
        low = np.geomspace(BAND_HZ[0], 2_000.0, 20, endpoint=False)
        high = np.linspace(2_050.0, BAND_HZ[1], count - 20)
        return FrequencyGrid(np.concatenate([low, high]), SAMPLE_RATE_HZ)
    return make_linear_grid(BAND_HZ[0], BAND_HZ[1], count, SAMPLE_RATE_HZ)


def eta_ym_internal(eta_nm2: float) -> float:
    """Convert a fine-stage output budget from nm^2 to internal (10 nm)^2."""
    eta = float(eta_nm2)
    if not np.isfinite(eta) or eta <= 0.0:
        raise ValueError(f"output budget must be positive, got {eta_nm2}")
    return eta / OUTPUT_UNIT_NM**2


# --------------------------------------------------------------------------
# synthetic measurement family


@dataclasses.dataclass(frozen=True)
class Rational:
    """Polynomial ratio in z, coefficients in descending powers."""

    num: np.ndarray
    den: np.ndarray
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "num", np.atleast_1d(np.asarray(self.num, dtype=float)))
        object.__setattr__(self, "den", np.atleast_1d(np.asarray(self.den, dtype=float)))
        if not np.any(self.den):
            raise ValueError("rational denominator is identically zero")

    def evaluate(self, omega: np.ndarray) -> np.ndarray:
        return evaluate_rational(self.num, self.den, np.asarray(omega, dtype=float))


def unit_delay() -> Rational:
    return Rational(np.array([1.0]), np.array([1.0, 0.0]), label="unit-delay")


@dataclasses.dataclass(frozen=True)
class PlantTruth:
    """The rational models behind the emitted measurements, per actuator."""

    vcm: tuple[Rational, ...]
    ma: tuple[Rational, ...]


@dataclasses.dataclass(frozen=True)
class _Mode:
    f_hz: float
    zeta_pole: float
    zeta_zero: float


def _matched_pair(f_hz: float, zeta: float, fs: float) -> np.ndarray:
    """Monic quadratic carrying the sampled images of a continuous mode pair."""
    w = 2.0 * np.pi * f_hz
    s = complex(-zeta * w, w * np.sqrt(max(1.0 - zeta * zeta, 0.0)))
    p = np.exp(s / fs)
    return np.array([1.0, -2.0 * p.real, abs(p) ** 2])


def _mode_section(mode: _Mode, fs: float) -> tuple[np.ndarray, np.ndarray]:
    den = _matched_pair(mode.f_hz, mode.zeta_pole, fs)
    num = _matched_pair(mode.f_hz, mode.zeta_zero, fs)
    # unit static gain so sections only sculpt their own neighborhood
    num = num * (np.polyval(den, 1.0) / np.polyval(num, 1.0))
    return num, den


def _perturbed(rng: np.random.Generator, mode: _Mode) -> _Mode:
    f = mode.f_hz * (1.0 + 0.10 * rng.uniform(-1.0, 1.0))
    d = 1.0 + 0.50 * rng.uniform(-1.0, 1.0)
    # the floor keeps a mode resolvable on the coarse grid
    return _Mode(f, max(mode.zeta_pole * d, 0.02), max(mode.zeta_zero * d, 0.02))


def initial_stabilizer() -> Rational:
    """Low-bandwidth lead closing the loop the coarse stage is measured in.

    A double integrator has no open-loop frequency response to measure, so
    the coarse-actuator data sets are taken around this working servo and
    unwrapped through it.  Crossover sits near 300 Hz with roughly 55
    degrees of lead, low enough that the resonant modes keep about a
    factor-of-two gain margin for every draw the generator produces.
    """
    fs = SAMPLE_RATE_HZ
    zl = float(np.exp(-2.0 * np.pi * 150.0 / fs))
    pl = float(np.exp(-2.0 * np.pi * 2500.0 / fs))
    lead = Rational(np.array([1.0, -zl]), np.array([1.0, -pl]))
    f_cross = 300.0
    mag = abs(lead.evaluate(np.array([2.0 * np.pi * f_cross / fs]))[0])
    # the rigid body nominally crosses unity at 1 kHz, falling 40 dB/decade
    gain = (f_cross / 1000.0) ** 2 / mag
    return Rational(gain * lead.num, lead.den, label="vcm-stabilizer")


def _assemble(
    modes: tuple[_Mode, ...],
    fs: float,
    rigid: np.ndarray | None,
    gain_at: tuple[float, float],
    label: str,
) -> Rational:
    num = np.array([1.0])
    den = np.array([1.0]) if rigid is None else rigid
    for mode in modes:
        sec_num, sec_den = _mode_section(mode, fs)
        num = np.polymul(num, sec_num)
        den = np.polymul(den, sec_den)
    den = np.polymul(den, np.array([1.0, 0.0]))  # one-sample computational delay
    f_ref, target = gain_at
    raw = evaluate_rational(num, den, np.array([2.0 * np.pi * f_ref / fs]))[0]
    return Rational(num * (target / abs(raw)), den, label=label)


def generate_family(
    seed: int = 0, l: int = 5, grid: FrequencyGrid | None = None
) -> tuple[FrdSet, FrdSet, PlantTruth]:
    """Draw the measurement family: l samples per actuator plus their models.

    The coarse actuator is a rigid-body double integrator behind 3 to 5
    modes; the fine actuator is a gain into 2 or 3 modes.  Each measurement
    perturbs mode frequencies by up to 10 percent and dampings by up to 50
    percent, with a drawn gain spread, so the family behaves like repeated
    measurements of slightly different units.  Every coarse draw is checked
    against the working-loop stabilizer and redrawn if it falls outside
    that loop's margins.  Everything is a deterministic function of the
    seed.
    """
    if l < 1:
        raise ValueError("the family needs at least one measurement per actuator")
    grid = grid if grid is not None else design_grid("full")
    fs = grid.sample_rate_hz
    rng = np.random.default_rng(seed)
    k0 = initial_stabilizer()

    rigid = np.array([1.0, -2.0, 1.0])  # (z - 1)^2
    count_v = int(rng.integers(3, 6))
    freqs_v = np.sort(rng.uniform(2400.0, 16500.0, count_v))
    modes_v = []
    for f in freqs_v:
        zp = rng.uniform(0.03, 0.07)
        ratio = rng.uniform(2.0, 4.5)
        if rng.random() < 0.35:
            modes_v.append(_Mode(float(f), zp * ratio, zp))  # anti-resonant dip
        else:
            modes_v.append(_Mode(float(f), zp, zp * ratio))  # resonant peak
    count_m = int(rng.integers(2, 4))
    freqs_m = np.sort(rng.uniform(8500.0, 17000.0, count_m))
    modes_m = [
        _Mode(float(f), rng.uniform(0.03, 0.06), rng.uniform(0.10, 0.25)) for f in freqs_m
    ]
    gain_v = rng.uniform(0.9, 1.1)
    gain_m = rng.uniform(0.9, 1.1)

    vcm_models, ma_models = [], []
    for i in range(l):
        for _ in range(20):
            pv = tuple(_perturbed(rng, m) for m in modes_v)
            gv = gain_v * (1.0 + 0.10 * rng.uniform(-1.0, 1.0))
            model = _assemble(pv, fs, rigid, (1000.0, gv), label=f"vcm{i}")
            char = cascade_characteristic(model.num, model.den, k0.num, k0.den)
            if pole_check(char).stable:
                break
        else:
            raise ArithmeticError(
                f"seed {seed}: no coarse-actuator draw stayed inside the "
                "working-loop margins after 20 tries"
            )
        vcm_models.append(model)
        pm = tuple(_perturbed(rng, m) for m in modes_m)
        gm = gain_m * (1.0 + 0.10 * rng.uniform(-1.0, 1.0))
        ma_models.append(_assemble(pm, fs, None, (100.0, gm), label=f"ma{i}"))

    def frd_set(models: list[Rational], label: str) -> FrdSet:
        meas = tuple(
            FrdMeasurement(grid, m.evaluate(grid.omega).reshape(-1, 1, 1)) for m in models
        )
        return FrdSet(label, meas)

    truth = PlantTruth(tuple(vcm_models), tuple(ma_models))
    return frd_set(vcm_models, "vcm"), frd_set(ma_models, "ma"), truth


# --------------------------------------------------------------------------
# demo assets: noise coloring and shaping weights


@dataclasses.dataclass(frozen=True)
class DemoSpectra:
    """Noise coloring filters, sampled on demand.

    Demo assets, not measurements: the track disturbance falls off past a
    low corner but keeps a broadband floor so the fine stage has work to
    do, and the position sensor contributes a flat term.  Levels are in
    output units (10 nm).
    """

    # the corner sits well inside the sampled band so the variance mass
    # spreads over many grid points even on the coarse profile; pushing it
    # low would reward notches the grid cannot see
    runout_level: float = 20.0
    runout_corner_hz: float = 900.0
    runout_floor: float = 0.8
    sensor_level: float = 0.35

    def runout(self, grid: FrequencyGrid) -> np.ndarray:
        f = grid.freqs_hz
        return self.runout_level / np.sqrt(1.0 + (f / self.runout_corner_hz) ** 2) + self.runout_floor

    def sensor(self, grid: FrequencyGrid) -> np.ndarray:
        return np.full(len(grid), self.sensor_level)


def _rising_bound(freqs: np.ndarray, peak: float, bw_hz: float) -> np.ndarray:
    """Allowed magnitude: climbs linearly in f to ``peak`` at ``bw_hz``, flat after."""
    return peak * np.minimum(1.0, freqs / bw_hz)


# Fixed matrix shaping for the dual-stage overall constraint set.
DUAL_ERROR_DISTURBANCE_WEIGHT = np.array([[0.10], [0.10]])
DUAL_CONTROL_REFERENCE_WEIGHT = np.diag([0.10, 0.10])
DUAL_CONTROL_DISTURBANCE_WEIGHT = np.array([[0.10, 0.10], [0.04, 0.10]])


@dataclasses.dataclass(frozen=True)
class DemoWeights:
    """Scalar shaping curves for the norm constraints, all enforced at 1.

    Demo assets: the caps are sized so the pure feasibility stage clears
    with room to spare on the default family, leaving the later iterations
    free to trade error variance against the budgets.  ``*_cap`` values are
    allowed closed-loop magnitudes; weights are their reciprocals.
    """

    single_peak: float = 2.0
    single_bw_hz: float = 350.0
    single_control_cap: float = 2.5
    single_control_roll_hz: float = 8000.0
    single_load_error_cap: float = 4.0
    single_complement_cap: float = 1.4
    dual_peak: float = 2.5
    dual_bw_hz: float = 700.0
    vcm_control_cap: float = 3.0
    ma_control_cap: float = 8.0
    vcm_load_error_cap: float = 5.0
    ma_load_error_cap: float = 3.0

    def sensitivity_single(self, grid: FrequencyGrid) -> np.ndarray:
        return 1.0 / _rising_bound(grid.freqs_hz, self.single_peak, self.single_bw_hz)

    def control_single(self, grid: FrequencyGrid) -> np.ndarray:
        # caps |K S|; the rise past the roll frequency pulls the compensator down
        f = grid.freqs_hz
        return np.sqrt(1.0 + (f / self.single_control_roll_hz) ** 2) / self.single_control_cap

    def sensitivity_dual(self, grid: FrequencyGrid) -> np.ndarray:
        return 1.0 / _rising_bound(grid.freqs_hz, self.dual_peak, self.dual_bw_hz)


# --------------------------------------------------------------------------
# scenarios


@dataclasses.dataclass(frozen=True)
class DesignScenario:
    """One row of the comparison study.

    ``eta_ym_nm2`` budgets the fine-stage output variance in nm^2;
    ``eta_uv`` and ``eta_uv_single`` budget the coarse-stage command
    variance (V^2) in the dual-stage and fallback loops respectively.
    """

    name: str
    strategy: str
    eta_ym_nm2: float
    eta_uv: float = 4.0
    eta_uv_single: float = 4.0
    weights: DemoWeights = dataclasses.field(default_factory=DemoWeights)
    spectra: DemoSpectra = dataclasses.field(default_factory=DemoSpectra)

    def __post_init__(self):
        if self.strategy not in ("simo", "sequential"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        for field in ("eta_ym_nm2", "eta_uv", "eta_uv_single"):
            value = getattr(self, field)
            if not np.isfinite(value) or value <= 0.0:
                raise ValueError(f"{field} must be positive, got {value}")


def scenario_table() -> tuple[DesignScenario, ...]:
    """The five study rows: four composite designs sweeping the fine-stage
    budget, plus one sequential design at the loosest level."""
    levels = (44.0, 42.0, 40.0, 38.0)
    rows = tuple(
        DesignScenario(f"simo{k + 1}", "simo", eta_ym_nm2=lvl**2)
        for k, lvl in enumerate(levels)
    )
    return rows + (DesignScenario("siso1", "sequential", eta_ym_nm2=levels[0] ** 2),)


# --------------------------------------------------------------------------
# problem builders


def _check_family(vcm_set: FrdSet, ma_set: FrdSet) -> None:
    if not vcm_set.grid.matches(ma_set.grid):
        raise ValueError("coarse and fine measurement sets live on different grids")
    if len(vcm_set) != len(ma_set):
        raise ValueError("coarse and fine sets pair measurements one to one")


def _error_terms(spectra: DemoSpectra, grid: FrequencyGrid, loop: str = "") -> tuple:
    r, n = spectra.runout(grid), spectra.sensor(grid)
    return (
        H2TermSpec("e_from_r", spectrum=r, label=f"{loop or 'primary'}:error*runout", loop=loop),
        H2TermSpec("e_from_n", spectrum=n, label=f"{loop or 'primary'}:error*sensor", loop=loop),
    )


def build_single_stage_problem(
    vcm_set: FrdSet, scenario: DesignScenario, profile: str | None = None
) -> SynthesisProblem:
    """Coarse-loop-only design: shape its sensitivity, budget its command."""
    profile = active_profile(profile)
    grid = vcm_set.grid
    pf = factorize_stable(vcm_set)
    structure = ControllerStructure(1, _STAGE1_ORDER[profile], "integrator", INTEGRATOR_ALPHA)
    w, sp = scenario.weights, scenario.spectra
    specs = (
        HinfConstraintSpec("e_from_r", weight=w.sensitivity_single(grid), label="single:sensitivity"),
        HinfConstraintSpec("u_from_r", weight=w.control_single(grid), label="single:control"),
        HinfConstraintSpec("e_from_w", weight=1.0 / w.single_load_error_cap, label="single:load-error"),
        HinfConstraintSpec("u_from_w", weight=1.0 / w.single_complement_cap, label="single:complement"),
    )
    r, n = sp.runout(grid), sp.sensor(grid)
    budget = (
        (
            H2TermSpec("u_from_r", spectrum=r, label="single:control*runout"),
            H2TermSpec("u_from_n", spectrum=n, label="single:control*sensor"),
        ),
        scenario.eta_uv_single,
    )
    return SynthesisProblem(
        pf,
        structure,
        specs,
        h2_objective=_error_terms(sp, grid),
        h2_constraints=(budget,),
        iterations=ITERATIONS,
    )


def _dual_specs(w: DemoWeights, grid: FrequencyGrid) -> tuple:
    return (
        HinfConstraintSpec("e_from_r", weight=w.sensitivity_dual(grid), label="dual:sensitivity"),
        HinfConstraintSpec("u_from_r", weight=DUAL_CONTROL_REFERENCE_WEIGHT, label="dual:control"),
        HinfConstraintSpec("e_from_w", weight=DUAL_ERROR_DISTURBANCE_WEIGHT, label="dual:load-error"),
        HinfConstraintSpec("u_from_w", weight=DUAL_CONTROL_DISTURBANCE_WEIGHT, label="dual:load-control"),
        HinfConstraintSpec("u_from_r[0]", weight=1.0 / w.vcm_control_cap, label="dual:vcm-control"),
        HinfConstraintSpec("u_from_r[1]", weight=1.0 / w.ma_control_cap, label="dual:ma-control"),
        HinfConstraintSpec("e_from_w[0]", weight=1.0 / w.vcm_load_error_cap, label="dual:vcm-load-error"),
        HinfConstraintSpec("e_from_w[1]", weight=1.0 / w.ma_load_error_cap, label="dual:ma-load-error"),
    )


def _dual_budgets(scenario: DesignScenario, grid: FrequencyGrid) -> tuple:
    sp = scenario.spectra
    r, n = sp.runout(grid), sp.sensor(grid)
    uv = (
        (
            H2TermSpec("u_from_r[0]", spectrum=r, label="dual:vcm-control*runout"),
            H2TermSpec("u_from_n[0]", spectrum=n, label="dual:vcm-control*sensor"),
        ),
        scenario.eta_uv,
    )
    ym = (
        (
            H2TermSpec("ysplit_from_r[1]", spectrum=r, label="dual:ma-output*runout"),
            H2TermSpec("ysplit_from_n[1]", spectrum=n, label="dual:ma-output*sensor"),
        ),
        eta_ym_internal(scenario.eta_ym_nm2),
    )
    return uv, ym


def build_dual_stage_problem(
    vcm_set: FrdSet,
    ma_set: FrdSet,
    scenario: DesignScenario,
    kv: ControllerParameterization | None = None,
    ghat: Rational | None = None,
    profile: str | None = None,
) -> SynthesisProblem:
    """Dual-stage design over both actuators.

    With ``kv`` omitted the problem is the one-shot composite design: a
    two-output compensator constrained on the dual-stage loop and, through
    a secondary binding, on the fallback loop where the fine stage is dead.
    With ``kv`` given the coarse compensator is frozen and the problem
    designs the fine compensator around the closed equivalent plant.
    """
    _check_family(vcm_set, ma_set)
    profile = active_profile(profile)
    grid = vcm_set.grid
    ghat = ghat if ghat is not None else unit_delay()
    w, sp = scenario.weights, scenario.spectra
    gv = vcm_set.stacked()[:, :, 0, 0]
    gm = ma_set.stacked()[:, :, 0, 0]
    specs = _dual_specs(w, grid)
    objective = _error_terms(sp, grid)
    uv, ym = _dual_budgets(scenario, grid)

    if kv is None:
        stacked = np.concatenate([vcm_set.stacked(), ma_set.stacked()], axis=3)
        dual_set = FrdSet(
            "dual", tuple(FrdMeasurement(grid, resp) for resp in stacked)
        )
        pf = factorize_stable(dual_set)
        structure = ControllerStructure(
            2, _COMPOSITE_ORDER[profile], "integrator", INTEGRATOR_ALPHA
        )
        pf_fallback = factorize_stable(vcm_set)

        def fallback_geometry(pf_, st):
            return vcm_stage_loop(pf_, st, ghat.evaluate(pf_.grid.omega))

        fb = "vcm_fallback"
        r, n = sp.runout(grid), sp.sensor(grid)
        fallback_specs = (
            HinfConstraintSpec(
                "e_from_r", weight=w.sensitivity_single(grid), label="single:sensitivity", loop=fb
            ),
            HinfConstraintSpec(
                "u_from_r", weight=w.control_single(grid), label="single:control", loop=fb
            ),
            HinfConstraintSpec(
                "e_from_w", weight=1.0 / w.single_load_error_cap, label="single:load-error", loop=fb
            ),
            HinfConstraintSpec(
                "u_from_w", weight=1.0 / w.single_complement_cap, label="single:complement", loop=fb
            ),
        )
        uv_single = (
            (
                H2TermSpec("u_from_r", spectrum=r, label="single:control*runout", loop=fb),
                H2TermSpec("u_from_n", spectrum=n, label="single:control*sensor", loop=fb),
            ),
            scenario.eta_uv_single,
        )
        return SynthesisProblem(
            pf,
            structure,
            specs + fallback_specs,
            h2_objective=objective,
            h2_constraints=(uv, ym, uv_single),
            loops=(LoopBinding(fb, pf_fallback, fallback_geometry),),
            iterations=ITERATIONS,
        )

    x_nums, y_num = kv.controller_rational()
    if kv.structure.outputs != 1:
        raise ValueError("the frozen coarse compensator must have one output")
    kv_resp = evaluate_rational(x_nums[0], y_num, grid.omega)
    ghat_resp = ghat.evaluate(grid.omega)
    den = 1.0 + gv * kv_resp[None]
    if np.any(np.abs(den) < 1e-9):
        raise ValueError("frozen coarse loop has a near-singular return difference on the grid")
    geq = (gm + gv * kv_resp[None] * ghat_resp[None]) / den
    geq_set = FrdSet(
        "stage2-equivalent",
        tuple(FrdMeasurement(grid, row.reshape(-1, 1, 1)) for row in geq),
    )
    geq_pf = factorize_stable(geq_set)
    structure = ControllerStructure(1, _STAGE2_ORDER[profile], "fir")

    def stage2_geometry(pf_, st):
        return SequentialStage2(pf_, st, kv_resp, gv, gm, ghat_resp)

    return SynthesisProblem(
        None,
        structure,
        specs,
        h2_objective=objective,
        h2_constraints=(uv, ym),
        loops=(LoopBinding("", geq_pf, stage2_geometry),),
        iterations=ITERATIONS,
    )


# --------------------------------------------------------------------------
# the composite wiring and its decomposition


class DecompositionSingularError(ArithmeticError):
    """The fine-loop return difference vanishes: no coarse compensator exists."""


def decompose_simo(
    kbar: ControllerParameterization, grid: FrequencyGrid, ghat: Rational | None = None
) -> tuple[Rational, Rational]:
    """Split a two-output compensator into its coarse and fine parts.

    The fine part is the second row; the coarse part divides the first row
    by the fine loop closed through the model estimate.  Recomposition is
    verified on the grid before returning.
    """
    if kbar.structure.outputs != 2:
        raise ValueError("decomposition expects a two-output compensator")
    ghat = ghat if ghat is not None else unit_delay()
    x_nums, y_num = kbar.controller_rational()
    km = Rational(x_nums[1], y_num, label="stage2")
    kv_num = np.polymul(x_nums[0], ghat.den)
    kv_den = np.polyadd(np.polymul(y_num, ghat.den), np.polymul(x_nums[1], ghat.num))
    omega = grid.omega
    inner = 1.0 + km.evaluate(omega) * ghat.evaluate(omega)
    if np.min(np.abs(inner)) < 1e-9:
        f_bad = grid.freqs_hz[int(np.argmin(np.abs(inner)))]
        raise DecompositionSingularError(
            f"1 + K_m Ghat_m passes through zero near {f_bad:.1f} Hz"
        )
    kv = Rational(kv_num, kv_den, label="stage1")
    k1 = kv.evaluate(omega) * inner
    k1_direct = evaluate_rational(x_nums[0], y_num, omega)
    scale = np.max(np.abs(k1_direct)) or 1.0
    if np.max(np.abs(k1 - k1_direct)) > 1e-10 * scale:
        raise ArithmeticError("recomposed coarse row drifted from the composite row")
    return kv, km


@dataclasses.dataclass(frozen=True)
class SensitivityDecouplingStructure:
    """The two compensators in their composite wiring.

    The coarse command is formed from the loop input plus the fine stage's
    estimated output, so the pair acts on the plant exactly like the
    two-output compensator rows K1 = K_v (1 + K_m Ghat_m) and K2 = K_m.
    Killing the fine stage leaves K_v alone in the coarse loop, which is
    what makes the fallback loop of the composite design meaningful.
    """

    kv: Rational
    km: Rational
    ghat: Rational = dataclasses.field(default_factory=unit_delay)

    @classmethod
    def from_composite(
        cls,
        kbar: ControllerParameterization,
        grid: FrequencyGrid,
        ghat: Rational | None = None,
    ) -> "SensitivityDecouplingStructure":
        ghat = ghat if ghat is not None else unit_delay()
        kv, km = decompose_simo(kbar, grid, ghat)
        return cls(kv, km, ghat)

    def composite_response(self, omega: np.ndarray) -> np.ndarray:
        """Rows of the equivalent two-output compensator, shape (2, F)."""
        omega = np.asarray(omega, dtype=float)
        km = self.km.evaluate(omega)
        k1 = self.kv.evaluate(omega) * (1.0 + km * self.ghat.evaluate(omega))
        return np.stack([k1, km])

    def composite_rational(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(first-row numerator, second-row numerator, shared denominator)."""
        den = np.polymul(self.kv.den, np.polymul(self.km.den, self.ghat.den))
        inner = np.polyadd(
            np.polymul(self.km.den, self.ghat.den), np.polymul(self.km.num, self.ghat.num)
        )
        k1 = np.polymul(self.kv.num, inner)
        k2 = np.polymul(self.km.num, np.polymul(self.kv.den, self.ghat.den))
        return k1, k2, den


def dual_sensitivity_factors(
    parts: SensitivityDecouplingStructure,
    gv_row: np.ndarray,
    gm_row: np.ndarray,
    omega: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dual-loop, coarse-loop, fine-loop) sensitivities for one measurement.

    When the model estimate matches the true fine actuator, the first
    equals the product of the other two sample by sample; that identity is
    the point of the wiring.
    """
    k1, k2 = parts.composite_response(omega)
    s_dual = 1.0 / (1.0 + gv_row * k1 + gm_row * k2)
    s_v = 1.0 / (1.0 + gv_row * parts.kv.evaluate(omega))
    s_m = 1.0 / (1.0 + gm_row * parts.km.evaluate(omega))
    return s_dual, s_v, s_m


# --------------------------------------------------------------------------
# scenario execution and reporting


def _path_h2(geom, rho: np.ndarray, path: str, spectrum: np.ndarray) -> float:
    """Average squared norm of one colored scalar path at a design point."""
    num = geom.numerator(path).gain(rho)
    d = np.abs(geom.denominator().evaluate(rho))
    mag = num / d * np.abs(np.asarray(spectrum))[None, :]
    omega = geom.grid.omega
    return float(np.mean([h2_norm_sq(omega, row) for row in mag]))


def _margin_set(loops: np.ndarray, grid: FrequencyGrid) -> list[MarginReport]:
    return [margins(row, grid.freqs_hz) for row in loops]


@dataclasses.dataclass(frozen=True)
class ScenarioResult:
    """Everything one scenario produced, ready for comparison and emission."""

    scenario: DesignScenario
    controllers: dict[str, ControllerParameterization]
    parts: SensitivityDecouplingStructure
    traces: dict[str, RunTrace]
    verifications: dict[str, VerificationReport]
    variances: dict[str, float]
    margin_reports_single: tuple[MarginReport, ...]
    margin_reports_dual: tuple[MarginReport, ...]
    poles_single: tuple[bool, ...]
    poles_dual: tuple[bool, ...]

    def constraints_ok(self) -> bool:
        # gamma and budget rows only; the winding verdicts inside the
        # reports go untrusted on coarse grids and stability is decided
        # by the pole checks against the truth models instead
        return all(
            row.ok
            for rep in self.verifications.values()
            for row in (*rep.hinf, *rep.h2_budgets)
        )

    @property
    def ok(self) -> bool:
        return (
            self.constraints_ok()
            and all(self.poles_single)
            and all(self.poles_dual)
        )

    def row(self) -> dict:
        """Flat summary: root variances in physical units, margins, verdicts."""
        wc_s = worst_case(list(self.margin_reports_single))
        wc_d = worst_case(list(self.margin_reports_dual))
        v = self.variances
        return {
            "name": self.scenario.name,
            "strategy": self.scenario.strategy,
            "eta_ym_nm2": self.scenario.eta_ym_nm2,
            "dual_error_rms_nm": OUTPUT_UNIT_NM * float(np.sqrt(v["dual_error"])),
            "single_error_rms_nm": OUTPUT_UNIT_NM * float(np.sqrt(v["single_error"])),
            "ma_output_rms_nm": OUTPUT_UNIT_NM * float(np.sqrt(v["ma_output"])),
            "vcm_control_rms_v": float(np.sqrt(v["vcm_control"])),
            "single_control_rms_v": float(np.sqrt(v["single_control"])),
            "worst_gain_margin_db_single": wc_s.gain_margin_db,
            "worst_phase_margin_deg_single": wc_s.phase_margin_deg,
            "worst_gain_margin_db_dual": wc_d.gain_margin_db,
            "worst_phase_margin_deg_dual": wc_d.phase_margin_deg,
            "constraints_ok": self.constraints_ok(),
            "poles_ok": all(self.poles_single) and all(self.poles_dual),
        }


@dataclasses.dataclass(frozen=True)
class ScenarioComparison:
    """The study's product: per-scenario results plus cross-scenario trends."""

    results: tuple[ScenarioResult, ...]
    profile: str
    seed: int

    def rows(self) -> list[dict]:
        return [r.row() for r in self.results]

    def trends(self) -> dict[str, bool]:
        """Orderings the study is expected to exhibit on the default family.

        Tightening the fine-stage budget forces the coarse loop to carry
        more of the error, so the fallback loop improves while its command
        grows; designing both stages at once beats freezing the coarse
        stage first.
        """
        simo = [r for r in self.results if r.scenario.strategy == "simo"]
        simo.sort(key=lambda r: -r.scenario.eta_ym_nm2)
        seq = [r for r in self.results if r.scenario.strategy == "sequential"]
        single = [r.variances["single_error"] for r in simo]
        control = [r.variances["single_control"] for r in simo]
        out = {}
        if len(single) > 1:
            out["single_error_decreases_as_budget_tightens"] = all(
                b < a for a, b in zip(single, single[1:])
            )
            out["single_control_grows_as_budget_tightens"] = all(
                b > a for a, b in zip(control, control[1:])
            )
        if simo and seq:
            out["composite_dual_error_below_sequential"] = max(
                r.variances["dual_error"] for r in simo
            ) < min(r.variances["dual_error"] for r in seq)
        return out

    def to_json(self, indent: int = 2) -> str:
        payload = {
            "profile": self.profile,
            "seed": self.seed,
            "scenarios": self.rows(),
            "trends": self.trends(),
        }
        return json.dumps(payload, indent=indent)


def _run_one(
    scenario: DesignScenario,
    vcm_set: FrdSet,
    ma_set: FrdSet,
    truth: PlantTruth,
    profile: str,
    policy,
) -> ScenarioResult:
    grid = vcm_set.grid
    sp = scenario.spectra
    r_spec, n_spec = sp.runout(grid), sp.sensor(grid)
    gv = vcm_set.stacked()[:, :, 0, 0]
    gm = ma_set.stacked()[:, :, 0, 0]

    if scenario.strategy == "simo":
        problem = build_dual_stage_problem(vcm_set, ma_set, scenario, profile=profile)
        kbar, trace = run(problem, policy)
        verifications = {"dual": verify_design(kbar, problem, policy=policy)}
        parts = SensitivityDecouplingStructure.from_composite(kbar, grid)
        controllers = {"composite": kbar}
        traces = {"dual": trace}
        rho = kbar.rho()
        primary = problem.loops[0].build(problem.loops[0].pf, problem.structure)
        fallback = problem.loops[1].build(problem.loops[1].pf, problem.structure)
        dual_geom, single_geom, single_rho = primary, fallback, rho
    else:
        stage1 = build_single_stage_problem(vcm_set, scenario, profile=profile)
        kv_param, trace1 = run(stage1, policy)
        stage2 = build_dual_stage_problem(vcm_set, ma_set, scenario, kv=kv_param, profile=profile)
        km_param, trace2 = run(stage2, policy)
        verifications = {
            "single": verify_design(kv_param, stage1, policy=policy),
            "dual": verify_design(km_param, stage2, policy=policy),
        }
        xk, yk = kv_param.controller_rational()
        xm, ym = km_param.controller_rational()
        parts = SensitivityDecouplingStructure(
            Rational(xk[0], yk, "stage1"), Rational(xm[0], ym, "stage2")
        )
        controllers = {"stage1": kv_param, "stage2": km_param}
        traces = {"single": trace1, "dual": trace2}
        rho = km_param.rho()
        dual_geom = stage2.loops[0].build(stage2.loops[0].pf, stage2.structure)
        single_geom = stage1.loops[0].build(stage1.loops[0].pf, stage1.structure)
        single_rho = kv_param.rho()

    variances = {
        "dual_error": _path_h2(dual_geom, rho, "e_from_r", r_spec)
        + _path_h2(dual_geom, rho, "e_from_n", n_spec),
        "ma_output": _path_h2(dual_geom, rho, "ysplit_from_r[1]", r_spec)
        + _path_h2(dual_geom, rho, "ysplit_from_n[1]", n_spec),
        "vcm_control": _path_h2(dual_geom, rho, "u_from_r[0]", r_spec)
        + _path_h2(dual_geom, rho, "u_from_n[0]", n_spec),
        "single_error": _path_h2(single_geom, single_rho, "e_from_r", r_spec)
        + _path_h2(single_geom, single_rho, "e_from_n", n_spec),
        "single_control": _path_h2(single_geom, single_rho, "u_from_r", r_spec)
        + _path_h2(single_geom, single_rho, "u_from_n", n_spec),
    }

    omega = grid.omega
    k1, k2 = parts.composite_response(omega)
    kv_resp = parts.kv.evaluate(omega)
    margin_reports_dual = _margin_set(gv * k1[None] + gm * k2[None], grid)
    margin_reports_single = _margin_set(gv * kv_resp[None], grid)

    k1n, k2n, kden = parts.composite_rational()
    poles_single, poles_dual = [], []
    for mv, mm in zip(truth.vcm, truth.ma):
        single_char = cascade_characteristic(mv.num, mv.den, parts.kv.num, parts.kv.den)
        poles_single.append(pole_check(single_char).stable)
        dual_char = dual_characteristic(
            (mv.num, mv.den), (mm.num, mm.den), k1n, k2n, kden
        )
        poles_dual.append(pole_check(dual_char).stable)

    return ScenarioResult(
        scenario=scenario,
        controllers=controllers,
        parts=parts,
        traces=traces,
        verifications=verifications,
        variances=variances,
        margin_reports_single=tuple(margin_reports_single),
        margin_reports_dual=tuple(margin_reports_dual),
        poles_single=tuple(poles_single),
        poles_dual=tuple(poles_dual),
    )


def run_scenarios(
    scenarios: tuple[DesignScenario, ...] | None = None,
    seed: int = 0,
    l: int = 5,
    profile: str | None = None,
    out_dir: str | pathlib.Path | None = None,
    policy=None,
    max_workers: int | None = None,
) -> ScenarioComparison:
    """Run the study rows over one synthetic family and collate the report.

    Scenarios are independent, so they run on a thread pool; the heavy
    work inside each is release-the-GIL linear algebra.  With ``out_dir``
    set, the family, controllers, traces, margins, and response curves are
    written beneath it; file contents are a pure function of the inputs.
    """
    scenarios = tuple(scenarios) if scenarios is not None else scenario_table()
    if not scenarios:
        raise ValueError("the study needs at least one scenario")
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        raise ValueError("scenario names must be unique")
    profile = active_profile(profile)
    grid = design_grid(profile)
    vcm_set, ma_set, truth = generate_family(seed, l, grid)

    if max_workers == 1 or len(scenarios) == 1:
        results = [_run_one(s, vcm_set, ma_set, truth, profile, policy) for s in scenarios]
    else:
        workers = max_workers or min(len(scenarios), os.cpu_count() or 1)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(
                    lambda s: _run_one(s, vcm_set, ma_set, truth, profile, policy), scenarios
                )
            )

    comparison = ScenarioComparison(tuple(results), profile, seed)
    if out_dir is not None:
        _write_outputs(pathlib.Path(out_dir), comparison, vcm_set, ma_set, truth)
    return comparison


def _write_bode_csv(path: pathlib.Path, grid: FrequencyGrid, columns: dict) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["freq_hz"] + list(columns))
        for k, f in enumerate(grid.freqs_hz):
            writer.writerow([repr(float(f))] + [repr(float(col[k])) for col in columns.values()])


def _write_outputs(
    out_dir: pathlib.Path,
    comparison: ScenarioComparison,
    vcm_set: FrdSet,
    ma_set: FrdSet,
    truth: PlantTruth,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    family_dir = out_dir / "family"
    family_dir.mkdir(exist_ok=True)
    save_frd_set(vcm_set, family_dir / "vcm_frd.json")
    save_frd_set(ma_set, family_dir / "ma_frd.json")

    grid = vcm_set.grid
    plant_cols = {}
    for i, meas in enumerate(vcm_set.measurements):
        resp = meas.response[:, 0, 0]
        plant_cols[f"vcm{i}_mag"] = np.abs(resp)
        plant_cols[f"vcm{i}_phase_deg"] = np.degrees(np.unwrap(np.angle(resp)))
    for i, meas in enumerate(ma_set.measurements):
        resp = meas.response[:, 0, 0]
        plant_cols[f"ma{i}_mag"] = np.abs(resp)
        plant_cols[f"ma{i}_phase_deg"] = np.degrees(np.unwrap(np.angle(resp)))
    _write_bode_csv(family_dir / "plants_bode.csv", grid, plant_cols)

    gv = vcm_set.stacked()[:, :, 0, 0]
    gm = ma_set.stacked()[:, :, 0, 0]
    omega = grid.omega
    for res in comparison.results:
        sdir = out_dir / res.scenario.name
        sdir.mkdir(exist_ok=True)
        for name, param in res.controllers.items():
            save_controller(param, sdir / f"{name}.json")
        for name, trace in res.traces.items():
            (sdir / f"trace_{name}.json").write_text(trace.to_json() + "\n")
            trace.write_csv(sdir / f"trace_{name}.csv")
        for name, report in res.verifications.items():
            (sdir / f"verification_{name}.json").write_text(report.to_json() + "\n")
        with (sdir / "margins_single.csv").open("w", newline="") as fh:
            export_margin_csv(list(res.margin_reports_single), fh)
        with (sdir / "margins_dual.csv").open("w", newline="") as fh:
            export_margin_csv(list(res.margin_reports_dual), fh)

        k1, k2 = res.parts.composite_response(omega)
        kv_resp = res.parts.kv.evaluate(omega)
        cols = {"k1_mag": np.abs(k1), "k2_mag": np.abs(k2)}
        for i in range(gv.shape[0]):
            cols[f"s_dual{i}_mag"] = np.abs(1.0 / (1.0 + gv[i] * k1 + gm[i] * k2))
            cols[f"s_single{i}_mag"] = np.abs(1.0 / (1.0 + gv[i] * kv_resp))
        _write_bode_csv(sdir / "bode.csv", grid, cols)

    (out_dir / "summary.json").write_text(comparison.to_json() + "\n")
