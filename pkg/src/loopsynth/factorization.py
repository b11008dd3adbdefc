"""Stable factorizations of plant data and of the fixed controller structure.

The plant side represents each measurement G_i as a ratio of stable samples
G_i = ntilde_i / mtilde_i (ntilde is a 1 x n row over actuators, mtilde a
scalar).  The controller side is K = X Y^{-1} with X an m x 1 column and Y a
scalar, both linear in the design coefficients:

* ``fir`` structure: every entry is an FIR filter with poles at the origin,
  coefficient count order + 1 per entry.
* ``integrator`` structure: common denominator (z - alpha) z^(order-1) with
  |alpha| < 1; the first X row carries a factor z and Y carries (z - 1), so
  the first controller output K_1 = X_1 / Y contains the discrete integrator
  z/(z - 1).  Remaining X rows carry (z - 1), which cancels the integrator in
  their outputs.  Coefficient count is order per entry and Y(1) = 0 holds
  structurally.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib

import numpy as np

from loopsynth.frd import FrdSet, FrequencyGrid

__all__ = [
    "ControllerStructure",
    "ControllerParameterization",
    "ControllerFrd",
    "PlantFactorization",
    "factor_basis",
    "factorize_stable",
    "factorize_with_stabilizer",
    "factorize_marginal",
    "save_controller",
    "load_controller",
]

_KINDS = ("fir", "integrator")


@dataclasses.dataclass(frozen=True)
class ControllerStructure:
    """Shape of the controller factors: output count, order, pole placement."""

    outputs: int
    order: int
    kind: str = "fir"
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown structure kind {self.kind!r}")
        if self.outputs < 1 or self.order < 1:
            raise ValueError("outputs and order must be positive")
        if self.kind == "integrator":
            if self.alpha is None:
                raise ValueError("integrator structure requires alpha")
            if abs(self.alpha) >= 1.0:
                raise ValueError(f"|alpha| = {abs(self.alpha)} must be < 1")
        elif self.alpha is not None:
            raise ValueError("fir structure takes no alpha")

    @property
    def coeff_count(self) -> int:
        return self.order + 1 if self.kind == "fir" else self.order

    @property
    def rho_dim(self) -> int:
        return (self.outputs + 1) * self.coeff_count


def factor_basis(structure: ControllerStructure, omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Complex basis samples (bx, by) with shapes (m, F, nc) and (F, nc).

    X_j(w) = bx[j] @ rho_x[j] and Y(w) = by @ rho_y; coefficients are stored
    in descending powers of z, matching the rational export.
    """
    omega = np.asarray(omega, dtype=float)
    z = np.exp(1j * omega)
    m, nc = structure.outputs, structure.coeff_count
    if structure.kind == "fir":
        # [z^n, ..., z, 1] / z^n
        powers = np.arange(structure.order, -1, -1)
        row = z[:, None] ** powers[None, :] / (z[:, None] ** structure.order)
        bx = np.broadcast_to(row, (m, len(omega), nc)).copy()
        by = row.copy()
        return bx, by
    n = structure.order
    powers = np.arange(n - 1, -1, -1)
    mono = z[:, None] ** powers[None, :]
    denom = (z - structure.alpha) * z ** (n - 1)
    plain = mono / denom[:, None]
    bx = np.empty((m, len(omega), nc), dtype=complex)
    bx[0] = plain * z[:, None]
    for j in range(1, m):
        bx[j] = plain * (z - 1.0)[:, None]
    by = plain * (z - 1.0)[:, None]
    return bx, by


@dataclasses.dataclass(frozen=True)
class ControllerFrd:
    """Controller factor samples on a grid: x is (m, F), y is (F,)."""

    omega: np.ndarray
    x: np.ndarray
    y: np.ndarray


@dataclasses.dataclass(frozen=True)
class ControllerParameterization:
    """Coefficients of the controller factors under a fixed structure."""

    structure: ControllerStructure
    rho_x: np.ndarray
    rho_y: np.ndarray

    def __post_init__(self):
        rx = np.asarray(self.rho_x, dtype=float)
        ry = np.asarray(self.rho_y, dtype=float)
        object.__setattr__(self, "rho_x", rx)
        object.__setattr__(self, "rho_y", ry)
        m, nc = self.structure.outputs, self.structure.coeff_count
        if rx.shape != (m, nc):
            raise ValueError(f"rho_x shape {rx.shape}, expected {(m, nc)}")
        if ry.shape != (nc,):
            raise ValueError(f"rho_y shape {ry.shape}, expected {(nc,)}")

    def rho(self) -> np.ndarray:
        """Flat coefficient vector: X rows first, then Y."""
        return np.concatenate([self.rho_x.ravel(), self.rho_y])

    @classmethod
    def from_rho(cls, structure: ControllerStructure, rho: np.ndarray) -> "ControllerParameterization":
        rho = np.asarray(rho, dtype=float)
        m, nc = structure.outputs, structure.coeff_count
        if rho.shape != (structure.rho_dim,):
            raise ValueError(f"rho has {rho.shape}, expected ({structure.rho_dim},)")
        return cls(structure, rho[: m * nc].reshape(m, nc), rho[m * nc :])

    def evaluate(self, omega: np.ndarray) -> ControllerFrd:
        omega = np.asarray(omega, dtype=float)
        bx, by = factor_basis(self.structure, omega)
        x = np.einsum("jfk,jk->jf", bx, self.rho_x)
        y = by @ self.rho_y
        return ControllerFrd(omega=omega, x=x, y=y)

    # -- rational export ----------------------------------------------------

    def factor_numerators(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x_nums (m, order+1), y_num (order+1,), common_den) descending."""
        n = self.structure.order
        if self.structure.kind == "fir":
            den = np.zeros(n + 1)
            den[0] = 1.0
            return self.rho_x.copy(), self.rho_y.copy(), den
        den = np.zeros(n + 1)
        den[0] = 1.0
        den[1] = -self.structure.alpha
        x_nums = np.zeros((self.structure.outputs, n + 1))
        # row 1: z * p(z); rows >= 2 and Y: (z - 1) * p(z)
        x_nums[0, :n] = self.rho_x[0]
        for j in range(1, self.structure.outputs):
            x_nums[j] = np.convolve([1.0, -1.0], self.rho_x[j])
        y_num = np.convolve([1.0, -1.0], self.rho_y)
        return x_nums, y_num, den

    def controller_rational(self) -> tuple[list[np.ndarray], np.ndarray]:
        """K = X Y^{-1} as per-output numerators over the shared denominator.

        The structural common denominator of X and Y cancels, so K_j is the
        ratio of the X_j and Y factor numerators.
        """
        x_nums, y_num, _ = self.factor_numerators()
        return [x_nums[j].copy() for j in range(x_nums.shape[0])], y_num


def save_controller(param: ControllerParameterization, path: str | pathlib.Path) -> None:
    data = {
        "outputs": param.structure.outputs,
        "order": param.structure.order,
        "structure": param.structure.kind,
        "alpha": param.structure.alpha,
        "rho_x": param.rho_x.tolist(),
        "rho_y": param.rho_y.tolist(),
    }
    pathlib.Path(path).write_text(json.dumps(data, indent=2) + "\n")


def load_controller(path: str | pathlib.Path) -> ControllerParameterization:
    data = json.loads(pathlib.Path(path).read_text())
    structure = ControllerStructure(
        outputs=int(data["outputs"]),
        order=int(data["order"]),
        kind=str(data["structure"]),
        alpha=None if data.get("alpha") is None else float(data["alpha"]),
    )
    return ControllerParameterization(
        structure, np.asarray(data["rho_x"], dtype=float), np.asarray(data["rho_y"], dtype=float)
    )


# -- plant factorizations -----------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PlantFactorization:
    """Sampled stable factors of l plant measurements: G_i = ntilde_i / mtilde_i.

    ``ntilde`` has shape (l, F, n) over actuators, ``mtilde`` shape (l, F).
    """

    grid: FrequencyGrid
    ntilde: np.ndarray
    mtilde: np.ndarray
    label: str = ""

    def __post_init__(self):
        nt = np.asarray(self.ntilde, dtype=complex)
        mt = np.asarray(self.mtilde, dtype=complex)
        object.__setattr__(self, "ntilde", nt)
        object.__setattr__(self, "mtilde", mt)
        if nt.ndim != 3 or nt.shape[1] != len(self.grid):
            raise ValueError(f"ntilde shape {nt.shape} incompatible with grid")
        if mt.shape != nt.shape[:2]:
            raise ValueError("mtilde must be (l, F)")
        floor = 1e-14 * max(1.0, float(np.abs(nt).max()), float(np.abs(mt).max()))
        weight = np.abs(mt) ** 2 + np.sum(np.abs(nt) ** 2, axis=2)
        if np.any(weight <= floor**2):
            i, k = np.unravel_index(int(np.argmin(weight)), weight.shape)
            raise ValueError(
                f"factor pair vanishes jointly at measurement {i}, sample {k}: "
                "ntilde and mtilde share a zero"
            )

    @property
    def count(self) -> int:
        return self.ntilde.shape[0]

    @property
    def actuators(self) -> int:
        return self.ntilde.shape[2]

    def plant(self) -> np.ndarray:
        """Recover the raw responses ntilde/mtilde, shape (l, F, n)."""
        return self.ntilde / self.mtilde[:, :, None]

    def denominators(self, cf: ControllerFrd) -> np.ndarray:
        """D_i(w) = ntilde_i X + mtilde_i Y, shape (l, F)."""
        return np.einsum("lfn,nf->lf", self.ntilde, cf.x) + self.mtilde * cf.y

    def normalized_by(self, d: np.ndarray) -> "PlantFactorization":
        """Divide both factors by a per-(measurement, sample) denominator."""
        d = np.asarray(d, dtype=complex)
        if d.shape != self.mtilde.shape:
            raise ValueError("denominator array must be (l, F)")
        return PlantFactorization(
            grid=self.grid,
            ntilde=self.ntilde / d[:, :, None],
            mtilde=self.mtilde / d,
            label=self.label,
        )


def factorize_stable(frd_set: FrdSet) -> PlantFactorization:
    """Factor a stable plant: ntilde = G, mtilde = 1."""
    stacked = frd_set.stacked()  # (l, F, 1, n)
    if stacked.shape[2] != 1:
        raise ValueError("plant measurements must be single-output (1 x n)")
    nt = stacked[:, :, 0, :]
    mt = np.ones(nt.shape[:2], dtype=complex)
    return PlantFactorization(frd_set.grid, nt, mt, label=frd_set.label)


def factorize_with_stabilizer(frd_set: FrdSet, k0_samples: np.ndarray) -> PlantFactorization:
    """Factor an unstable plant through a known stabilizing controller K0.

    ``k0_samples`` holds the stabilizer column on the grid, shape (F, n) or
    (F,) for a single actuator.  ntilde = G/(1 + G K0), mtilde = 1/(1 + G K0);
    both are closed-loop stable maps by assumption on K0.
    """
    stacked = frd_set.stacked()
    if stacked.shape[2] != 1:
        raise ValueError("plant measurements must be single-output (1 x n)")
    g = stacked[:, :, 0, :]  # (l, F, n)
    k0 = np.asarray(k0_samples, dtype=complex)
    if k0.ndim == 1:
        k0 = k0[:, None]
    if k0.shape != g.shape[1:]:
        raise ValueError(f"stabilizer samples {k0.shape} do not match plant {g.shape[1:]}")
    d0 = 1.0 + np.einsum("lfn,fn->lf", g, k0)
    if np.any(np.abs(d0) < 1e-12):
        raise ValueError("1 + G K0 vanishes on the grid: K0 does not stabilize this data")
    return PlantFactorization(frd_set.grid, g / d0[:, :, None], 1.0 / d0, label=frd_set.label)


def factorize_marginal(
    frd_set: FrdSet,
    boundary_poles: list[tuple[complex, int]],
) -> PlantFactorization:
    """Factor a plant whose only instability is known poles on the unit circle.

    mtilde(w) = prod_k ((z - p_k)/z)^{mult_k} with |p_k| = 1, and
    ntilde = G * mtilde; mtilde vanishes exactly at the boundary poles, which
    must therefore not coincide with grid points.
    """
    stacked = frd_set.stacked()
    if stacked.shape[2] != 1:
        raise ValueError("plant measurements must be single-output (1 x n)")
    g = stacked[:, :, 0, :]
    z = frd_set.grid.z
    mt_row = np.ones(len(frd_set.grid), dtype=complex)
    for pole, mult in boundary_poles:
        if abs(abs(pole) - 1.0) > 1e-9:
            raise ValueError(f"pole {pole} is not on the unit circle")
        if mult < 1:
            raise ValueError("pole multiplicity must be >= 1")
        mt_row *= ((z - pole) / z) ** mult
    if np.any(np.abs(mt_row) < 1e-12):
        raise ValueError("a boundary pole coincides with a grid point")
    mt = np.broadcast_to(mt_row, g.shape[:2]).copy()
    return PlantFactorization(frd_set.grid, g * mt[:, :, None], mt, label=frd_set.label)
