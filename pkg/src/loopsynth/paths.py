"""Closed-loop paths as affine functions of the controller coefficients.

Under a fixed structure the factor samples X_j(w), Y(w) are linear in the
stacked coefficient vector rho, so the denominator D = ntilde X + mtilde Y
and every table numerator are linear in rho as well.  Each numerator further
splits as an affine column times a constant row, u(rho) v^T, which is what
lets the synthesis layers collapse sigma_max into vector norms.  Nothing
here evaluates a closed loop; it only builds coefficient tensors.

Three loop geometries share the interface (denominator, numerator, rho_dim):

* ``single_loop``: the plain m-actuator loop of the table, including the
  two-actuator composite controller of the dual-stage problem.
* ``vcm_stage_loop``: the first-actuator loop that remains when a
  two-output controller column is wired through the internal-feedback
  decomposition and the second stage is disconnected; its effective
  compensator is X_1 / (Y + ghat X_2), still linear in rho.
* ``SequentialStage2``: the dual-stage loop with the first compensator
  frozen as data, parameterized by the second compensator only.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from loopsynth.closed_loop import PathId
from loopsynth.factorization import ControllerStructure, PlantFactorization, factor_basis
from loopsynth.frd import FrequencyGrid

__all__ = [
    "AffineField",
    "RankOnePath",
    "LoopGeometry",
    "single_loop",
    "vcm_stage_loop",
    "SequentialStage2",
    "equivalent_stage2_plant",
]


@dataclasses.dataclass(frozen=True)
class AffineField:
    """Scalar samples linear in rho: value[i, f] = coeff[i, f] @ rho."""

    coeff: np.ndarray  # (l, F, P) complex

    def evaluate(self, rho: np.ndarray) -> np.ndarray:
        return np.einsum("lfp,p->lf", self.coeff, np.asarray(rho, dtype=float))


@dataclasses.dataclass(frozen=True)
class RankOnePath:
    """One table numerator in the form u(rho) v^T.

    ``u_coeff`` has shape (l, F, mu, P): an affine column per measurement
    and grid point.  ``v_row`` has shape (l, F, mv) and does not depend on
    rho.  The largest singular value of the numerator at a sample is
    ||u(rho)|| * ||v||, exactly.
    """

    label: str
    u_coeff: np.ndarray
    v_row: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u_coeff, dtype=complex)
        v = np.asarray(self.v_row, dtype=complex)
        object.__setattr__(self, "u_coeff", u)
        object.__setattr__(self, "v_row", v)
        if u.ndim != 4 or v.ndim != 3:
            raise ValueError(f"u_coeff must be 4-d and v_row 3-d, got {u.shape}, {v.shape}")
        if u.shape[:2] != v.shape[:2]:
            raise ValueError("u_coeff and v_row disagree on (measurements, grid)")

    @property
    def rows(self) -> int:
        return self.u_coeff.shape[2]

    @property
    def cols(self) -> int:
        return self.v_row.shape[2]

    @property
    def rho_dim(self) -> int:
        return self.u_coeff.shape[3]

    def weighted(self, w) -> "RankOnePath":
        """Left-multiply by a weight: scalar, (F,), (o, mu) or (F, o, mu).

        Weights act on the column factor, W (u v^T) = (W u) v^T, so the
        result is rank one again.  A 1-d array is always read as a
        per-frequency scalar gain.
        """
        w = np.asarray(w)
        nf = self.u_coeff.shape[1]
        if w.ndim == 0:
            u = self.u_coeff * w
        elif w.ndim == 1:
            if w.shape[0] != nf:
                raise ValueError(f"per-frequency weight needs {nf} samples, got {w.shape[0]}")
            u = self.u_coeff * w[None, :, None, None]
        elif w.ndim == 2:
            if w.shape[1] != self.rows:
                raise ValueError(f"weight columns {w.shape[1]} != path rows {self.rows}")
            u = np.einsum("ab,lfbp->lfap", w, self.u_coeff)
        elif w.ndim == 3:
            if w.shape[0] != nf or w.shape[2] != self.rows:
                raise ValueError(f"weight shape {w.shape} incompatible with ({nf}, *, {self.rows})")
            u = np.einsum("fab,lfbp->lfap", w, self.u_coeff)
        else:
            raise ValueError("weight must have at most 3 dimensions")
        return RankOnePath(self.label, u, self.v_row)

    def v_norm(self) -> np.ndarray:
        """||v|| per (measurement, grid point), shape (l, F)."""
        return np.linalg.norm(self.v_row, axis=2)

    def scalar_coeff(self) -> np.ndarray:
        """Coefficients of the scalar numerator u*v, shape (l, F, P)."""
        if self.rows != 1 or self.cols != 1:
            raise ValueError(f"path {self.label} is {self.rows}x{self.cols}, not scalar")
        return self.u_coeff[:, :, 0, :] * self.v_row[:, :, 0][:, :, None]

    def evaluate(self, rho: np.ndarray) -> np.ndarray:
        """Numerator samples u(rho) v^T, shape (l, F, mu, mv)."""
        u = np.einsum("lfup,p->lfu", self.u_coeff, np.asarray(rho, dtype=float))
        return u[:, :, :, None] * self.v_row[:, :, None, :]

    def gain(self, rho: np.ndarray) -> np.ndarray:
        """Largest singular value ||u(rho)|| ||v|| per (l, F) sample.

        For a rank-one matrix this equals the exact spectral norm, no SVD
        required.
        """
        u = np.einsum("lfup,p->lfu", self.u_coeff, np.asarray(rho, dtype=float))
        return np.linalg.norm(u, axis=2) * self.v_norm()


def _as_path(path: PathId | str) -> PathId:
    return PathId.parse(path) if isinstance(path, str) else path


def _indexed(label: str, u: np.ndarray, v: np.ndarray, path: PathId) -> RankOnePath:
    """Apply the table's sub-indexing rule: rows pick u, columns pick v,
    and a single index on a 1 x n block names the column."""
    row, col = path.row, path.col
    if row is not None and col is None and u.shape[2] == 1 and v.shape[2] > 1:
        row, col = None, row
    if row is not None:
        if not 0 <= row < u.shape[2]:
            raise ValueError(f"row {row} out of range for {label}")
        u = u[:, :, row : row + 1, :]
    if col is not None:
        if not 0 <= col < v.shape[2]:
            raise ValueError(f"column {col} out of range for {label}")
        v = v[:, :, col : col + 1]
    return RankOnePath(str(path), u, v)


class LoopGeometry:
    """Standard table over arbitrary affine injections of the factors.

    ``x_coeff`` (m, F, P) and ``y_coeff`` (F, P) map the global coefficient
    vector to factor samples: X_j(w) = x_coeff[j, w] @ rho.  Keeping the
    injections free of structural assumptions is what lets the embedded
    single-stage loop reuse the whole catalog with Y replaced by
    Y + ghat X_2.
    """

    def __init__(
        self,
        grid: FrequencyGrid,
        ntilde: np.ndarray,
        mtilde: np.ndarray,
        x_coeff: np.ndarray,
        y_coeff: np.ndarray,
        label: str = "",
    ):
        self.grid = grid
        self.ntilde = np.asarray(ntilde, dtype=complex)
        self.mtilde = np.asarray(mtilde, dtype=complex)
        self.x_coeff = np.asarray(x_coeff, dtype=complex)
        self.y_coeff = np.asarray(y_coeff, dtype=complex)
        self.label = label
        l, nf, m = self.ntilde.shape
        if self.mtilde.shape != (l, nf):
            raise ValueError("mtilde must be (l, F)")
        if self.x_coeff.shape[:2] != (m, nf) or self.y_coeff.shape[0] != nf:
            raise ValueError("factor injections do not match the plant data")
        if self.x_coeff.shape[2] != self.y_coeff.shape[1]:
            raise ValueError("x_coeff and y_coeff disagree on rho dimension")
        # shared building blocks, all (l, F, P) or (l, F, m, P)
        self._nx = np.einsum("lfa,afp->lfp", self.ntilde, self.x_coeff)
        self._mt_y = self.mtilde[:, :, None] * self.y_coeff[None]
        self._d = self._nx + self._mt_y
        x_stack = np.swapaxes(self.x_coeff, 0, 1)  # (F, m, P)
        self._x = np.broadcast_to(x_stack[None], (l, nf, m, self.rho_dim))
        self._mt_x = self.mtilde[:, :, None, None] * x_stack[None]
        self._y = np.broadcast_to(self.y_coeff[None], (l, nf, self.rho_dim))

    @property
    def measurements(self) -> int:
        return self.ntilde.shape[0]

    @property
    def actuators(self) -> int:
        return self.ntilde.shape[2]

    @property
    def rho_dim(self) -> int:
        return self.x_coeff.shape[2]

    def denominator(self) -> AffineField:
        """D_i(w; rho) = ntilde_i X + mtilde_i Y."""
        return AffineField(self._d)

    def numerator(self, path: PathId | str) -> RankOnePath:
        path = _as_path(path)
        l, nf = self.mtilde.shape
        ones = np.ones((l, nf, 1), dtype=complex)
        entry = path.entry
        if entry == "e_from_r":
            u, v = self._mt_y[:, :, None, :], ones
        elif entry == "e_from_n":
            u, v = -self._nx[:, :, None, :], ones
        elif entry == "e_from_w":
            u, v = -self._y[:, :, None, :], self.ntilde
        elif entry in ("u_from_r", "u_from_n"):
            u, v = self._mt_x, ones
        elif entry == "u_from_w":
            u, v = -self._x, self.ntilde
        elif entry in ("y_from_r", "y_from_n"):
            u, v = self._nx[:, :, None, :], ones
        elif entry == "y_from_w":
            u, v = self._y[:, :, None, :], self.ntilde
        elif entry in ("ysplit_from_r", "ysplit_from_n"):
            a = path.row
            u = (self.ntilde[:, :, a, None] * self.x_coeff[a][None])[:, :, None, :]
            return RankOnePath(str(path), u, ones)
        elif entry == "ysplit_from_w":
            a, b = path.row, path.col
            gdat = self.ntilde[:, :, a] / self.mtilde
            loop = self.ntilde[:, :, b, None] * self.x_coeff[a][None]
            feed = self._d if a == b else 0.0
            u = (gdat[:, :, None] * (feed - loop))[:, :, None, :]
            return RankOnePath(str(path), u, ones)
        else:
            raise ValueError(f"no affine form for entry {entry!r}")
        return _indexed(str(path), u, v, path)


def _inject(block: np.ndarray, j: int, nc: int, p: int) -> np.ndarray:
    out = np.zeros((block.shape[0], p), dtype=complex)
    out[:, j * nc : (j + 1) * nc] = block
    return out


def single_loop(pf: PlantFactorization, structure: ControllerStructure) -> LoopGeometry:
    """Geometry of the plain loop: one controller output per actuator."""
    if pf.actuators != structure.outputs:
        raise ValueError(
            f"plant has {pf.actuators} actuators but structure has {structure.outputs} outputs"
        )
    bx, by = factor_basis(structure, pf.grid.omega)
    nc, p = structure.coeff_count, structure.rho_dim
    x_coeff = np.stack([_inject(bx[j], j, nc, p) for j in range(structure.outputs)])
    y_coeff = _inject(by, structure.outputs, nc, p)
    return LoopGeometry(pf.grid, pf.ntilde, pf.mtilde, x_coeff, y_coeff, label=pf.label)


def vcm_stage_loop(
    pf_first: PlantFactorization,
    structure: ControllerStructure,
    ghat: np.ndarray,
) -> LoopGeometry:
    """Geometry of the fallback loop of a two-output composite controller.

    With the second stage disconnected, the first actuator sees the
    compensator X_1 / (Y + ghat X_2), so the loop denominator becomes
    ntilde_1 X_1 + mtilde_1 (Y + ghat X_2) over the same rho as the
    dual-stage geometry.
    """
    if structure.outputs != 2:
        raise ValueError("the fallback decomposition is defined for two-output structures")
    if pf_first.actuators != 1:
        raise ValueError("pf_first must hold single-actuator measurements")
    ghat = np.asarray(ghat, dtype=complex)
    if ghat.shape != (len(pf_first.grid),):
        raise ValueError("ghat must be sampled on the plant grid")
    bx, by = factor_basis(structure, pf_first.grid.omega)
    nc, p = structure.coeff_count, structure.rho_dim
    x_coeff = _inject(bx[0], 0, nc, p)[None]
    y_coeff = _inject(by, 2, nc, p) + ghat[:, None] * _inject(bx[1], 1, nc, p)
    return LoopGeometry(
        pf_first.grid, pf_first.ntilde, pf_first.mtilde, x_coeff, y_coeff, label=pf_first.label
    )


def equivalent_stage2_plant(
    gv: np.ndarray, gm: np.ndarray, kv: np.ndarray, ghat: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Stable data seen by the second compensator once the first loop is closed.

    Returns (g_eq, s1) with g_eq = (G_m + G_v K_v ghat) / (1 + G_v K_v) and
    s1 the first-loop sensitivity 1 / (1 + G_v K_v), both (l, F).
    """
    gv = np.asarray(gv, dtype=complex)
    gm = np.asarray(gm, dtype=complex)
    den = 1.0 + gv * kv[None]
    if np.any(np.abs(den) < 1e-12):
        raise ValueError("1 + G_v K_v vanishes on the grid: the first loop is not closed")
    s1 = 1.0 / den
    return (gm + gv * kv[None] * ghat[None]) * s1, s1


class SequentialStage2:
    """Dual-stage paths with the first compensator frozen as data.

    The second compensator K_m = X_m / Y_m closes around the equivalent
    plant, so the common denominator is D = ntilde_eq X_m + mtilde_eq Y_m.
    Every dual-stage response then factors through the controller-input
    path: the input c = e + n satisfies c = kappa_s A mtilde_eq Y_m / D for
    source gains kappa_r = kappa_n = 1, kappa_{w_v} = -G_v, kappa_{w_m} =
    -G_m, where A is the frozen first-loop sensitivity.  Path identifiers
    index actuators as 0 = first stage, 1 = second stage, matching the
    composite-controller geometry.
    """

    def __init__(
        self,
        geq_pf: PlantFactorization,
        structure: ControllerStructure,
        kv: np.ndarray,
        gv: np.ndarray,
        gm: np.ndarray,
        ghat: np.ndarray,
    ):
        if structure.outputs != 1:
            raise ValueError("the second-stage compensator has a single output")
        if geq_pf.actuators != 1:
            raise ValueError("equivalent-plant factorization must be single-actuator")
        self.grid = geq_pf.grid
        nf = len(self.grid)
        self.kv = np.asarray(kv, dtype=complex)
        self.gv = np.asarray(gv, dtype=complex)
        self.gm = np.asarray(gm, dtype=complex)
        self.ghat = np.asarray(ghat, dtype=complex)
        l = geq_pf.count
        if self.gv.shape != (l, nf) or self.gm.shape != (l, nf):
            raise ValueError("gv and gm must be (l, F) actuator data")
        if self.kv.shape != (nf,) or self.ghat.shape != (nf,):
            raise ValueError("kv and ghat must be sampled on the grid")
        den = 1.0 + self.gv * self.kv[None]
        if np.any(np.abs(den) < 1e-12):
            raise ValueError("1 + G_v K_v vanishes on the grid: the first loop is not closed")
        self.sens1 = 1.0 / den  # A_i(w)
        self.label = geq_pf.label

        bx, by = factor_basis(structure, self.grid.omega)
        nc, p = structure.coeff_count, structure.rho_dim
        xm = _inject(bx[0], 0, nc, p)  # (F, P)
        ym = _inject(by, 1, nc, p)
        self.y_coeff = ym
        nt = geq_pf.ntilde[:, :, 0]  # (l, F)
        mt = geq_pf.mtilde
        self._d = nt[:, :, None] * xm[None] + mt[:, :, None] * ym[None]
        # frozen-loop fields, all (l, F, P)
        self._f_xm = mt[:, :, None] * xm[None]
        self._f_ym = mt[:, :, None] * ym[None]
        self._f_z = mt[:, :, None] * (ym + self.ghat[:, None] * xm)[None]
        self._f_nx = nt[:, :, None] * xm[None]
        self._rho_dim = p

    @property
    def measurements(self) -> int:
        return self.gv.shape[0]

    @property
    def actuators(self) -> int:
        return 2

    @property
    def rho_dim(self) -> int:
        return self._rho_dim

    def denominator(self) -> AffineField:
        return AffineField(self._d)

    def numerator(self, path: PathId | str) -> RankOnePath:
        path = _as_path(path)
        a = self.sens1[:, :, None]
        c = self.kv[None, :, None]
        bv, bm = self.gv, self.gm
        l, nf = bv.shape
        ones = np.ones((l, nf, 1), dtype=complex)
        b_row = np.stack([bv, bm], axis=2)  # (l, F, 2)
        u_col = np.stack([c * self._f_z, self._f_xm], axis=2)  # rows: [K_v Z, X_m]
        entry = path.entry
        if entry == "e_from_r":
            u, v = (a * self._f_ym)[:, :, None, :], ones
        elif entry == "e_from_n":
            u, v = ((a - 1.0) * self._f_ym - self._f_nx)[:, :, None, :], ones
        elif entry == "e_from_w":
            u, v = (a * self._f_ym)[:, :, None, :], -b_row
        elif entry in ("u_from_r", "u_from_n"):
            u, v = a[:, :, None, :] * u_col, ones
        elif entry == "u_from_w":
            u, v = a[:, :, None, :] * u_col, -b_row
        elif entry in ("y_from_r", "y_from_n"):
            u, v = (self._f_nx + (1.0 - a) * self._f_ym)[:, :, None, :], ones
        elif entry == "y_from_w":
            u, v = (a * self._f_ym)[:, :, None, :], b_row
        elif entry in ("ysplit_from_r", "ysplit_from_n"):
            if path.row not in (0, 1):
                raise ValueError(f"actuator index out of range in {path}")
            if path.row == 0:
                u = (bv[:, :, None] * c * a * self._f_z)[:, :, None, :]
            else:
                u = (bm[:, :, None] * a * self._f_xm)[:, :, None, :]
            return RankOnePath(str(path), u, ones)
        elif entry == "ysplit_from_w":
            ridx, cidx = path.row, path.col
            if not (0 <= ridx < 2 and 0 <= cidx < 2):
                raise ValueError(f"ysplit_from_w indices out of range in {path}")
            if ridx == 0:
                loop = c * a * self._f_z * b_row[:, :, cidx, None]
                feed = self._d if cidx == 0 else 0.0
                u = (bv[:, :, None] * (feed - loop))[:, :, None, :]
            else:
                loop = a * self._f_xm * b_row[:, :, cidx, None]
                feed = self._d if cidx == 1 else 0.0
                u = (bm[:, :, None] * (feed - loop))[:, :, None, :]
            return RankOnePath(str(path), u, ones)
        else:
            raise ValueError(f"no affine form for entry {entry!r}")
        return _indexed(str(path), u, v, path)
