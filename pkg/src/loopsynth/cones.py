"""Second-order cone programming with a homogeneous self-dual interior point.

Programs are built from *groups* of structurally identical cones so the
thousands of per-frequency constraints a synthesis run generates stay in
batched numpy tensors end to end.  A group holds N cones of dimension d whose
affine maps touch k variables each:

    rows_i = a[i] @ x[cols[i]] + b[i]  must lie in the group's cone,

with cone tags ``nonneg`` (every row >= 0, each row its own scalar cone),
``soc`` (rows_i[0] >= ||rows_i[1:]||) and ``rsoc`` (rows (t, s, v...):
||v||^2 <= t s with t, s >= 0).  Rotated cones are lowered to plain
second-order cones internally; the public tag survives in serialization.

The solver is a simplified homogeneous self-dual embedding with Nesterov-Todd
scaling and a Mehrotra predictor-corrector.  The normal equations exploit the
structure synthesis programs have: variables that appear in a single cone
(the per-frequency bound variables) are eliminated through a diagonal Schur
complement, and wide nonnegative rows (budget constraints coupling all bound
variables) are carried as a low-rank correction instead of being assembled.
Identical input bits produce identical output bits: no randomness, no
time-dependent control flow.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from loopsynth.policy import NumericPolicy, default_policy

__all__ = [
    "ConeGroup",
    "ConeProgram",
    "IterateRecord",
    "Solution",
    "solve",
    "feasibility",
]

_CONES = ("nonneg", "soc", "rsoc")
_STEP_FRACTION = 0.99
_DENSE_ROW_NNZ = 64
_REG_BASE = 1e-11


@dataclasses.dataclass(frozen=True)
class ConeGroup:
    """N structurally identical cones: a (N, d, k), b (N, d), cols (N, k)."""

    cone: str
    a: np.ndarray
    b: np.ndarray
    cols: np.ndarray
    labels: tuple | None = None

    def __post_init__(self):
        if self.cone not in _CONES:
            raise ValueError(f"unknown cone tag {self.cone!r}")
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        cols = np.asarray(self.cols, dtype=np.intp)
        if a.ndim == 2:
            a = a[None]
        if b.ndim == 1:
            b = b[None]
        if cols.ndim == 1:
            cols = np.broadcast_to(cols, (a.shape[0], cols.size)).copy()
        if a.ndim != 3 or b.shape != a.shape[:2] or cols.shape != (a.shape[0], a.shape[2]):
            raise ValueError(
                f"inconsistent group shapes: a {a.shape}, b {b.shape}, cols {cols.shape}"
            )
        if self.cone == "soc" and a.shape[1] < 2:
            raise ValueError("soc groups need dimension >= 2")
        if self.cone == "rsoc" and a.shape[1] < 3:
            raise ValueError("rsoc groups need dimension >= 3 (t, s, then the norm rows)")
        if self.labels is not None and len(self.labels) != a.shape[0]:
            raise ValueError("labels must have one entry per cone")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "cols", cols)

    @property
    def count(self) -> int:
        return self.a.shape[0]

    @property
    def dim(self) -> int:
        return self.a.shape[1]


class ConeProgram:
    """Linear objective over variables constrained by cone groups."""

    def __init__(self, num_vars: int):
        if num_vars < 1:
            raise ValueError("program needs at least one variable")
        self.num_vars = int(num_vars)
        self.objective = np.zeros(self.num_vars)
        self.groups: list[ConeGroup] = []

    def set_objective(self, c: np.ndarray) -> None:
        c = np.asarray(c, dtype=float)
        if c.shape != (self.num_vars,):
            raise ValueError(f"objective must have shape ({self.num_vars},)")
        self.objective = c.copy()

    def add_group(
        self,
        cone: str,
        a: np.ndarray,
        b: np.ndarray,
        cols: np.ndarray,
        labels: tuple | None = None,
    ) -> None:
        group = ConeGroup(cone=cone, a=a, b=b, cols=cols, labels=labels)
        if group.count and (np.any(group.cols < 0) or np.any(group.cols >= self.num_vars)):
            raise ValueError("column index out of range")
        self.groups.append(group)

    def add_constraint(self, cone: str, a: np.ndarray, b: np.ndarray, cols=None) -> None:
        """Single-cone convenience wrapper; cols defaults to all variables."""
        a = np.asarray(a, dtype=float)
        if cols is None:
            cols = np.arange(self.num_vars)
        self.add_group(cone, a[None], np.asarray(b, dtype=float)[None], np.asarray(cols)[None])

    @property
    def num_rows(self) -> int:
        return sum(g.count * g.dim for g in self.groups)

    def to_json(self) -> str:
        payload = {
            "num_vars": self.num_vars,
            "objective": self.objective.tolist(),
            "groups": [
                {
                    "cone": g.cone,
                    "a": g.a.tolist(),
                    "b": g.b.tolist(),
                    "cols": g.cols.tolist(),
                }
                for g in self.groups
            ],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "ConeProgram":
        payload = json.loads(text)
        prog = cls(payload["num_vars"])
        prog.set_objective(np.asarray(payload["objective"], dtype=float))
        for g in payload["groups"]:
            prog.add_group(g["cone"], np.asarray(g["a"]), np.asarray(g["b"]), np.asarray(g["cols"]))
        return prog


@dataclasses.dataclass(frozen=True)
class IterateRecord:
    """Per-iteration trace entry.

    ``comp_gap`` is the complementarity gap (s'z + tau kappa)/tau^2 of the
    embedded iterate.  It is strictly positive at every interior iterate and
    is the honest weak-duality margin there; the raw primal and dual estimates
    are residual-contaminated away from convergence.
    """

    primal: float
    dual: float
    comp_gap: float
    pres: float
    dres: float
    mu: float
    step: float


@dataclasses.dataclass(frozen=True)
class Solution:
    status: str  # optimal | infeasible | unbounded | max_iter
    x: np.ndarray | None
    objective: float | None
    iterations: tuple[IterateRecord, ...]
    certificate: dict | None = None


# -- lowered internal representation -------------------------------------------


class _Block:
    """One lowered group: cone in {nonneg, soc} plus per-iterate scaling state."""

    __slots__ = ("cone", "a", "b", "cols", "labels", "group_index",
                 "dense_mask", "w", "lam", "eta", "wbar")

    def __init__(self, cone, a, b, cols, labels, group_index):
        self.cone = cone
        self.a = a
        self.b = b
        self.cols = cols
        self.labels = labels
        self.group_index = group_index


def _lower_group(g: ConeGroup, idx: int) -> _Block:
    if g.cone != "rsoc":
        return _Block(g.cone, g.a.copy(), g.b.copy(), g.cols.copy(), g.labels, idx)
    # (t, s, v...) in the rotated cone iff (t + s, t - s, 2 v...) in the soc
    a = np.empty_like(g.a)
    b = np.empty_like(g.b)
    a[:, 0] = g.a[:, 0] + g.a[:, 1]
    a[:, 1] = g.a[:, 0] - g.a[:, 1]
    a[:, 2:] = 2.0 * g.a[:, 2:]
    b[:, 0] = g.b[:, 0] + g.b[:, 1]
    b[:, 1] = g.b[:, 0] - g.b[:, 1]
    b[:, 2:] = 2.0 * g.b[:, 2:]
    return _Block("soc", a, b, g.cols.copy(), g.labels, idx)


# -- batched cone operations ----------------------------------------------------
# All of these act on (N, d) arrays holding the N cones of one block.


def _identity(block: _Block) -> np.ndarray:
    e = np.zeros(block.b.shape)
    if block.cone == "nonneg":
        e[:] = 1.0
    else:
        e[:, 0] = 1.0
    return e


def _degree(block: _Block) -> int:
    if block.cone == "nonneg":
        return block.b.size
    return block.b.shape[0]


def _positive_roots(a2: np.ndarray, a1: np.ndarray, a0: np.ndarray) -> np.ndarray:
    """Smallest positive root of a2 x^2 + 2 a1 x + a0 = 0 per entry, inf if none.

    The second root comes from the product form to avoid cancellation.
    """
    out = np.full(a0.shape, np.inf)
    disc = a1 * a1 - a2 * a0
    has_root = disc >= 0
    sqrt_disc = np.sqrt(np.where(has_root, disc, 0.0))
    sign_a1 = np.where(a1 >= 0, 1.0, -1.0)
    q = -(a1 + sign_a1 * sqrt_disc)
    q_safe = np.where(q == 0.0, 1.0, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        quad = np.abs(a2) > 1e-300
        r1 = np.where(quad, q / np.where(quad, a2, 1.0), np.inf)
        r2 = np.where(
            q != 0.0,
            a0 / q_safe,
            np.where(np.abs(a1) > 1e-300, -a0 / (2.0 * np.where(a1 == 0, 1.0, a1)), np.inf),
        )
        lin = ~quad & (np.abs(a1) > 1e-300)
        r1 = np.where(lin, -a0 / (2.0 * np.where(lin, a1, 1.0)), r1)
    for r in (r1, r2):
        good = has_root & (r > 0)
        np.minimum.at(out, np.where(good)[0], r[good])
    return out


def _max_step(block: _Block, u: np.ndarray, du: np.ndarray) -> float:
    """Largest alpha keeping u + alpha du inside the (closed) cone."""
    if u.size == 0:
        return np.inf
    if block.cone == "nonneg":
        neg = du < 0
        if not np.any(neg):
            return np.inf
        return float(np.min(-u[neg] / du[neg]))
    # jnorm^2(u + alpha du) = a0 + 2 a1 alpha + a2 alpha^2 must stay nonnegative
    a0 = u[:, 0] ** 2 - np.sum(u[:, 1:] ** 2, axis=1)
    a1 = u[:, 0] * du[:, 0] - np.sum(u[:, 1:] * du[:, 1:], axis=1)
    a2 = du[:, 0] ** 2 - np.sum(du[:, 1:] ** 2, axis=1)
    alpha = float(np.min(_positive_roots(a2, a1, a0)))
    # rounding safety: the leading entry must stay nonnegative as well
    neg0 = du[:, 0] < 0
    if np.any(neg0):
        alpha = min(alpha, float(np.min(-u[neg0, 0] / du[neg0, 0])))
    return alpha


def _compute_scaling(block: _Block, s: np.ndarray, z: np.ndarray) -> None:
    if block.cone == "nonneg":
        block.w = np.sqrt(s / z)
        block.lam = np.sqrt(s * z)
        return
    res_s = np.sqrt(np.maximum(s[:, 0] ** 2 - np.sum(s[:, 1:] ** 2, axis=1), 1e-300))
    res_z = np.sqrt(np.maximum(z[:, 0] ** 2 - np.sum(z[:, 1:] ** 2, axis=1), 1e-300))
    sbar = s / res_s[:, None]
    zbar = z / res_z[:, None]
    gamma = np.sqrt((1.0 + np.sum(sbar * zbar, axis=1)) / 2.0)
    wbar = sbar.copy()
    wbar[:, 0] += zbar[:, 0]
    wbar[:, 1:] -= zbar[:, 1:]
    wbar /= (2.0 * gamma)[:, None]
    block.eta = np.sqrt(res_s / res_z)
    block.wbar = wbar
    block.lam = _apply_w(block, z)


def _apply_w(block: _Block, u: np.ndarray) -> np.ndarray:
    """W u for the symmetric scaling W defined by W z = W^{-1} s = lambda."""
    if block.cone == "nonneg":
        return block.w * u
    a = block.wbar[:, 0]
    q = block.wbar[:, 1:]
    qu = np.sum(q * u[:, 1:], axis=1)
    out = np.empty_like(u)
    out[:, 0] = a * u[:, 0] + qu
    out[:, 1:] = u[:, 1:] + (u[:, 0] + qu / (1.0 + a))[:, None] * q
    return block.eta[:, None] * out


def _apply_winv(block: _Block, u: np.ndarray) -> np.ndarray:
    if block.cone == "nonneg":
        return u / block.w
    a = block.wbar[:, 0]
    q = block.wbar[:, 1:]
    qu = np.sum(q * u[:, 1:], axis=1)
    out = np.empty_like(u)
    out[:, 0] = a * u[:, 0] - qu
    out[:, 1:] = u[:, 1:] + (-u[:, 0] + qu / (1.0 + a))[:, None] * q
    return out / block.eta[:, None]


def _w2inv_matrices(block: _Block) -> np.ndarray:
    """(W^2)^{-1} as explicit (N, d, d) blocks for the normal equations."""
    n, d = block.b.shape
    jw = block.wbar.copy()
    jw[:, 1:] *= -1.0
    mats = 2.0 * np.einsum("ni,nj->nij", jw, jw)
    diag_j = np.concatenate([np.ones((n, 1)), -np.ones((n, d - 1))], axis=1)
    mats[:, range(d), range(d)] -= diag_j
    return mats / (block.eta**2)[:, None, None]


def _jordan_prod(block: _Block, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if block.cone == "nonneg":
        return u * v
    out = np.empty_like(u)
    out[:, 0] = np.sum(u * v, axis=1)
    out[:, 1:] = u[:, 0:1] * v[:, 1:] + v[:, 0:1] * u[:, 1:]
    return out


def _jordan_solve(block: _Block, lam: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Solve lam o u = d for u."""
    if block.cone == "nonneg":
        return d / lam
    l0 = lam[:, 0]
    l1 = lam[:, 1:]
    det = l0**2 - np.sum(l1**2, axis=1)
    l1d = np.sum(l1 * d[:, 1:], axis=1)
    out = np.empty_like(d)
    out[:, 0] = (l0 * d[:, 0] - l1d) / det
    out[:, 1:] = (d[:, 1:] - out[:, 0:1] * l1) / l0[:, None]
    return out


def _scatter_add(target: np.ndarray, flat_index: np.ndarray, values: np.ndarray) -> None:
    """Accumulate values into target at flat indices; bincount beats add.at."""
    flat = target.ravel()
    flat += np.bincount(flat_index.ravel(), weights=values.ravel(), minlength=flat.size)


# -- the workspace ---------------------------------------------------------------


class _Workspace:
    """Lowered blocks, variable split, scaling and factorization state."""

    def __init__(self, program: ConeProgram, policy: NumericPolicy):
        self.policy = policy
        self.p = program.num_vars
        self.c = program.objective.copy()
        self.blocks = [_lower_group(g, i) for i, g in enumerate(program.groups)]
        self._equilibrate()
        self._split_variables()
        self.degree = sum(_degree(b) for b in self.blocks)

    def _equilibrate(self) -> None:
        """Ruiz-style scaling: per-cone block scalars and per-variable scalars.

        Scaling a whole cone block by a positive scalar preserves membership;
        per-row scaling inside a second-order cone would not.
        """
        col = np.ones(self.p)
        for _ in range(3):
            for b in self.blocks:
                if b.a.size == 0:
                    continue
                m = np.abs(b.a).max(axis=(1, 2))
                r = np.where(m > 0, 1.0 / np.sqrt(np.clip(m, 1e-12, 1e12)), 1.0)
                b.a *= r[:, None, None]
                b.b *= r[:, None]
            col_max = np.zeros(self.p)
            for b in self.blocks:
                if b.a.size == 0:
                    continue
                contrib = np.abs(b.a).max(axis=1)
                np.maximum.at(col_max, b.cols, contrib)
            cstep = np.where(col_max > 0, 1.0 / np.sqrt(np.clip(col_max, 1e-12, 1e12)), 1.0)
            col *= cstep
            for b in self.blocks:
                if b.a.size:
                    b.a *= cstep[b.cols][:, None, :]
        self.col_scale = col
        self.c = self.c * col
        self.obj_scale = max(1.0, float(np.max(np.abs(self.c)))) if np.any(self.c) else 1.0
        self.c = self.c / self.obj_scale

    def _split_variables(self) -> None:
        """Choose tail variables (diagonal Schur block) and dense rows.

        A variable may be a tail only if it appears in exactly one elementary
        cone (scalar nonneg row or soc cone), and no elementary cone may hold
        two tails; together the rules keep the tail-tail block of the normal
        equations diagonal.
        """
        appearances = np.zeros(self.p, dtype=np.intp)
        for b in self.blocks:
            if b.cone == "nonneg":
                nnz = np.count_nonzero(b.a, axis=2)  # (N, d)
                b.dense_mask = nnz > _DENSE_ROW_NNZ
                for r in range(b.b.shape[1]):
                    # dense rows live in the low-rank update, not in H,
                    # so they do not restrict the tail choice
                    nz = (b.a[:, r, :] != 0.0) & ~b.dense_mask[:, r : r + 1]
                    if np.any(nz):
                        np.add.at(appearances, b.cols[nz], 1)
            else:
                b.dense_mask = np.zeros(b.b.shape, dtype=bool)
                nz = np.any(b.a != 0.0, axis=1)
                if np.any(nz):
                    np.add.at(appearances, b.cols[nz], 1)
        tail = appearances <= 1
        for b in self.blocks:
            if b.cone == "nonneg":
                for r in range(b.b.shape[1]):
                    nz = (b.a[:, r, :] != 0.0) & ~b.dense_mask[:, r : r + 1]
                    cand = tail[b.cols] & nz
                    extra = (np.cumsum(cand, axis=1) > 1) & cand
                    tail[b.cols[extra]] = False
            else:
                nz = np.any(b.a != 0.0, axis=1)
                cand = tail[b.cols] & nz
                extra = (np.cumsum(cand, axis=1) > 1) & cand
                tail[b.cols[extra]] = False
        self.is_tail = tail
        self.heads = np.where(~tail)[0]
        self.tails = np.where(tail)[0]
        self.nh = self.heads.size
        self.nt = self.tails.size
        self.head_index = np.full(self.p, -1, dtype=np.intp)
        self.tail_index = np.full(self.p, -1, dtype=np.intp)
        self.head_index[self.heads] = np.arange(self.nh)
        self.tail_index[self.tails] = np.arange(self.nt)
        # dense nonneg rows, pulled out of the assembled matrix
        cols_list, coef_list = [], []
        for b in self.blocks:
            if not np.any(b.dense_mask):
                continue
            for n_i, r_i in np.argwhere(b.dense_mask):
                cols_list.append(b.cols[n_i])
                coef_list.append(b.a[n_i, r_i])
        self.nw = len(cols_list)
        if self.nw:
            u_mat = np.zeros((self.p, self.nw))
            for j, (cols, coef) in enumerate(zip(cols_list, coef_list)):
                np.add.at(u_mat[:, j], cols, coef)
            self.wb_u = u_mat
        else:
            self.wb_u = None

    # -- products over all rows ----------------------------------------------------

    def mat_vec(self, x: np.ndarray) -> list[np.ndarray]:
        """G x per block, each (N, d)."""
        return [np.einsum("ndk,nk->nd", b.a, x[b.cols]) for b in self.blocks]

    def mat_t_vec(self, zs: list[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.p)
        for b, z in zip(self.blocks, zs):
            if b.a.size == 0:
                continue
            local = np.einsum("ndk,nd->nk", b.a, z)
            _scatter_add(out, b.cols, local)
        return out

    def offsets(self) -> list[np.ndarray]:
        return [b.b for b in self.blocks]

    def apply_w2inv_rows(self, zs: list[np.ndarray]) -> list[np.ndarray]:
        out = []
        for b, z in zip(self.blocks, zs):
            if b.cone == "nonneg":
                out.append(z / b.w**2)
            else:
                out.append(_apply_winv(b, _apply_winv(b, z)))
        return out

    def apply_w2_rows(self, zs: list[np.ndarray]) -> list[np.ndarray]:
        out = []
        for b, z in zip(self.blocks, zs):
            if b.cone == "nonneg":
                out.append(z * b.w**2)
            else:
                out.append(_apply_w(b, _apply_w(b, z)))
        return out

    # -- normal equations ------------------------------------------------------------

    def factor(self) -> None:
        """Assemble and factor H = G'(W^2)^{-1}G with the head/tail split.

        Dense nonneg rows are skipped here and applied through the capacitance
        update in solve_h.
        """
        nh, nt = self.nh, self.nt
        h_hh = np.zeros((nh, nh))
        h_ht = np.zeros((nh, nt))
        h_tt = np.zeros(nt)
        wb_weights = np.zeros(self.nw)
        wb_at = 0
        for b in self.blocks:
            if b.a.size == 0:
                continue
            if b.cone == "nonneg":
                wgt = 1.0 / (b.w**2)  # z/s per scalar row
                if np.any(b.dense_mask):
                    n_dense = int(np.count_nonzero(b.dense_mask))
                    wb_weights[wb_at : wb_at + n_dense] = wgt[b.dense_mask]
                    wb_at += n_dense
                    wgt = np.where(b.dense_mask, 0.0, wgt)
                    if not np.any(wgt):
                        continue  # every row went to the low-rank update
                local = np.einsum("ndk,nd,ndl->nkl", b.a, wgt, b.a)
            else:
                tmp = np.einsum("nde,nel->ndl", _w2inv_matrices(b), b.a)
                local = np.einsum("ndk,ndl->nkl", b.a, tmp)
            self._scatter_normal(b, local, h_hh, h_ht, h_tt)
        h_tt += _REG_BASE
        scale = max(1.0, float(np.max(np.abs(np.diagonal(h_hh))))) if nh else 1.0
        reg = _REG_BASE * scale
        for attempt in range(6):
            if nt:
                ratio = h_ht / h_tt[None, :]
                schur = h_hh - ratio @ h_ht.T
            else:
                ratio = h_ht
                schur = h_hh.copy()
            if nh:
                schur[np.arange(nh), np.arange(nh)] += reg
            try:
                self.chol = np.linalg.cholesky(schur) if nh else np.zeros((0, 0))
                break
            except np.linalg.LinAlgError:
                if attempt == 5:
                    raise
                reg *= 100.0
        self.h_ht, self.h_tt, self.h_ratio = h_ht, h_tt, ratio
        self.wb_weights = wb_weights
        if self.nw:
            hiu = np.column_stack([self._solve_h0(self.wb_u[:, j]) for j in range(self.nw)])
            cap = np.diag(1.0 / np.maximum(wb_weights, 1e-300)) + self.wb_u.T @ hiu
            self.wb_hiu = hiu
            self.wb_cap_chol = np.linalg.cholesky(cap)

    def _scatter_normal(self, b: _Block, local: np.ndarray, h_hh, h_ht, h_tt) -> None:
        """Route per-cone k x k blocks into the head/tail split matrices."""
        head_of = self.head_index[b.cols]  # (N, k), -1 on tails
        tail_of = self.tail_index[b.cols]
        is_head = head_of >= 0
        patterns, inverse = np.unique(is_head, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        for p_i in range(patterns.shape[0]):
            sel = inverse == p_i
            hsel = np.where(patterns[p_i])[0]
            tsel = np.where(~patterns[p_i])[0]
            loc = local[sel]
            hcols = head_of[sel][:, hsel]
            if hsel.size:
                hh = loc[:, hsel[:, None], hsel[None, :]]
                flat = hcols[:, :, None] * self.nh + hcols[:, None, :]
                _scatter_add(h_hh, flat, hh)
            if tsel.size:
                # at most one tail per cone carries nonzero coefficients, so
                # tail-tail cross terms vanish and the diagonal says it all
                tcols = tail_of[sel][:, tsel]
                _scatter_add(h_tt, tcols, loc[:, tsel, tsel])
                if hsel.size:
                    flat = hcols[:, :, None] * self.nt + tcols[:, None, :]
                    _scatter_add(h_ht, flat, loc[:, hsel[:, None], tsel[None, :]])

    def _solve_h0(self, r: np.ndarray) -> np.ndarray:
        out = np.empty_like(r)
        r_h = r[self.heads]
        r_t = r[self.tails]
        rhs = r_h - self.h_ratio @ r_t if self.nt else r_h
        if self.nh:
            dx_h = np.linalg.solve(self.chol.T, np.linalg.solve(self.chol, rhs))
        else:
            dx_h = rhs
        out[self.heads] = dx_h
        if self.nt:
            out[self.tails] = (r_t - self.h_ht.T @ dx_h) / self.h_tt
        return out

    def solve_h(self, r: np.ndarray) -> np.ndarray:
        base = self._solve_h0(r)
        if not self.nw:
            return base
        rhs = self.wb_u.T @ base
        corr = np.linalg.solve(self.wb_cap_chol.T, np.linalg.solve(self.wb_cap_chol, rhs))
        return base - self.wb_hiu @ corr

    def _solve_core_once(self, rd: np.ndarray, rp: list[np.ndarray]):
        winv_rp = self.apply_w2inv_rows(rp)
        dx = self.solve_h(self.mat_t_vec(winv_rp) - rd)
        gdx = self.mat_vec(dx)
        dz = [wr - wg for wr, wg in zip(winv_rp, self.apply_w2inv_rows(gdx))]
        return dx, dz

    def solve_core(self, rd: np.ndarray, rp: list[np.ndarray]):
        """Solve G'dz = rd, G dx + W^2 dz = rp, with iterative refinement.

        The normal equations square the scaling's condition number, which
        costs exactly the digits the stopping tolerances need late in a run;
        two refinement rounds recover them.
        """
        dx, dz = self._solve_core_once(rd, rp)
        for _ in range(2):
            res_d = rd - self.mat_t_vec(dz)
            res_p = [
                rv - gv - wv
                for rv, gv, wv in zip(rp, self.mat_vec(dx), self.apply_w2_rows(dz))
            ]
            scale = max(float(np.linalg.norm(rd)), _vec_norm(rp), 1.0)
            if max(float(np.linalg.norm(res_d)), _vec_norm(res_p)) <= 1e-14 * scale:
                break
            ddx, ddz = self._solve_core_once(res_d, res_p)
            dx = dx + ddx
            dz = [zv + dv for zv, dv in zip(dz, ddz)]
        return dx, dz


def _vec_dot(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    return float(sum(np.sum(x * y) for x, y in zip(a, b)))


def _vec_norm(a: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(x * x) for x in a)))


def _global_step(ws, s, z, ds, dz, tau, kappa, dtau, dkappa) -> float:
    alpha = np.inf
    for b, sv, dsv, zv, dzv in zip(ws.blocks, s, ds, z, dz):
        alpha = min(alpha, _max_step(b, sv, dsv), _max_step(b, zv, dzv))
    if dtau < 0:
        alpha = min(alpha, -tau / dtau)
    if dkappa < 0:
        alpha = min(alpha, -kappa / dkappa)
    return alpha


def _certificate(ws: _Workspace, z: list[np.ndarray], kind: str, violation: float) -> dict:
    """Locate the cone carrying the largest dual weight in the infeasibility ray."""
    group = index = label = None
    top = 0.0
    for b, zv in zip(ws.blocks, z):
        if zv.size == 0:
            continue
        weight = np.abs(zv).sum(axis=1)
        idx = int(np.argmax(weight))
        if weight[idx] > top:
            top = float(weight[idx])
            group, index = b.group_index, idx
            label = b.labels[idx] if b.labels is not None else None
    return {
        "kind": kind,
        "group": group,
        "index": index,
        "label": label,
        "weight": top,
        "violation": violation,
    }


@np.errstate(over="ignore", invalid="ignore", divide="ignore")
def solve(program: ConeProgram, policy: NumericPolicy | None = None) -> Solution:
    """Minimize the program objective over its cone constraints.

    Returns an optimum, a primal-infeasibility certificate, an unboundedness
    certificate, or ``max_iter``.  The per-iteration trace is always attached.
    When iterations run out, the best iterate is still accepted as optimal at
    ``cone_tol_relaxed`` accuracy provided its primal residual is within ten
    times ``cone_tol``: a dual-residual floor on badly conditioned data means
    mild suboptimality, never constraint violation.  Floating-point warnings
    are suppressed here because post-stall iterates are expected to overflow
    and are handled explicitly.
    """
    policy = policy or default_policy()
    if not program.groups:
        if np.any(program.objective):
            return Solution(
                status="unbounded",
                x=None,
                objective=None,
                iterations=(),
                certificate={"kind": "dual", "label": None,
                             "detail": "no constraints restrain the objective"},
            )
        return Solution(
            status="optimal", x=np.zeros(program.num_vars), objective=0.0, iterations=()
        )

    ws = _Workspace(program, policy)
    c = ws.c
    h = ws.offsets()
    tol = policy.cone_tol
    norm_h = max(1.0, _vec_norm(h))
    norm_c = max(1.0, float(np.linalg.norm(c)))

    # initial point: least-squares primal and dual estimates shifted into the cones
    for b in ws.blocks:
        if b.cone == "nonneg":
            b.w = np.ones_like(b.b)
            b.lam = np.ones_like(b.b)
        else:
            b.eta = np.ones(b.b.shape[0])
            b.wbar = _identity(b)
            b.lam = _identity(b)
    ws.factor()
    x = ws.solve_h(-ws.mat_t_vec(h))
    s_cand = [g + hb for g, hb in zip(ws.mat_vec(x), h)]
    z_cand = ws.mat_vec(ws.solve_h(c))
    s, z = [], []
    for b, sc, zc in zip(ws.blocks, s_cand, z_cand):
        e = _identity(b)
        if sc.size == 0:
            s.append(sc.copy())
            z.append(zc.copy())
            continue
        if b.cone == "nonneg":
            viol_p = float(np.max(-sc))
            viol_d = float(np.max(-zc))
        else:
            viol_p = float(np.max(np.sqrt(np.sum(sc[:, 1:] ** 2, axis=1)) - sc[:, 0]))
            viol_d = float(np.max(np.sqrt(np.sum(zc[:, 1:] ** 2, axis=1)) - zc[:, 0]))
        s.append(sc + (1.0 + viol_p) * e if viol_p >= 0 else sc.copy())
        z.append(zc + (1.0 + viol_d) * e if viol_d >= 0 else zc.copy())
    tau, kappa = 1.0, 1.0

    trace: list[IterateRecord] = []
    deg = ws.degree + 1
    status = "max_iter"
    certificate = None
    step = 0.0
    best_score = np.inf
    best_pres = np.inf
    best_x = None
    small_steps = 0
    stalled = 0

    for _ in range(policy.cone_max_iter):
        gx = ws.mat_vec(x)
        gtz = ws.mat_t_vec(z)
        r_p = [sv - gv - tau * hv for sv, gv, hv in zip(s, gx, h)]  # s - Gx - h*tau
        r_d = gtz - tau * c
        cx = float(c @ x)
        hz = _vec_dot(h, z)
        r_g = kappa + cx + hz
        sz = _vec_dot(s, z)
        mu = (sz + tau * kappa) / deg

        pobj = cx / tau
        dobj = -hz / tau
        pres = _vec_norm(r_p) / (tau * norm_h)
        dres = float(np.linalg.norm(r_d)) / (tau * norm_c)
        relgap = (sz / tau**2) / max(1.0, abs(pobj), abs(dobj))
        trace.append(
            IterateRecord(
                primal=pobj * ws.obj_scale,
                dual=dobj * ws.obj_scale,
                comp_gap=(sz + tau * kappa) / tau**2 * ws.obj_scale,
                pres=pres,
                dres=dres,
                mu=mu,
                step=step,
            )
        )

        score = max(pres, dres, relgap)
        if not np.isfinite(score) or not np.isfinite(mu):
            break  # numerics are spent; the best iterate decides below
        if pres <= tol and dres <= tol and relgap <= tol:
            status = "optimal"
            break
        if score < best_score:
            best_score, best_pres = score, pres
            best_x = x / tau
            stalled = 0
        else:
            # ill-conditioned data can floor the dual residual above tol;
            # once progress stops, more centering steps only erode the iterate.
            # tau collapsing against kappa is different: an infeasibility ray
            # is forming and the run must continue until it certifies
            stalled += 1
            if stalled >= 6 and tau >= kappa:
                break

        if hz < -1e-12:
            pinf_res = float(np.linalg.norm(gtz)) / (-hz) / norm_c
            if pinf_res <= tol and tau <= tol * max(1.0, kappa):
                status = "infeasible"
                certificate = _certificate(ws, z, "primal", -hz)
                break
        if cx < -1e-12:
            dinf_res = _vec_norm([sv - gv for sv, gv in zip(s, gx)]) / (-cx) / norm_h
            if dinf_res <= tol and tau <= tol * max(1.0, kappa):
                status = "unbounded"
                certificate = {"kind": "dual", "label": None, "detail": "objective ray",
                               "violation": -cx}
                break

        for b, sv, zv in zip(ws.blocks, s, z):
            _compute_scaling(b, sv, zv)
        ws.factor()
        dxb, dzb = ws.solve_core(c, [-hv for hv in h])

        def newton(d_cmp, d_tk, lin_scale):
            rp_part = [
                lin_scale * rv + _apply_w(b, _jordan_solve(b, b.lam, dc))
                for b, rv, dc in zip(ws.blocks, r_p, d_cmp)
            ]
            dxa, dza = ws.solve_core(-lin_scale * r_d, rp_part)
            num = -lin_scale * r_g - d_tk / tau - float(c @ dxa) - _vec_dot(h, dza)
            den = float(c @ dxb) + _vec_dot(h, dzb) - kappa / tau
            dtau = num / den
            dx = dxa + dtau * dxb
            dz = [za + dtau * zb for za, zb in zip(dza, dzb)]
            ds = [
                _apply_w(b, _jordan_solve(b, b.lam, dc)) - _apply_w(b, _apply_w(b, dzv))
                for b, dc, dzv in zip(ws.blocks, d_cmp, dz)
            ]
            dkappa = (d_tk - kappa * dtau) / tau
            return dx, ds, dz, dtau, dkappa

        # predictor
        d_cmp_aff = [-_jordan_prod(b, b.lam, b.lam) for b in ws.blocks]
        dx_a, ds_a, dz_a, dtau_a, dkappa_a = newton(d_cmp_aff, -tau * kappa, 1.0)
        alpha_aff = min(1.0, _global_step(ws, s, z, ds_a, dz_a, tau, kappa, dtau_a, dkappa_a))
        sigma = min(0.999, max((1.0 - alpha_aff) ** 3, 1e-8))

        # corrector with the Mehrotra second-order term
        d_cmp = []
        for b, dc, dsv, dzv in zip(ws.blocks, d_cmp_aff, ds_a, dz_a):
            corr = _jordan_prod(b, _apply_winv(b, dsv), _apply_w(b, dzv))
            d_cmp.append(dc + sigma * mu * _identity(b) - corr)
        d_tk = -tau * kappa + sigma * mu - dtau_a * dkappa_a
        dx_c, ds_c, dz_c, dtau_c, dkappa_c = newton(d_cmp, d_tk, 1.0 - sigma)

        alpha = min(
            1.0,
            _STEP_FRACTION * _global_step(ws, s, z, ds_c, dz_c, tau, kappa, dtau_c, dkappa_c),
        )
        x = x + alpha * dx_c
        s = [sv + alpha * dsv for sv, dsv in zip(s, ds_c)]
        z = [zv + alpha * dzv for zv, dzv in zip(z, dz_c)]
        tau += alpha * dtau_c
        kappa += alpha * dkappa_c
        step = alpha
        # numerics are exhausted once steps collapse; the best iterate decides
        small_steps = small_steps + 1 if alpha < 1e-7 else 0
        if small_steps >= 2:
            break

    if status == "max_iter" and best_x is not None:
        # a run that stalls on the dual residual still yields a usable point
        # as long as the constraints themselves are met essentially exactly
        if best_score <= max(tol, policy.cone_tol_relaxed) and best_pres <= 10.0 * tol:
            status = "optimal"
            x = best_x
            tau = 1.0
    if status in ("optimal", "max_iter") and tau > 0:
        x_out = (x / tau) * ws.col_scale
        obj_out = float(program.objective @ x_out)
    else:
        x_out = None
        obj_out = None
    return Solution(
        status=status,
        x=x_out,
        objective=obj_out,
        iterations=tuple(trace),
        certificate=certificate,
    )


def feasibility(program: ConeProgram, policy: NumericPolicy | None = None) -> Solution:
    """Solve the pure feasibility problem (zero objective) for the constraints."""
    feas = ConeProgram(program.num_vars)
    feas.groups = program.groups
    return solve(feas, policy=policy)
