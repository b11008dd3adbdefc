"""Closed-loop response tables for the standard data-driven loop.

The loop convention: tracking error e = r - y, controller input is the
noise-contaminated error e + n, plant input disturbance w acts additively,
so u = K (e + n) and y = G (u + w).  With the factorizations G = ntilde /
mtilde (1 x n) and K = X Y^{-1} (n x 1), every closed-loop response is a
stable-numerator ratio over the scalar denominator D = ntilde X + mtilde Y:

    e <- r :  mtilde Y / D        e <- n : -ntilde X / D   e <- w : -ntilde Y / D
    u <- r :  mtilde X / D        u <- n :  mtilde X / D   u <- w : -X ntilde / D
    y <- r :  ntilde X / D        y <- n :  ntilde X / D   y <- w :  ntilde Y / D

(The u <- w entry is the n x n outer product.)
"""

from __future__ import annotations

import csv
import dataclasses
import pathlib
import re

import numpy as np

from loopsynth.factorization import ControllerFrd, PlantFactorization
from loopsynth.frd import FrequencyGrid

__all__ = [
    "PathId",
    "ClosedLoopMap",
    "closed_loop",
    "DualStageMap",
    "dual_stage_map",
    "export_entry_csv",
]

TABLE_ENTRIES = (
    "e_from_r",
    "e_from_n",
    "e_from_w",
    "u_from_r",
    "u_from_n",
    "u_from_w",
    "y_from_r",
    "y_from_n",
    "y_from_w",
    # per-actuator contribution to the output: ntilde_a X_a / D from r and n;
    # from w the direct feedthrough enters, g_a (delta_ab D - X_a ntilde_b) / D
    "ysplit_from_r",
    "ysplit_from_n",
    "ysplit_from_w",
)

_PATH_RE = re.compile(r"^(?P<entry>[a-z_]+)(?:\[(?P<row>\d+)(?:,(?P<col>\d+))?\])?$")


@dataclasses.dataclass(frozen=True)
class PathId:
    """A closed-loop table entry, optionally indexed down to a scalar.

    ``row``/``col`` select a sub-entry of vector or matrix paths, e.g.
    ``u_from_w[1,0]`` is the response of the second actuator command to a
    disturbance on the first.  For the ``ysplit`` entries ``row`` names the
    actuator whose output contribution is tracked.
    """

    entry: str
    row: int | None = None
    col: int | None = None

    def __post_init__(self):
        if self.entry not in TABLE_ENTRIES:
            raise ValueError(f"unknown closed-loop entry {self.entry!r}")
        if self.entry.startswith("ysplit") and self.row is None:
            raise ValueError("ysplit paths need an actuator index")
        if self.entry == "ysplit_from_w" and self.col is None:
            raise ValueError("ysplit_from_w needs [actuator,disturbance] indices")

    @classmethod
    def parse(cls, text: str) -> "PathId":
        match = _PATH_RE.match(text.strip())
        if not match:
            raise ValueError(f"cannot parse path id {text!r}")
        row = match.group("row")
        col = match.group("col")
        return cls(
            entry=match.group("entry"),
            row=None if row is None else int(row),
            col=None if col is None else int(col),
        )

    def __str__(self) -> str:
        if self.row is None:
            return self.entry
        if self.col is None:
            return f"{self.entry}[{self.row}]"
        return f"{self.entry}[{self.row},{self.col}]"


@dataclasses.dataclass(frozen=True)
class ClosedLoopMap:
    """All table entries for one measurement, sampled on the grid."""

    grid: FrequencyGrid
    denominator: np.ndarray  # (F,)
    entries: dict[str, np.ndarray]  # entry -> (F, r, c)

    def entry(self, path: PathId | str) -> np.ndarray:
        """Response samples for a path, shape (F, r, c) after sub-indexing.

        A single index on a 1 x n block names the column, so e_from_w[1]
        is the response of e to the second disturbance channel.
        """
        if isinstance(path, str):
            path = PathId.parse(path)
        full = self.entries[path.entry]
        row, col = path.row, path.col
        if row is not None and col is None and full.shape[1] == 1 and full.shape[2] > 1:
            row, col = None, row
        if row is not None:
            full = full[:, row : row + 1, :]
        if col is not None:
            full = full[:, :, col : col + 1]
        return full


def closed_loop(pf: PlantFactorization, cf: ControllerFrd, measurement: int) -> ClosedLoopMap:
    """Evaluate the nine-entry table for one measurement of a factored plant."""
    nt = pf.ntilde[measurement]  # (F, n)
    mt = pf.mtilde[measurement]  # (F,)
    x = cf.x.T  # (F, m); the loop requires m == n
    y = cf.y
    if x.shape[1] != nt.shape[1]:
        raise ValueError(
            f"controller has {x.shape[1]} outputs but plant has {nt.shape[1]} actuators"
        )
    d = np.einsum("fn,fn->f", nt, x) + mt * y
    nx = np.einsum("fn,fn->f", nt, x)  # scalar ntilde X
    one = d[:, None, None]
    uw_num = -np.einsum("fa,fb->fab", x, nt)
    n_act = nt.shape[1]
    # y_a <- w_b carries the direct feedthrough g_a delta_ab on top of the
    # loop response, with g_a = ntilde_a / mtilde
    gdat = nt / mt[:, None]
    ysw = gdat[:, :, None] * (np.eye(n_act)[None] * d[:, None, None] + uw_num)

    entries = {
        "e_from_r": (mt * y)[:, None, None] / one,
        "e_from_n": (-nx)[:, None, None] / one,
        "e_from_w": (-(nt * y[:, None]))[:, None, :] / one,
        "u_from_r": (mt[:, None] * x)[:, :, None] / one,
        "u_from_n": (mt[:, None] * x)[:, :, None] / one,
        "u_from_w": uw_num / one,
        "y_from_r": nx[:, None, None] / one,
        "y_from_n": nx[:, None, None] / one,
        "y_from_w": (nt * y[:, None])[:, None, :] / one,
        "ysplit_from_r": (nt * x)[:, None, :] / one,
        "ysplit_from_n": (nt * x)[:, None, :] / one,
        "ysplit_from_w": ysw / one,
    }
    return ClosedLoopMap(grid=pf.grid, denominator=d, entries=entries)


# -- direct block-diagram evaluation ------------------------------------------

DUAL_SIGNALS = ("e", "u_v", "u_m", "y", "y_v", "y_m")
DUAL_INPUTS = ("r", "n", "w_v", "w_m")


@dataclasses.dataclass(frozen=True)
class DualStageMap:
    """Signal responses of the sensitivity-decoupled two-actuator loop.

    ``responses[signal, input]`` holds (F,) samples.  Built by direct
    elimination of the loop equations, so it is independent of any
    factorization and serves as the reference for everything else.
    """

    omega: np.ndarray
    responses: dict[tuple[str, str], np.ndarray]

    def get(self, signal: str, source: str) -> np.ndarray:
        return self.responses[(signal, source)]


def dual_stage_map(
    gv: np.ndarray,
    gm: np.ndarray,
    kv: np.ndarray,
    km: np.ndarray,
    ghat: np.ndarray,
    omega: np.ndarray | None = None,
) -> DualStageMap:
    """Solve the decoupled dual-stage loop directly, one frequency at a time.

    Wiring: u_m = K_m (e + n); the micro-actuator output estimate
    ghat * u_m is added back to the contaminated error before the main
    controller, u_v = K_v (e + n + ghat u_m); y = gv (u_v + w_v)
    + gm (u_m + w_m); e = r - y.  Passing km = 0 and gm = 0 degenerates to
    the single-stage loop of K_v alone.
    """
    gv = np.asarray(gv, dtype=complex)
    shape = gv.shape
    gm, kv, km, ghat = (np.broadcast_to(np.asarray(a, dtype=complex), shape).copy() for a in (gm, kv, km, ghat))
    k1 = kv * (1.0 + ghat * km)
    k2 = km
    delta = 1.0 + gv * k1 + gm * k2

    responses: dict[tuple[str, str], np.ndarray] = {}
    for source in DUAL_INPUTS:
        r = 1.0 if source == "r" else 0.0
        n = 1.0 if source == "n" else 0.0
        wv = 1.0 if source == "w_v" else 0.0
        wm = 1.0 if source == "w_m" else 0.0
        # controller input c = e + n solves c * delta = r + n - gv wv - gm wm
        c = (r + n - gv * wv - gm * wm) / delta
        u_v = k1 * c
        u_m = k2 * c
        y_v = gv * (u_v + wv)
        y_m = gm * (u_m + wm)
        y = y_v + y_m
        e = c - n
        responses[("e", source)] = e
        responses[("u_v", source)] = u_v
        responses[("u_m", source)] = u_m
        responses[("y", source)] = y
        responses[("y_v", source)] = y_v
        responses[("y_m", source)] = y_m
    return DualStageMap(omega=omega if omega is not None else np.zeros(shape), responses=responses)


def export_entry_csv(
    clmap: ClosedLoopMap,
    path: PathId | str,
    out_file: str | pathlib.Path,
) -> None:
    """Write magnitude (dB) and phase (deg) of one scalar entry to CSV."""
    samples = clmap.entry(path)
    if samples.shape[1] != 1 or samples.shape[2] != 1:
        raise ValueError(f"path {path} is not scalar; index it down with [row,col]")
    flat = samples[:, 0, 0]
    out_file = pathlib.Path(out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    with out_file.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["freq_hz", "mag_db", "phase_deg"])
        mag_db = 20.0 * np.log10(np.maximum(np.abs(flat), 1e-300))
        phase = np.degrees(np.unwrap(np.angle(flat)))
        for f, m, p in zip(clmap.grid.freqs_hz, mag_db, phase):
            writer.writerow([repr(float(f)), f"{m:.10g}", f"{p:.10g}"])
