"""Central numeric policy: every tolerance used by the library lives here.

Keeping the knobs in one record lets tests tighten them without monkeypatching
scattered module constants.
"""

from __future__ import annotations

import dataclasses

import numpy as np

__all__ = ["NumericPolicy", "default_policy"]

_EPS = float(np.finfo(float).eps)


@dataclasses.dataclass(frozen=True)
class NumericPolicy:
    """Tolerances shared across the library.

    All defaults are machine-epsilon-scaled or chosen to match the documented
    behaviour of the solvers; tests may construct tighter variants.
    """

    #: relative tolerance for "is this effectively zero" coefficient checks
    coeff_zero_rel: float = 1e-12
    #: absolute floor under which a denominator sample counts as singular
    denominator_floor: float = 1e-14
    #: strict-inequality margin used when "<" is posed to the cone solver
    strict_margin: float = 1e-6
    #: interior-point convergence tolerance (residuals and relative gap)
    cone_tol: float = 1e-8
    #: accuracy still accepted when iterations run out short of cone_tol,
    #: provided the best iterate satisfies the constraints to 10 * cone_tol
    cone_tol_relaxed: float = 1e-6
    #: interior-point iteration cap
    cone_max_iter: int = 100
    #: pole magnitude must fall below 1 - pole_margin to count as stable
    pole_margin: float = 1e-9
    #: eigenvalue/SVD agreement scale for cross-checks
    spectral_rtol: float = 100.0 * _EPS
    #: discrete Lyapunov: Kronecker route up to this state dimension
    lyapunov_kron_max: int = 40
    #: Smith iteration convergence tolerance (relative Frobenius update)
    smith_tol: float = 1e-14
    #: Smith iteration cap
    smith_max_iter: int = 200
    #: phase step above which winding-number evaluation is indeterminate
    winding_max_step: float = np.pi / 2.0
    #: relative HSV tail mass allowed by automatic order selection
    reduction_auto_rel: float = 1e-3

    def with_updates(self, **kwargs: float) -> "NumericPolicy":
        return dataclasses.replace(self, **kwargs)


def default_policy() -> NumericPolicy:
    """Return the library-wide default tolerance record."""
    return NumericPolicy()
