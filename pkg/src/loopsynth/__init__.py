"""Data-driven fixed-structure controller synthesis from frequency response data.

Synthesis works directly on measured frequency responses: no parametric plant
model is identified.  Mixed H2/Hinf objectives over a fixed controller
structure reduce, frequency point by frequency point, to second-order cone
constraints that are affine in the controller coefficients.
"""

from loopsynth.policy import NumericPolicy, default_policy

__all__ = ["NumericPolicy", "default_policy"]

__version__ = "0.1.0"
