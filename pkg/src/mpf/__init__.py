"""Particle filters on affine constraint manifolds for low and degenerate observation noise."""

from mpf.engine import FilterResult, ParticleCloud, ResamplePolicy, ess, pf_run
from mpf.geometry import AffineChart, make_chart

__all__ = ["AffineChart", "FilterResult", "ParticleCloud", "ResamplePolicy", "ess", "make_chart", "pf_run"]
__version__ = "0.1.0"
