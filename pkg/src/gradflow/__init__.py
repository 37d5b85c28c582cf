"""Minimizing-movement simulation and convergence diagnostics for
nonsmooth gradient systems on grid discretizations of L^2."""

__version__ = "0.1.0"
