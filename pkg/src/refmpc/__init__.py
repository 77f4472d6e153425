"""Reference-generic terminal ingredients for nonlinear tracking MPC."""

__version__ = "0.1.0"
