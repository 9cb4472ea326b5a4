"""Nonlinear stochastic dynamics of a horizontal drillstring.

The package models the bottom hole assembly as a rotating, geometrically
nonlinear Timoshenko beam confined in a borehole, with shock and friction
against the wall and a velocity-dependent bit-rock law at the tip.
"""

__version__ = "0.1.0"
