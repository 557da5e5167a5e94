"""Stokes-flow engine for semi-flexible fiber suspensions.

Couples slender-body hydrodynamics of inextensible elastic fibers to rigid
particles and a confining boundary through second-kind boundary integrals,
stepped implicitly in time, with optional fiber (de)polymerization.
"""

__version__ = "0.1.0"
