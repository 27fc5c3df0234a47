"""Desk-scale verification engine for gauge-background perturbative agreement
of the charged Dirac field on a discrete 1+1D cylinder.

The package is organised along the objects it computes with:

* :mod:`ppakit.lattice` -- the discrete cylinder and its causal structure,
* :mod:`ppakit.background` -- gauge connections, mass functions, perturbations,
* :mod:`ppakit.dirac` -- the double Dirac operator and its propagators,
* :mod:`ppakit.states` -- two-point functions and ordering kernels,
* :mod:`ppakit.funcalg` -- the graded functional algebra and the star product,
* :mod:`ppakit.moller` -- retarded Moller operators and retarded variations,
* :mod:`ppakit.tproducts` -- time-ordered and retarded products,
* :mod:`ppakit.ppa` -- deviation functionals, counterterm calibration,
  Ward-identity and convergence test beds,
* :mod:`ppakit.cli` -- the configuration-driven experiment runner.
"""

__version__ = "0.1.0"
