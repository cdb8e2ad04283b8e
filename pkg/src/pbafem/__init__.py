"""Adaptive finite elements for the regularized Poisson-Boltzmann equation.

Subpackage map:

* :mod:`pbafem.molio`    -- PQR parsing, charge systems, Born ion oracle
* :mod:`pbafem.mesh`     -- tagged tetrahedral meshes, bisection refinement
* :mod:`pbafem.surfgen`  -- molecular surface meshing and improvement
* :mod:`pbafem.splitting`-- singular/harmonic potential split and barriers
* :mod:`pbafem.fem`      -- P1 assembly and the damped Newton solver
* :mod:`pbafem.estimate` -- residual error indicators and bulk marking
* :mod:`pbafem.afem`     -- adaptive solve loop, contraction monitor, energies
* :mod:`pbafem.cli`      -- command-line entry points
"""

__version__ = "0.1.0"
