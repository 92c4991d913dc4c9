"""Generalized fast multipole method (GFMM) neural operators in numpy.

Submodules: ``tensor`` (reverse-mode gradients and Adam), ``block1d`` and
``block2d`` (hierarchical GFMM blocks), ``models`` (UNO and MNO stacks),
``problems`` (PDE operators, solvers and samplers), ``data`` (sampling
schemes and dataset files), ``metrics``, ``train``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
