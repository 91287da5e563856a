"""mgforge: a miniature finite element system with geometric multigrid.

The pipeline is: symbolic weak forms (:mod:`mgforge.forms`) are compiled to
element kernels (:mod:`mgforge.kernel`), assembled on a structured simplex
mesh (:mod:`mgforge.mesh`, :mod:`mgforge.assembly`) into distributed sparse
operators (:mod:`mgforge.la`), and solved by an option-programmable solver
tree (:mod:`mgforge.solver`).  Parallelism is SPMD over a team of threads
(:mod:`mgforge.runtime`); :mod:`mgforge.bench` drives benchmarks.
"""
from . import errors
from .errors import *  # noqa: F401,F403

__version__ = "0.1.0"
