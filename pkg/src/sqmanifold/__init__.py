"""Manifold estimation from statistical queries.

Submodules
----------
geometry      subspaces, principal angles, Hausdorff distances, packings
models        sphere models with exact expectations, clutter mixtures
oracle        the tolerance-tau query channel and adversary policies
matrix_sq     vector and low-rank matrix mean estimation from queries
routines      projection, tangent, binary-search and seed routines
propagation   manifold propagation and the end-to-end estimators
lowerbound    lower-bound constructions and query-count arithmetic
experiments   experiment kinds driven by the ``sqml`` command
"""

__version__ = "0.1.0"
