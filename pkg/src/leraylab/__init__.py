"""leraylab: Cauchy-Leray integrals, Muckenhoupt weights, and Szego
projections on discretized boundaries of strongly pseudoconvex domains."""

from .geometry import (DomainSpec, Domain, make_domain, eval_defining,
                       check_strong_pseudoconvexity, generate_mesh,
                       leray_levi_density, approach_region, BoundaryMesh)

__version__ = "0.1.0"
