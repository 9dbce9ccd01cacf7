"""Ridge-regularized instrumental-variables estimation with a data-driven path parameter.

The package fits linear IV models three ways that share one moment backbone:

* classical two-stage least squares (:func:`ridgeiv.estimation.tsls`),
* a ridge path that shrinks the IV estimator toward a user prior, with the
  penalty weight chosen by minimizing a held-out projected residual criterion
  (:func:`ridgeiv.estimation.ridge_path_estimate`),
* the stacked just-identified moment system containing both first-order
  conditions (:mod:`ridgeiv.moments`), whose limit distribution — a cone
  projection of a Gaussian — can be simulated exactly
  (:mod:`ridgeiv.asymptotics`).

A Monte Carlo harness (:mod:`ridgeiv.harness`) and a command line front end
(:mod:`ridgeiv.cli`) replay benchmark designs into deterministic CSV tables.
"""

from __future__ import annotations

from ridgeiv.linalg import SingularDesignError
from ridgeiv.model import Dataset, ModelSpec, benchmark_spec, generate_dataset, split
from ridgeiv.estimation import (
    RidgeConfig,
    RidgeFit,
    beta_foc_residual,
    q_derivatives,
    refine_alpha,
    ridge_beta,
    ridge_path_estimate,
    select_alpha,
    test_objective,
    tsls,
)
from ridgeiv.moments import (
    ThetaLayout,
    ThetaVector,
    moment_conditions,
    numerical_jacobian,
    pack_theta,
    population_theta,
    sample_theta,
    unpack_theta,
)
from ridgeiv.asymptotics import (
    AsymptoticLaw,
    ConeSample,
    build_law,
    project_onto_cone,
    simulate_theorem1,
)

__all__ = [
    "AsymptoticLaw",
    "ConeSample",
    "Dataset",
    "ModelSpec",
    "RidgeConfig",
    "RidgeFit",
    "SingularDesignError",
    "ThetaLayout",
    "ThetaVector",
    "benchmark_spec",
    "beta_foc_residual",
    "build_law",
    "generate_dataset",
    "moment_conditions",
    "numerical_jacobian",
    "pack_theta",
    "population_theta",
    "project_onto_cone",
    "q_derivatives",
    "refine_alpha",
    "ridge_beta",
    "ridge_path_estimate",
    "sample_theta",
    "select_alpha",
    "simulate_theorem1",
    "split",
    "test_objective",
    "tsls",
    "unpack_theta",
]

__version__ = "0.1.0"
