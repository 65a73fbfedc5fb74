"""Forward simulation and backward solvers."""
from ..forward import DiffusionCoeffs, Ensemble, simulate_forward, simulate_from_measure
from .generator import CallableGenerator, Generator, SeparableGenerator, Slot
from .regression import FeatureMap, Projector, ProjectorSet, theta_sweep, linear_sweep
from .solvers import (BsdeProblem, BsdeSolution, FrozenLaws, LinearMfBsde, is_geometric,
                      solve_bsde_regression, solve_linear_mf_bsde, solve_mf_bsde)
from .variation import BasePair, VariationKind, path_first, path_second, solve_variation_bsde
