"""Budgeted adaptive mesh refinement as a reinforcement-learning environment.

Modules cover the quadtree mesh and broken finite-element spaces, a
discontinuous-Galerkin advection solver, randomized target-function families,
the refinement MDP itself, a small numpy autodiff stack with three
variable-size policy architectures, REINFORCE/PPO trainers, estimator-driven
baselines, and an evaluation harness.
"""

__version__ = "0.1.0"
