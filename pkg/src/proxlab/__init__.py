"""Desk-scale 6-DOF spacecraft proximity-operations laboratory.

Subpackages cover relative orbital/attitude dynamics, a receding-horizon
MPC expert with dataset generation, a minimal reverse-mode autodiff
engine, sequence-prediction imitation policies with temporal aggregation,
PID/behavioral-cloning baselines, and the evaluation metric suite.
"""

__version__ = "0.1.0"
