"""Sparse Bayesian kernel occupancy mapping.

A 2-D occupancy map is learned online from streaming range scans as a
sparse probit relevance vector machine over an RBF feature space. The
learned decision surface supports closed-form collision certificates for
points, line segments, and second-order polynomial curves, which in turn
drive a lattice A* planner and an entropy-seeking explorer. A kernel
perceptron baseline with its own certificates is included for comparison.
"""

from sbkmap.kernel import ClassifierConfig, KernelParams, probit, rbf_eval, feature_vector

__all__ = [
    "ClassifierConfig",
    "KernelParams",
    "probit",
    "rbf_eval",
    "feature_vector",
]

__version__ = "0.1.0"
