"""RBF kernel, feature maps, and the probit link.

Every classifier in this package scores a point x through features of the
form k(x, x') = eta * exp(-||Gamma (x - x')||^2) with eta > 0 and a full
d x d matrix Gamma. The isotropic case Gamma = sqrt(gamma) * I is what all
bundled experiments use, but certificates are derived for general Gamma,
so the matrix form is kept throughout.

The squashing link sigma is the standard normal CDF ("probit"), evaluated
through erfc so it is accurate in both tails.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr


@dataclass(frozen=True)
class KernelParams:
    """RBF kernel k(x, x') = eta * exp(-||Gamma (x - x')||^2).

    cutoff: kernel values below this are flushed to exact zero when
    building feature vectors/matrices (keeps training linear algebra
    sparse in effect). Certificate code paths never apply the cutoff;
    they work with squared distances in the log domain.
    """

    eta: float
    gamma: np.ndarray
    cutoff: float = 1e-12

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if g.shape[0] != g.shape[1]:
            raise ValueError(f"gamma must be square, got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("gamma must be finite")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        # Gram matrix of Gamma must be PSD; eigenvalues may dip to -1e-12
        # from rounding, anything lower means a genuinely bad input.
        w = np.linalg.eigvalsh(g.T @ g)
        if w.min() < -1e-12:
            raise ValueError("gamma^T gamma is not positive semidefinite")
        object.__setattr__(self, "gamma", g)

    @classmethod
    def isotropic(cls, gamma_scalar: float, dim: int = 2, eta: float = 1.0,
                  cutoff: float = 1e-12) -> "KernelParams":
        """Gamma = sqrt(gamma_scalar) * I, the configuration used in all
        bundled experiments."""
        if gamma_scalar <= 0:
            raise ValueError("isotropic gamma must be positive")
        return cls(eta=eta, gamma=np.sqrt(gamma_scalar) * np.eye(dim), cutoff=cutoff)

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def isotropic_gamma(self) -> float:
        """Return the scalar gamma if Gamma = sqrt(gamma) * I, else raise.

        The perceptron baseline's ray certificates are only valid for
        isotropic kernels, so they call this to enforce the restriction.
        """
        g = self.gamma
        s = g[0, 0]
        if not np.allclose(g, s * np.eye(self.dim), atol=1e-12):
            raise ValueError("kernel is not isotropic (Gamma != sqrt(gamma) I)")
        return float(s * s)


@dataclass(frozen=True)
class ClassifierConfig:
    """Decision thresholds shared by the RVM map and its certificates.

    bias:       b, added to every linear score.
    threshold:  e, the free/occupied decision level in score space. A point
                is declared free when the (bounded) score stays below e.
                Must satisfy e >= b, otherwise even totally unobserved
                space would classify occupied and nothing is certifiable.
    n1, n2:     integer exponents of the AM-GM bound used by the third
                bound level; both >= 1.
    epsilon_curve: minimum admissible free-ellipsoid radius while covering
                a curve (same Gamma-warped units as the radii themselves).
    """

    bias: float = -0.05
    threshold: float = -0.01
    n1: int = 1
    n2: int = 1
    epsilon_curve: float = 0.1
    threshold_prob: float = field(init=False)

    def __post_init__(self):
        if self.threshold < self.bias:
            raise ValueError(
                f"threshold e={self.threshold} must be >= bias b={self.bias}")
        if self.n1 < 1 or self.n2 < 1 or self.n1 != int(self.n1) or self.n2 != int(self.n2):
            raise ValueError("n1 and n2 must be integers >= 1")
        if self.epsilon_curve <= 0:
            raise ValueError("epsilon_curve must be positive")
        object.__setattr__(self, "threshold_prob", float(ndtr(self.threshold)))


def rbf_eval(x, x_prime, params: KernelParams) -> float:
    """k(x, x') for a single pair. Always in (0, eta]."""
    x = np.asarray(x, dtype=float)
    xp = np.asarray(x_prime, dtype=float)
    if x.shape != (params.dim,) or xp.shape != (params.dim,):
        raise ValueError(
            f"points must have dimension {params.dim}, got {x.shape} and {xp.shape}")
    d = params.gamma @ (x - xp)
    return float(params.eta * np.exp(-d @ d))


def feature_vector(x, centers, params: KernelParams) -> np.ndarray:
    """Feature map Phi_x = [k(x, c_1), ..., k(x, c_M)].

    Values below params.cutoff are flushed to zero.
    """
    x = np.asarray(x, dtype=float)
    c = np.asarray(centers, dtype=float)
    if c.size == 0:
        return np.zeros(0)
    c = c.reshape(-1, params.dim)
    if x.shape != (params.dim,):
        raise ValueError(f"query must have dimension {params.dim}")
    diff = (x - c) @ params.gamma.T
    k = params.eta * np.exp(-np.einsum("md,md->m", diff, diff))
    k[k < params.cutoff] = 0.0
    return k


def feature_matrix(points, centers, params: KernelParams) -> np.ndarray:
    """Kernel matrix K[i, m] = k(points[i], centers[m]), cutoff applied."""
    p = np.asarray(points, dtype=float).reshape(-1, params.dim)
    c = np.asarray(centers, dtype=float).reshape(-1, params.dim)
    if c.shape[0] == 0 or p.shape[0] == 0:
        return np.zeros((p.shape[0], c.shape[0]))
    pw = p @ params.gamma.T
    cw = c @ params.gamma.T
    sq = (
        np.sum(pw * pw, axis=1)[:, None]
        - 2.0 * pw @ cw.T
        + np.sum(cw * cw, axis=1)[None, :]
    )
    np.maximum(sq, 0.0, out=sq)  # rounding can produce -1e-17
    k = params.eta * np.exp(-sq)
    k[k < params.cutoff] = 0.0
    return k


def probit(f):
    """Standard normal CDF, vectorized. Strictly increasing, sigma(0) = 1/2."""
    return ndtr(f)


def log_probit(f):
    """log sigma(f), finite for any finite f (asymptotic expansion in the
    lower tail instead of underflowing to -inf)."""
    return log_ndtr(f)
