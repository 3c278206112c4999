"""Sparse kernel-perceptron occupancy model and its collision certificates.

The score F(x) = sum_i a_i+ k(x_i+, x) - sum_j a_j- k(x_j-, x) classifies
x as occupied iff F(x) >= 0.  Training repairs the most-violating batch
point until every batch margin is positive, then prunes support vectors
whose removal keeps their own point correctly classified.

Certificates bound F from above by keeping only the strongest positive
kernel term and a single negative term, which turns the free-space test
into a comparison of two squared distances.  That comparison is linear in
the ray parameter t (and in the ball radius after a Cauchy-Schwarz step),
giving closed-form free horizons and free-ball radii.  These closed forms
require an isotropic kernel Gamma = sqrt(gamma) I.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .kernel import KernelParams, feature_vector

if TYPE_CHECKING:
    from .mapping import TrainingBatch


@dataclass
class SupportVectorSet:
    """Weighted support vectors split by label.

    Weights are stored as positive magnitudes; membership in the positive
    or negative list carries the sign.  No point may appear in both lists.
    """

    params: KernelParams
    pos_points: np.ndarray
    pos_weights: np.ndarray
    neg_points: np.ndarray
    neg_weights: np.ndarray

    def __post_init__(self):
        d = self.params.dim
        self.pos_points = np.asarray(self.pos_points, dtype=float).reshape(-1, d)
        self.neg_points = np.asarray(self.neg_points, dtype=float).reshape(-1, d)
        self.pos_weights = np.asarray(self.pos_weights, dtype=float).ravel()
        self.neg_weights = np.asarray(self.neg_weights, dtype=float).ravel()
        if self.pos_points.shape[0] != self.pos_weights.shape[0]:
            raise ValueError("positive points/weights length mismatch")
        if self.neg_points.shape[0] != self.neg_weights.shape[0]:
            raise ValueError("negative points/weights length mismatch")
        if np.any(self.pos_weights <= 0) or np.any(self.neg_weights <= 0):
            raise ValueError("weights must be strictly positive")
        pos_keys = {p.tobytes() for p in self.pos_points}
        if pos_keys & {p.tobytes() for p in self.neg_points}:
            raise ValueError("a point appears in both lists")

    @classmethod
    def empty(cls, params: KernelParams) -> "SupportVectorSet":
        d = params.dim
        z = np.zeros((0, d))
        return cls(params, z, np.zeros(0), z.copy(), np.zeros(0))

    @property
    def n_pos(self) -> int:
        return self.pos_points.shape[0]

    @property
    def n_neg(self) -> int:
        return self.neg_points.shape[0]

    def __len__(self) -> int:
        return self.n_pos + self.n_neg


def skm_score(x, svs: SupportVectorSet) -> float:
    """F(x); the point is classified occupied iff F(x) >= 0."""
    x = np.asarray(x, dtype=float)
    s = 0.0
    if svs.n_pos:
        s += float(svs.pos_weights @ feature_vector(x, svs.pos_points, svs.params))
    if svs.n_neg:
        s -= float(svs.neg_weights @ feature_vector(x, svs.neg_points, svs.params))
    return s


def skm_train_batch(svs: SupportVectorSet, batch: "TrainingBatch",
                    xi_pos: float = 1.0, xi_neg: float = 1.0,
                    max_iters: int = 1000) -> SupportVectorSet:
    """One round of incremental perceptron training on a labeled batch.

    Repeats until every batch point l has y_l F_l > 0 or max_iters sweeps
    elapse: pick the most-violating point m = argmin_l y_l F_l (lowest
    index on ties), shift its signed weight by (xi y_m - F_m) / eta so
    that its margin lands exactly on xi, then drop any in-batch support
    vector whose own point stays correctly classified after removal.
    Support vectors outside the batch are never touched.
    """
    if xi_pos <= 0 or xi_neg <= 0:
        raise ValueError("margins must be positive")
    if len(batch) == 0:
        raise ValueError("batch is empty")
    params = svs.params
    eta = params.eta
    P = np.asarray(batch.points, dtype=float)
    y = np.asarray(batch.labels, dtype=float)
    n = P.shape[0]

    # signed weights of existing SVs, keyed by exact coordinates
    key_to_batch = {P[i].tobytes(): i for i in range(n)}
    w = np.zeros(n)
    ext_points, ext_weights = [], []
    for pts, wts, sgn in ((svs.pos_points, svs.pos_weights, 1.0),
                          (svs.neg_points, svs.neg_weights, -1.0)):
        for p, a in zip(pts, wts):
            i = key_to_batch.get(p.tobytes())
            if i is None:
                ext_points.append(p)
                ext_weights.append(sgn * a)
            else:
                w[i] = sgn * a

    K = _kernel_matrix(P, P, params)
    F = K @ w
    if ext_points:
        F += _kernel_matrix(P, np.asarray(ext_points), params) @ np.asarray(ext_weights)

    xi = np.where(y > 0, xi_pos, xi_neg)
    for _ in range(max_iters):
        margins = y * F
        if np.all(margins > 0):
            break
        m = int(np.argmin(margins))
        dw = (xi[m] * y[m] - F[m]) / eta
        w[m] += dw
        F += K[:, m] * dw
        # prune batch SVs that stay correct without their own contribution
        for l in range(n):
            if w[l] != 0.0 and y[l] * (F[l] - eta * w[l]) > 0:
                F -= K[:, l] * w[l]
                w[l] = 0.0

    pos_p = [p for p, s in zip(ext_points, ext_weights) if s > 0]
    pos_w = [s for s in ext_weights if s > 0]
    neg_p = [p for p, s in zip(ext_points, ext_weights) if s < 0]
    neg_w = [-s for s in ext_weights if s < 0]
    for i in range(n):
        if w[i] > 0:
            pos_p.append(P[i])
            pos_w.append(w[i])
        elif w[i] < 0:
            neg_p.append(P[i])
            neg_w.append(-w[i])
    d = params.dim
    return SupportVectorSet(
        params,
        np.asarray(pos_p, dtype=float).reshape(-1, d), np.asarray(pos_w, dtype=float),
        np.asarray(neg_p, dtype=float).reshape(-1, d), np.asarray(neg_w, dtype=float))


def _kernel_matrix(A, B, params: KernelParams) -> np.ndarray:
    # exact kernels, no sparsity cutoff: certificates depend on F updates
    # matching the closed forms bit for bit
    A = np.atleast_2d(A) @ params.gamma.T
    B = np.atleast_2d(B) @ params.gamma.T
    sq = (np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :]
          - 2.0 * (A @ B.T))
    return params.eta * np.exp(-np.maximum(sq, 0.0))


def skm_score_upper_bound(x, svs: SupportVectorSet, j: int) -> float:
    """Upper bound on F(x) from the nearest positive and the j-th negative.

    Fbar(x) = k(x, x*+) sum_i a_i+ - k(x, x_j-) a_j- where x*+ maximizes
    the kernel among positives.  With no positives the positive term is
    zero.  Always >= skm_score(x).
    """
    x = np.asarray(x, dtype=float)
    if not (0 <= j < svs.n_neg):
        raise IndexError("negative index out of range")
    neg_term = svs.neg_weights[j] * feature_vector(x, svs.neg_points[j:j + 1],
                                                   svs.params)[0]
    if svs.n_pos == 0:
        return float(-neg_term)
    kmax = float(np.max(feature_vector(x, svs.pos_points, svs.params)))
    return float(kmax * np.sum(svs.pos_weights) - neg_term)


def _certificate_setup(p0, svs: SupportVectorSet):
    """Common precondition handling for the line and ball certificates.

    Returns (gamma, R) where R[i, j] = beta_j - |p0 - x_j-|^2 + |p0 - x_i+|^2
    is the log-domain slack of the (positive i, negative j) pair at p0, or
    None when there are no positives (nothing is ever occupied).
    Raises if no negative certifies p0 as free.
    """
    gamma = svs.params.isotropic_gamma()
    p0 = np.asarray(p0, dtype=float)
    if svs.n_neg == 0:
        raise ValueError("point is not certified free: no negative vectors")
    if svs.n_pos == 0:
        return gamma, None, p0
    dneg = np.sum((svs.neg_points - p0) ** 2, axis=1)
    dpos = np.sum((svs.pos_points - p0) ** 2, axis=1)
    beta = (np.log(svs.neg_weights) - math.log(np.sum(svs.pos_weights))) / gamma
    R = beta[None, :] - dneg[None, :] + dpos[:, None]
    if not np.any(np.all(R > 0, axis=0)):
        raise ValueError("point is not certified free by any negative vector")
    return gamma, R, p0


def _strongest_negative(p0, svs: SupportVectorSet, gamma: float) -> int:
    # argmax_j a_j- exp(-gamma |p0 - x_j-|^2); log-domain, first index wins ties
    d = np.sum((svs.neg_points - p0) ** 2, axis=1)
    return int(np.argmax(np.log(svs.neg_weights) - gamma * d))


def _pair_horizons(R: np.ndarray, slope: np.ndarray) -> np.ndarray:
    """Elementwise horizon from slack R and linear growth rate slope."""
    out = np.full(R.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        grow = slope > 0
        out[grow] = R[grow] / slope[grow]
    out[R <= 0] = 0.0
    return out


def skm_line_free_horizon(p0, v, svs: SupportVectorSet,
                          mode: str = "max_over_j") -> float:
    """Largest t_u such that p0 + t v stays strictly free for t in [0, t_u).

    mode "single_j" uses only the negative vector with the strongest
    contribution at p0; "max_over_j" takes the best horizon over all
    negatives, each of which alone yields a valid upper bound on F.
    Raises if p0 itself is not certified free.  Isotropic kernels only.
    """
    gamma, R, p0 = _certificate_setup(p0, svs)
    if R is None:
        return math.inf
    v = np.asarray(v, dtype=float)
    # slack of pair (i, j) grows linearly in t at rate 2 v.(x_i+ - x_j-)
    slope = 2.0 * ((svs.pos_points @ v)[:, None] - (svs.neg_points @ v)[None, :])
    horizons = _pair_horizons(R, slope)
    per_j = np.min(horizons, axis=0)
    if mode == "single_j":
        return float(per_j[_strongest_negative(p0, svs, gamma)])
    if mode == "max_over_j":
        return float(np.max(per_j))
    raise ValueError(f"unknown mode {mode!r}")


def skm_free_ball_radius(p0, svs: SupportVectorSet,
                         mode: str = "max_over_j") -> float:
    """Radius of a ball around p0 whose interior is strictly free.

    Same structure as the line certificate with the worst-case direction
    folded in: the slack of pair (i, j) shrinks at most at rate
    2 |x_j- - x_i+| per unit radius.
    """
    gamma, R, p0 = _certificate_setup(p0, svs)
    if R is None:
        return math.inf
    diff = svs.pos_points[:, None, :] - svs.neg_points[None, :, :]
    rate = 2.0 * np.sqrt(np.sum(diff * diff, axis=2))
    radii = _pair_horizons(R, rate)
    per_j = np.min(radii, axis=0)
    if mode == "single_j":
        return float(per_j[_strongest_negative(p0, svs, gamma)])
    if mode == "max_over_j":
        return float(np.max(per_j))
    raise ValueError(f"unknown mode {mode!r}")
