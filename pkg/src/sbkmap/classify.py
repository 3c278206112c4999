"""Closed-form free-space certificates for the probit map.

Three nested tests decide whether a point x is classified free:

    G1(x) = Phi_x' mu + b - e sqrt(1 + Phi_x' Sigma Phi_x)
    G2(x) = sum_i nu_i+ k(x, x_i+) - sum_j nu_j- k(x, x_j-) + b - e
    G3(x) = (sum_i nu_i+) k(x, x*) - rho(e - b, nu_j- k(x, x_j-))

with G1 <= G2 <= G3 pointwise, so G3 <= 0 already certifies the point
free without touching the posterior covariance. x* is the positive
vector closest to x and x_j- is any negative vector; rho is the
weighted AM-GM combiner

    rho(a, c) = (n1 + n2) (a / n1)^(n1/(n1+n2)) (c / n2)^(n2/(n1+n2)).

G3's two-vector structure is what makes segments and ellipsoids
checkable in closed form: substituting p(t) = p0 + t v turns G3 <= 0
into a quadratic inequality V(t) <= 0 whose roots bound the certified
prefix of the ray. Sign decisions are taken in the log domain, where
the quadratic lives, so they stay exact even when the kernel values
themselves underflow far from the model.

Nothing in this module applies the kernel cutoff. Certificates must
agree with the exact field they bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .kernel import ClassifierConfig, KernelParams
from .rvm import RelevanceVectorSet, WeightPosterior

_KINDS = {
    "PointFree", "PointOccupiedOrUnknown",
    "SegmentFree", "SegmentColliding",
    "CurveFree", "CurveColliding",
}

# discriminants below this count as "fewer than two roots"
_DISC_EPS = 1e-14
_BISECT_TOL = 1e-9
_ADVANCE_STEPS = 1024
_MAX_BALLS = 10_000


@dataclass(frozen=True)
class Certificate:
    """Outcome of a closed-form collision query.

    horizon carries t_u for segments (sum of the two one-sided
    horizons) and the smallest covering radius for curves; None for
    point queries. bound_level names the test that produced the
    verdict, G1 being the exact model and G3 the most conservative.
    """

    kind: str
    horizon: Optional[float] = None
    bound_level: str = "G3"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown certificate kind {self.kind!r}")
        if self.horizon is not None and not self.horizon >= 0:
            raise ValueError("horizon must be nonnegative")
        if self.bound_level not in ("G1", "G2", "G3"):
            raise ValueError(f"unknown bound level {self.bound_level!r}")

    @property
    def free(self) -> bool:
        return self.kind in ("PointFree", "SegmentFree", "CurveFree")


@dataclass
class CorrectedWeights:
    """Posterior means shifted by the threshold correction and split by sign.

    nu_m = mu_m - e * 1{e <= 0} * sqrt(lambda_max). Positive nu land in
    (pos_points, pos_weights), negative nu in (neg_points, neg_weights)
    with their magnitudes; exact zeros drop out. sum_pos caches the
    positive mass because every G3 evaluation needs it.
    """

    pos_points: np.ndarray
    pos_weights: np.ndarray
    neg_points: np.ndarray
    neg_weights: np.ndarray
    sum_pos: float

    def __post_init__(self):
        self.pos_points = np.atleast_2d(np.asarray(self.pos_points, dtype=float))
        self.neg_points = np.atleast_2d(np.asarray(self.neg_points, dtype=float))
        self.pos_weights = np.asarray(self.pos_weights, dtype=float).ravel()
        self.neg_weights = np.asarray(self.neg_weights, dtype=float).ravel()
        if self.pos_points.shape[0] != self.pos_weights.shape[0]:
            raise ValueError("positive points/weights lengths differ")
        if self.neg_points.shape[0] != self.neg_weights.shape[0]:
            raise ValueError("negative points/weights lengths differ")
        if np.any(self.pos_weights <= 0) or np.any(self.neg_weights <= 0):
            raise ValueError("stored weights are magnitudes and must be positive")
        expect = float(self.pos_weights.sum())
        if abs(self.sum_pos - expect) > 1e-12 * max(1.0, abs(expect)):
            raise ValueError("sum_pos does not match the positive weights")

    @classmethod
    def from_posterior(cls, rvs: RelevanceVectorSet,
                       posterior: WeightPosterior,
                       config: ClassifierConfig) -> "CorrectedWeights":
        e = config.threshold
        mu = posterior.mean
        if len(rvs) != mu.shape[0]:
            raise ValueError("posterior mean length does not match the basis")
        if e <= 0:
            if posterior.lambda_max is None:
                raise ValueError(
                    "threshold <= 0 requires lambda_max on the posterior")
            nu = mu - e * math.sqrt(max(posterior.lambda_max, 0.0))
        else:
            nu = mu.copy()
        pos = nu > 0
        neg = nu < 0
        dim = rvs.points.shape[1] if rvs.points.ndim == 2 else 2
        return cls(
            pos_points=rvs.points[pos].reshape(-1, dim),
            pos_weights=nu[pos],
            neg_points=rvs.points[neg].reshape(-1, dim),
            neg_weights=-nu[neg],
            sum_pos=float(nu[pos].sum()),
        )

    @property
    def n_pos(self) -> int:
        return self.pos_points.shape[0]

    @property
    def n_neg(self) -> int:
        return self.neg_points.shape[0]

    def nearest(self, x, k_pos: int, k_neg: int,
                params: KernelParams) -> "CorrectedWeights":
        """Restrict to the k nearest vectors of each sign around x.

        Distances are measured in the Gamma metric so anisotropic
        kernels pick the vectors that actually dominate the score.
        Ties keep the lower index. The restricted set is a
        self-consistent model: sum_pos is recomputed from the subset.
        """
        x = np.asarray(x, dtype=float)

        def pick(points, weights, k):
            if points.shape[0] <= k:
                return points, weights
            d = _sq_dists(x[None, :], points, params.gamma)[0]
            order = np.argsort(d, kind="stable")[:k]
            order.sort()
            return points[order], weights[order]

        pp, pw = pick(self.pos_points, self.pos_weights, int(k_pos))
        npts, nw = pick(self.neg_points, self.neg_weights, int(k_neg))
        return CorrectedWeights(pp, pw, npts, nw, float(pw.sum()))


def _sq_dists(X: np.ndarray, C: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """||Gamma (x - c)||^2 for every pair, (B, M). No cutoff, no exp."""
    if C.shape[0] == 0:
        return np.zeros((X.shape[0], 0))
    xw = X @ gamma.T
    cw = C @ gamma.T
    sq = (
        np.sum(xw * xw, axis=1)[:, None]
        - 2.0 * xw @ cw.T
        + np.sum(cw * cw, axis=1)[None, :]
    )
    np.maximum(sq, 0.0, out=sq)
    return sq


def _as_batch(x, dim: int):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        if arr.shape != (dim,):
            raise ValueError(f"query must have dimension {dim}")
        return arr[None, :], True
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"queries must be (B, {dim})")
    return arr, False


def g1(x, rvs: RelevanceVectorSet, posterior: WeightPosterior,
       params: KernelParams, config: ClassifierConfig):
    """Exact decision value: free iff G1(x) <= 0.

    Uses the raw kernel (no cutoff) so it is the reference the bounds
    are certified against. Accepts a single point or a (B, d) batch.
    """
    if posterior.covariance is None:
        raise ValueError("g1 needs the full posterior covariance")
    X, single = _as_batch(x, params.dim)
    if len(rvs) == 0:
        out = np.full(X.shape[0], config.bias - config.threshold)
        return float(out[0]) if single else out
    K = params.eta * np.exp(-_sq_dists(X, rvs.points, params.gamma))
    score = K @ posterior.mean + posterior.bias
    var = np.einsum("bm,mn,bn->b", K, posterior.covariance, K)
    out = score - config.threshold * np.sqrt(1.0 + np.maximum(var, 0.0))
    return float(out[0]) if single else out


def g2(x, corrected: CorrectedWeights, params: KernelParams,
       config: ClassifierConfig):
    """First bound level: G2 <= 0 implies G1 <= 0.

    Linear in the corrected weights, so it only needs nu and the
    kernel, not the covariance.
    """
    X, single = _as_batch(x, params.dim)
    kp = params.eta * np.exp(-_sq_dists(X, corrected.pos_points, params.gamma))
    kn = params.eta * np.exp(-_sq_dists(X, corrected.neg_points, params.gamma))
    out = (kp @ corrected.pos_weights - kn @ corrected.neg_weights
           + config.bias - config.threshold)
    return float(out[0]) if single else out


def _amgm_rho(a: float, c, n1: int, n2: int):
    p1 = n1 / (n1 + n2)
    p2 = n2 / (n1 + n2)
    return (n1 + n2) * (a / n1) ** p1 * (np.asarray(c) / n2) ** p2


def g3(x, corrected: CorrectedWeights, params: KernelParams,
       config: ClassifierConfig, j=None):
    """Second bound level, the one with closed-form ray certificates.

    j picks the negative vector; None selects, per query row, the
    negative with the largest nu_j k(x, x_j), which is the j most able
    to certify. With e = b the AM-GM combiner degenerates and the value
    falls back to the two-term score bound sum_pos k(x,x*) - nu_j k(x,x_j).
    With e = b and no negative vectors nothing is certifiable and the
    sentinel +inf is returned (unless the model has no positives at
    all, in which case everything is free).

    Far from every vector both kernel terms can underflow to zero,
    which reads as a zero (still free) value; classify_point and the
    horizon preconditions use the log-domain test instead, which does
    not underflow.
    """
    X, single = _as_batch(x, params.dim)
    B = X.shape[0]
    d = config.threshold - config.bias
    out = np.empty(B)

    if corrected.n_pos == 0:
        term1 = np.zeros(B)
    else:
        dsq_pos = _sq_dists(X, corrected.pos_points, params.gamma)
        term1 = corrected.sum_pos * params.eta * np.exp(-dsq_pos.min(axis=1))

    if corrected.n_neg == 0:
        if corrected.n_pos == 0:
            out[:] = -d
        elif d > 0:
            out[:] = term1 - d
        else:
            out[:] = np.inf
        return float(out[0]) if single else out

    dsq_neg = _sq_dists(X, corrected.neg_points, params.gamma)
    lw = np.log(corrected.neg_weights)
    if j is None:
        jj = np.argmax(lw[None, :] - dsq_neg, axis=1)
    else:
        jj = np.full(B, int(j))
    k_j = params.eta * np.exp(-dsq_neg[np.arange(B), jj])
    nu_j = corrected.neg_weights[jj]
    if d > 0:
        out = term1 - _amgm_rho(d, nu_j * k_j, config.n1, config.n2)
    else:
        out = term1 - nu_j * k_j
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# log-domain machinery shared by the ray and ellipsoid certificates


def _pair_regime(corrected: CorrectedWeights, config: ClassifierConfig,
                 eta: float):
    """Weights (w_star, w_j) and per-j offsets beta_j of the log-domain
    free condition

        -w_star ||G(x - x_i)||^2 + w_j ||G(x - x_j)||^2 - beta_j <= 0.

    Returns (w_star, w_j, beta). beta is an array over negatives, or a
    single-element array for the no-negatives regime. None means the
    degenerate e = b, no-negatives case that cannot certify anything.
    """
    d = config.threshold - config.bias
    if corrected.sum_pos <= 0:
        raise ValueError("regime needs at least one positive vector")
    log_sum = math.log(corrected.sum_pos)
    if corrected.n_neg == 0:
        if d <= 0:
            return None
        return 1.0, 0.0, np.array([math.log(d) - math.log(eta) - log_sum])
    if d > 0:
        n1, n2 = config.n1, config.n2
        p1 = n1 / (n1 + n2)
        log_rho = (
            math.log(n1 + n2)
            + p1 * math.log(d / n1)
            + (1.0 - p1) * (np.log(corrected.neg_weights) - math.log(n2))
        )
        beta = (n1 + n2) * (log_rho - p1 * math.log(eta) - log_sum)
        return float(n1 + n2), float(n2), beta
    return 1.0, 1.0, np.log(corrected.neg_weights) - log_sum


def _v0_values(X: np.ndarray, corrected: CorrectedWeights,
               params: KernelParams, config: ClassifierConfig):
    """min over j of the log-domain G3 surrogate at each row of X.

    <= 0 iff some negative (or the no-negatives condition) certifies
    the point. -inf when the model has no positives. +inf for the
    uncertifiable e = b, no-negatives regime.
    """
    B = X.shape[0]
    if corrected.n_pos == 0:
        return np.full(B, -np.inf)
    regime = _pair_regime(corrected, config, params.eta)
    if regime is None:
        return np.full(B, np.inf)
    w_star, w_j, beta = regime
    dsq_pos = _sq_dists(X, corrected.pos_points, params.gamma)
    lead = -w_star * dsq_pos.min(axis=1)
    if corrected.n_neg == 0:
        return lead - beta[0]
    dsq_neg = _sq_dists(X, corrected.neg_points, params.gamma)
    return lead + (w_j * dsq_neg - beta[None, :]).min(axis=1)


def g3_certified(x, corrected: CorrectedWeights, params: KernelParams,
                 config: ClassifierConfig):
    """Boolean form of the G3 test, evaluated in the log domain.

    True where some choice of negative vector yields G3 <= 0. Batch
    capable. This is the test the segment and curve certificates are
    built on.
    """
    X, single = _as_batch(x, params.dim)
    v0 = _v0_values(X, corrected, params, config)
    out = v0 <= 0.0
    return bool(out[0]) if single else out


def _prefix_tau(a: float, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Length of the certified prefix [0, tau) of a t^2 + b t + c <= 0.

    a <= 0 always (w_j <= w_star). The quadratic case follows the root
    table: fewer than two roots or both roots nonpositive certify the
    whole ray; two positive roots certify up to the first; a sign
    change across zero certifies nothing. Roots use the cancellation
    free form q = -(b + sign(b) sqrt(disc)) / 2.
    """
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    tau = np.full(b.shape, np.inf)
    if a < 0.0:
        disc = b * b - 4.0 * a * c
        two = disc >= _DISC_EPS
        if np.any(two):
            sd = np.sqrt(disc[two])
            bt = b[two]
            q = -0.5 * (bt + np.where(bt >= 0.0, 1.0, -1.0) * sd)
            r1 = q / a
            r2 = c[two] / q
            t1 = np.minimum(r1, r2)
            t2 = np.maximum(r1, r2)
            tau[two] = np.where(t2 <= 0.0, np.inf,
                                np.where(t1 <= 0.0, 0.0, t1))
        return tau
    pos = b > 0.0
    tau[pos] = np.maximum(0.0, -c[pos] / b[pos])
    flat = ~pos
    tau[flat] = np.where(c[flat] < 0.0, np.inf, 0.0)
    return tau


def _certified_reach(p0, corrected: CorrectedWeights, params: KernelParams,
                     config: ClassifierConfig, mode: str,
                     gv: Optional[np.ndarray]):
    """Common engine behind the ray horizon and the ellipsoid radius.

    gv = Gamma @ v runs the ray version (tau measured in units of v);
    gv None runs the direction-free version where tau is a radius in
    the Gamma metric, obtained by replacing the linear coefficient with
    its Cauchy-Schwarz envelope over all unit directions.
    """
    if mode not in ("single_j", "max_over_j"):
        raise ValueError(f"unknown mode {mode!r}")
    p0 = np.asarray(p0, dtype=float)
    if corrected.n_pos == 0:
        return np.inf
    regime = _pair_regime(corrected, config, params.eta)
    if regime is None:
        raise ValueError(
            "cannot certify with e == b and no negative vectors")
    w_star, w_j, beta = regime
    G = params.gamma
    gpos = corrected.pos_points @ G.T
    gp0 = G @ p0
    dsq_pos0 = np.sum((gpos - gp0) ** 2, axis=1)
    lead = -w_star * dsq_pos0

    if corrected.n_neg == 0:
        v0 = (lead - beta[0]).max()
        if not v0 < 0:
            raise ValueError("start point is not certified free")
        centers = [(None, beta[0])]
    else:
        gneg = corrected.neg_points @ G.T
        dsq_neg0 = np.sum((gneg - gp0) ** 2, axis=1)
        v0_j = lead.max() + w_j * dsq_neg0 - beta
        if not v0_j.min() < 0:
            raise ValueError("start point is not certified free")
        if mode == "single_j":
            order = [int(np.argmin(v0_j))]
        else:
            order = range(corrected.n_neg)
        centers = [(jx, beta[jx]) for jx in order]

    best = 0.0
    for jx, beta_j in centers:
        if jx is None:
            u = w_star * gpos - (w_star - w_j) * gp0
            c = lead - beta_j
        else:
            gj = corrected.neg_points[jx] @ G.T
            u = w_star * gpos - w_j * gj - (w_star - w_j) * gp0
            c = lead + w_j * np.sum((gj - gp0) ** 2) - beta_j
        if gv is None:
            a = w_j - w_star
            b = 2.0 * np.sqrt(np.sum(u * u, axis=1))
        else:
            a = (w_j - w_star) * float(gv @ gv)
            b = 2.0 * (u @ gv)
        tau_j = float(_prefix_tau(float(a), b, c).min())
        if tau_j > best:
            best = tau_j
        if best == np.inf:
            break
    return best


def line_free_horizon(p0, v, corrected: CorrectedWeights,
                      params: KernelParams, config: ClassifierConfig,
                      mode: str = "max_over_j") -> float:
    """Largest t_u with p0 + t v certified free for all t in [0, t_u).

    t is measured in units of v, which is not normalized. Requires the
    start point itself to be certified (G3 < 0 at p0); a model with no
    positive vectors certifies every ray entirely.
    """
    v = np.asarray(v, dtype=float)
    gv = params.gamma @ v
    return _certified_reach(p0, corrected, params, config, mode, gv)


def free_ellipsoid_radius(p0, corrected: CorrectedWeights,
                          params: KernelParams, config: ClassifierConfig,
                          mode: str = "max_over_j") -> float:
    """Radius r_u with {x : ||Gamma (x - p0)|| < r_u} certified free.

    The linear term of the ray quadratic is replaced by its worst-case
    value over all Gamma-unit directions, so one root computation
    covers the whole ellipsoid interior.
    """
    return _certified_reach(p0, corrected, params, config, mode, None)


def classify_point(x, corrected: Optional[CorrectedWeights],
                   params: KernelParams, config: ClassifierConfig,
                   level: str = "G2",
                   rvs: Optional[RelevanceVectorSet] = None,
                   posterior: Optional[WeightPosterior] = None) -> Certificate:
    """Point verdict at the requested bound level.

    G1 needs rvs and the full posterior; G2 and G3 work from the
    corrected weights alone. Free means the level's test value is <= 0.
    """
    if level in ("G2", "G3") and corrected is None:
        raise ValueError(f"level {level} needs corrected weights")
    if level == "G1":
        if rvs is None or posterior is None:
            raise ValueError("level G1 needs rvs and posterior")
        free = g1(x, rvs, posterior, params, config) <= 0.0
    elif level == "G2":
        free = g2(x, corrected, params, config) <= 0.0
    elif level == "G3":
        free = g3_certified(x, corrected, params, config)
    else:
        raise ValueError(f"unknown bound level {level!r}")
    kind = "PointFree" if free else "PointOccupiedOrUnknown"
    return Certificate(kind, None, level)


def _restrict(corrected: CorrectedWeights, anchor, k_nearest,
              params: KernelParams) -> CorrectedWeights:
    if k_nearest is None:
        return corrected
    k_pos, k_neg = k_nearest
    return corrected.nearest(anchor, k_pos, k_neg, params)


def classify_segment(pA, pB, corrected: CorrectedWeights,
                     params: KernelParams, config: ClassifierConfig,
                     mode: str = "max_over_j",
                     k_nearest=None) -> Certificate:
    """Certify the segment pA-pB free by meeting one-sided horizons.

    Computes the certified prefix t_uA from pA toward pB and t_uB from
    pB toward pA, both on the unit parameterization. The segment is
    free iff the prefixes overlap: t_uA + t_uB > 1. Either endpoint
    failing its own point test makes the verdict Colliding outright.
    k_nearest = (K+, K-) restricts each endpoint's model to its nearest
    vectors; None uses every vector.
    """
    pA = np.asarray(pA, dtype=float)
    pB = np.asarray(pB, dtype=float)
    cA = _restrict(corrected, pA, k_nearest, params)
    cB = _restrict(corrected, pB, k_nearest, params)
    try:
        t_uA = line_free_horizon(pA, pB - pA, cA, params, config, mode)
        t_uB = line_free_horizon(pB, pA - pB, cB, params, config, mode)
    except ValueError:
        return Certificate("SegmentColliding", None, "G3")
    total = t_uA + t_uB
    if total > 1.0:
        return Certificate("SegmentFree", float(min(total, np.inf)), "G3")
    return Certificate("SegmentColliding", float(total), "G3")


def classify_curve(curve: Callable[[float], np.ndarray], t_f: float,
                   corrected: CorrectedWeights, params: KernelParams,
                   config: ClassifierConfig, mode: str = "max_over_j",
                   k_nearest=None,
                   epsilon: Optional[float] = None) -> Certificate:
    """Cover the curve ``t -> curve(t), t in [0, t_f]`` with free ellipsoids.

    At each anchor t_k the free radius r_k is computed; r_k below
    epsilon (default config.epsilon_curve) means the tube pinched shut
    and the verdict is Colliding. Otherwise the next anchor is the
    first exit of the current ellipsoid, located by stepping t in
    t_f/1024 increments and bisecting the bracketing step to 1e-9.
    No exit before t_f means the rest of the curve sits inside the
    current ellipsoid, hence Free. The horizon field reports the
    smallest covering radius actually used.
    """
    if t_f <= 0:
        raise ValueError("t_f must be positive")
    eps = config.epsilon_curve if epsilon is None else float(epsilon)
    G = params.gamma
    t_k = 0.0
    min_radius = np.inf
    for _ in range(_MAX_BALLS):
        p_k = np.asarray(curve(t_k), dtype=float)
        c_k = _restrict(corrected, p_k, k_nearest, params)
        try:
            r_k = free_ellipsoid_radius(p_k, c_k, params, config, mode)
        except ValueError:
            return Certificate("CurveColliding", None, "G3")
        if r_k < eps:
            return Certificate("CurveColliding", float(r_k), "G3")
        min_radius = min(min_radius, r_k)
        if r_k == np.inf:
            return Certificate("CurveFree", None, "G3")

        center_w = G @ p_k
        step = t_f / _ADVANCE_STEPS
        t_prev = t_k
        crossing = None
        m = 1
        while True:
            t = min(t_k + m * step, t_f)
            gval = float(np.linalg.norm(G @ np.asarray(curve(t), dtype=float)
                                        - center_w)) - r_k
            if gval > 0.0:
                crossing = (t_prev, t)
                break
            if t >= t_f:
                break
            t_prev = t
            m += 1
        if crossing is None:
            return Certificate("CurveFree", float(min_radius), "G3")
        lo, hi = crossing
        while hi - lo > _BISECT_TOL:
            mid = 0.5 * (lo + hi)
            gval = float(np.linalg.norm(G @ np.asarray(curve(mid), dtype=float)
                                        - center_w)) - r_k
            if gval > 0.0:
                hi = mid
            else:
                lo = mid
        if lo >= t_f:
            return Certificate("CurveFree", float(min_radius), "G3")
        if lo <= t_k + _BISECT_TOL and r_k < np.inf:
            # the curve leaves the ellipsoid essentially immediately;
            # conservative verdict instead of stalling
            return Certificate("CurveColliding", float(r_k), "G3")
        t_k = lo
    return Certificate("CurveColliding", float(min_radius), "G3")
