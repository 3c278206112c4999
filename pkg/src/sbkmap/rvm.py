"""Sparse Bayesian occupancy classifier with a probit link.

The model keeps a small basis of relevance vectors (x_m, y_m, xi_m) and a
Gaussian weight posterior N(mu, Sigma) obtained by a Laplace fit of

    L(w) = sum_l log PHI(y_l (Phi_l w + b)) - 1/2 w' A w + const,

where PHI is the standard normal CDF, A = diag(xi), and b a fixed bias.
Basis selection follows the fast marginal-likelihood scheme: with the
pseudo-targets t_hat = Phi mu + B^{-1} delta and C = B + Phi A^{-1} Phi',
each candidate's statistics S = psi' C^{-1} psi and Q = psi' C^{-1} t_hat
decide whether it is added, re-estimated, or deleted.  One online update
(train_online) restricts attention to the K nearest relevance vectors,
sweeps the batch until no action fires, and refits a global posterior on
the surviving vectors.

All covariance work is done with Cholesky factors; C^{-1} is never formed
(Woodbury through the M x M matrix G = A + Phi' B^{-1} Phi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import log_ndtr, ndtr

from .kernel import ClassifierConfig, KernelParams, feature_matrix

if TYPE_CHECKING:
    from .mapping import TrainingBatch

MAX_NEWTON = 50
GRAD_TOL = 1e-6
B_FLOOR = 1e-10
MAX_SWEEPS = 100
XI_LOG_TOL = 1e-3
DUP_EPS = 1e-9
JITTER = 1e-8


def _chol(a: np.ndarray):
    """cho_factor with escalating diagonal jitter.

    Highly correlated kernel columns make these matrices numerically
    rank deficient even though they are positive definite in exact
    arithmetic; the jitter grows until the factorization goes through.
    """
    try:
        return cho_factor(a, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.max(np.diag(a)))
    jit = max(JITTER, 1e-14 * scale) if scale > 0 else JITTER
    eye = np.eye(a.shape[0])
    for _ in range(12):
        try:
            return cho_factor(a + jit * eye, check_finite=False)
        except np.linalg.LinAlgError:
            jit *= 32.0
    raise np.linalg.LinAlgError("matrix stayed indefinite under jitter")

_LOG_2PI = math.log(2.0 * math.pi)


class LaplaceConvergenceError(RuntimeError):
    """Mode finding did not reach the gradient tolerance.

    Carries the last iterate and its gradient norm so callers can degrade
    gracefully instead of losing the map state.
    """

    def __init__(self, last_mean: np.ndarray, grad_norm: float):
        super().__init__(f"Newton did not converge: |grad|_inf = {grad_norm:.3e}")
        self.last_mean = last_mean
        self.grad_norm = grad_norm


@dataclass
class RelevanceVectorSet:
    """Basis of the sparse model: points, labels, finite precisions."""

    points: np.ndarray
    labels: np.ndarray
    precisions: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.labels = np.asarray(self.labels, dtype=float).ravel()
        self.precisions = np.asarray(self.precisions, dtype=float).ravel()
        n = self.points.shape[0]
        if self.labels.shape[0] != n or self.precisions.shape[0] != n:
            raise ValueError("points, labels, precisions lengths differ")
        if n and not np.all(np.abs(self.labels) == 1.0):
            raise ValueError("labels must be -1 or +1")
        if np.any(self.precisions <= 0) or not np.all(np.isfinite(self.precisions)):
            raise ValueError("precisions must be positive and finite")

    @classmethod
    def empty(cls, dim: int = 2) -> "RelevanceVectorSet":
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class WeightPosterior:
    """Gaussian weight posterior; covariance may be dropped after
    compression, in which case only its largest eigenvalue survives."""

    mean: np.ndarray
    covariance: Optional[np.ndarray]
    bias: float
    lambda_max: Optional[float] = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        if self.covariance is not None:
            self.covariance = np.asarray(self.covariance, dtype=float)
            m = self.mean.shape[0]
            if self.covariance.shape != (m, m):
                raise ValueError("covariance shape mismatch")

    def with_lambda_max(self) -> "WeightPosterior":
        """Copy with lambda_max filled in from the stored covariance."""
        if self.covariance is None:
            raise ValueError("no covariance to take an eigenvalue of")
        m = self.mean.shape[0]
        lam = 0.0
        if m > 200:
            # Lanczos for the top eigenvalue; the dense solve is cubic
            from scipy.sparse.linalg import eigsh
            try:
                lam = float(eigsh(self.covariance, k=1, which="LA",
                                  return_eigenvectors=False)[0])
            except Exception:
                lam = float(np.linalg.eigvalsh(self.covariance)[-1])
        elif self.covariance.size:
            lam = float(np.linalg.eigvalsh(self.covariance)[-1])
        return WeightPosterior(self.mean.copy(), self.covariance.copy(),
                               self.bias, max(lam, 0.0))


def empty_posterior(bias: float) -> WeightPosterior:
    return WeightPosterior(np.zeros(0), np.zeros((0, 0)), bias, 0.0)


@dataclass
class TrainingStatistics:
    S: float
    Q: float
    s: float
    q: float
    theta: float


@dataclass
class Action:
    kind: str  # add | reestimate | delete | skip
    xi: Optional[float] = None


@dataclass
class LaplaceState:
    """Byproducts of a converged Laplace fit needed by the fast
    marginal-likelihood updates.

    Phi is N x M over the current basis, B the diagonal of the probit
    noise matrix (floored), t_hat the linearized pseudo-targets, and
    candidates an N x P matrix whose columns are kernel vectors between
    each candidate point and the N data points.
    """

    Phi: np.ndarray
    delta: np.ndarray
    A: np.ndarray          # diagonal of the prior precision, length M
    B: np.ndarray          # diagonal, length N, entries >= B_FLOOR
    t_hat: np.ndarray
    candidates: np.ndarray
    _G_cho: object = field(repr=False, default=None)
    _c_t: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        n, m = self.Phi.shape
        if self.B.shape != (n,) or self.t_hat.shape != (n,):
            raise ValueError("inconsistent state shapes")
        if self.A.shape != (m,):
            raise ValueError("inconsistent prior shape")
        binv_phi = self.Phi / self.B[:, None]
        G = np.diag(self.A) + self.Phi.T @ binv_phi
        if m:
            self._G_cho = _chol(G)
            rhs = self.Phi.T @ (self.t_hat / self.B)
            corr = cho_solve(self._G_cho, rhs, check_finite=False)
            self._c_t = self.t_hat / self.B - binv_phi @ corr
        else:
            self._c_t = self.t_hat / self.B

    @property
    def C(self) -> np.ndarray:
        """Dense C = B + Phi A^{-1} Phi'; for oracles, not the fast path."""
        C = np.diag(self.B)
        if self.Phi.shape[1]:
            C = C + (self.Phi / self.A[None, :]) @ self.Phi.T
        return C

    def quad_forms(self, psi: np.ndarray) -> tuple:
        """(psi' C^{-1} psi, psi' C^{-1} t_hat) without forming C."""
        w = psi / self.B
        S = float(psi @ w)
        if self.Phi.shape[1]:
            p = self.Phi.T @ w
            S -= float(p @ cho_solve(self._G_cho, p, check_finite=False))
        Q = float(psi @ self._c_t)
        return S, Q

    def log_evidence(self) -> float:
        """Approximate marginal log-likelihood -1/2 (N log 2pi
        + log det C + t_hat' C^{-1} t_hat) of the current basis."""
        n, m = self.Phi.shape
        logdet = float(np.sum(np.log(self.B)))
        if m:
            logdet += 2.0 * float(np.sum(np.log(np.diag(self._G_cho[0]))))
            logdet -= float(np.sum(np.log(self.A)))
        quad = float(self.t_hat @ self._c_t)
        return -0.5 * (n * _LOG_2PI + logdet + quad)


@dataclass
class TrainResult:
    rvs: RelevanceVectorSet
    posterior: WeightPosterior
    degraded: bool = False
    actions: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.rvs, self.posterior))


# ------------------------------------------------------------------ fitting

def _link_parts(F: np.ndarray, y: np.ndarray):
    """delta and the floored Hessian diagonal at margin F."""
    u = y * F
    log_cdf = log_ndtr(u)
    log_pdf = -0.5 * u * u - 0.5 * _LOG_2PI
    delta = y * np.exp(log_pdf - log_cdf)
    B = np.maximum(delta * (F + delta), B_FLOOR)
    return delta, B


def _objective(Phi, y, xi, b, w):
    F = Phi @ w + b
    u = y * F
    val = float(np.sum(log_ndtr(u)) - 0.5 * np.sum(xi * w * w)
                + 0.5 * np.sum(np.log(xi) - _LOG_2PI))
    return val, F


def penalized_log_likelihood(w, points, labels, centers, precisions,
                             params: KernelParams, config: ClassifierConfig):
    """Objective of the Laplace fit and its gradient at w.

    Value: sum_l log PHI(y_l F_l) - 1/2 sum_m xi_m w_m^2 plus the Gaussian
    prior constant.  Gradient: Phi' delta - A w.  The log-CDF is evaluated
    in log space, so extreme margins never produce -inf.
    """
    w = np.asarray(w, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    xi = np.asarray(precisions, dtype=float).ravel()
    Phi = feature_matrix(points, centers, params)
    val, F = _objective(Phi, y, xi, config.bias, w)
    u = y * F
    delta = y * np.exp(-0.5 * u * u - 0.5 * _LOG_2PI - log_ndtr(u))
    grad = Phi.T @ delta - xi * w
    return val, grad


def _newton_mode(Phi, y, xi, b, w0=None):
    """Damped Newton ascent; returns (mu, delta, B) at the mode."""
    n, m = Phi.shape
    w = np.zeros(m) if w0 is None else np.asarray(w0, dtype=float).copy()
    if m == 0:
        F = np.full(n, b)
        delta, B = _link_parts(F, y)
        return w, delta, B
    val, F = _objective(Phi, y, xi, b, w)
    for _ in range(MAX_NEWTON):
        delta, B = _link_parts(F, y)
        grad = Phi.T @ delta - xi * w
        gnorm = float(np.max(np.abs(grad))) if m else 0.0
        if gnorm <= GRAD_TOL:
            return w, delta, B
        H = Phi.T @ (Phi * B[:, None]) + np.diag(xi)
        step = cho_solve(_chol(H), grad, check_finite=False)
        t = 1.0
        while t > 2.0 ** -30:
            cand_val, cand_F = _objective(Phi, y, xi, b, w + t * step)
            if cand_val > val:
                break
            t *= 0.5
        else:
            # no ascent direction left: numerically at the optimum
            delta, B = _link_parts(F, y)
            return w, delta, B
        w = w + t * step
        val, F = cand_val, cand_F
    delta, B = _link_parts(F, y)
    grad = Phi.T @ delta - xi * w
    raise LaplaceConvergenceError(w, float(np.max(np.abs(grad))))


def _posterior_from_mode(Phi, xi, b, w, B):
    m = Phi.shape[1]
    H = Phi.T @ (Phi * B[:, None]) + np.diag(xi)
    if m == 0:
        return WeightPosterior(w, np.zeros((0, 0)), b)
    Sigma = cho_solve(_chol(H), np.eye(m), check_finite=False)
    Sigma = 0.5 * (Sigma + Sigma.T)
    return WeightPosterior(w, Sigma, b)


def laplace_approximation(centers, precisions, data: "TrainingBatch",
                          params: KernelParams, config: ClassifierConfig,
                          w0=None) -> WeightPosterior:
    """Fit N(mu, Sigma) around the mode of L(w).

    mu satisfies |Phi' delta - A mu|_inf <= 1e-6 and
    Sigma = (Phi' B Phi + A)^{-1} evaluated at mu.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    xi = np.asarray(precisions, dtype=float).ravel()
    if centers.shape[0] == 0:
        raise ValueError("need at least one center with finite precision")
    Phi = feature_matrix(data.points, centers, params)
    y = data.labels
    mu, _, B = _newton_mode(Phi, y, xi, config.bias, w0)
    return _posterior_from_mode(Phi, xi, config.bias, mu, B)


def build_laplace_state(centers, precisions, data: "TrainingBatch",
                        params: KernelParams, config: ClassifierConfig,
                        posterior: WeightPosterior,
                        candidates=None) -> LaplaceState:
    """Assemble the fast-update state at a converged posterior mean.

    candidates defaults to the data points themselves (the only points
    the online sweep may add)."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    xi = np.asarray(precisions, dtype=float).ravel()
    Phi = feature_matrix(data.points, centers, params)
    F = Phi @ posterior.mean + config.bias
    delta, B = _link_parts(F, data.labels)
    t_hat = Phi @ posterior.mean + delta / B
    if candidates is None:
        cand_pts = data.points
    else:
        cand_pts = np.atleast_2d(np.asarray(candidates, dtype=float))
    cand = feature_matrix(data.points, cand_pts, params)
    return LaplaceState(Phi=Phi, delta=delta, A=xi, B=B, t_hat=t_hat,
                        candidates=cand)


def relevance_statistics(l: int, state: LaplaceState,
                         xi_l: float) -> TrainingStatistics:
    """Marginal-likelihood statistics of candidate l.

    S and Q are the raw quadratic forms; s and q remove the candidate's
    own contribution when it is already in the model (finite xi_l), and
    coincide with S, Q otherwise.
    """
    psi = state.candidates[:, l]
    S, Q = state.quad_forms(psi)
    if math.isinf(xi_l):
        s, q = S, Q
    else:
        denom = xi_l - S
        s = xi_l * S / denom
        q = xi_l * Q / denom
    return TrainingStatistics(S=S, Q=Q, s=s, q=q, theta=q * q - s)


def sequential_action(stats: TrainingStatistics, xi_l: float) -> Action:
    """Decide add / re-estimate / delete / skip from theta = q^2 - s."""
    if not all(map(math.isfinite, (stats.s, stats.q, stats.theta))):
        return Action("skip")
    if stats.theta > 0:
        xi_new = stats.s ** 2 / stats.theta
        if not math.isfinite(xi_new) or xi_new <= 0:
            return Action("skip")
        return Action("add" if math.isinf(xi_l) else "reestimate", xi_new)
    if math.isinf(xi_l):
        return Action("skip")
    return Action("delete")


# ------------------------------------------------------------ online update

def train_online(current: RelevanceVectorSet, batch: "TrainingBatch",
                 params: KernelParams, config: ClassifierConfig,
                 K: Optional[int] = None,
                 warm: Optional[WeightPosterior] = None) -> TrainResult:
    """One online update of the sparse model from a labeled batch.

    Restricts to the K relevance vectors nearest the batch centroid (all
    when K is None), initializes every new batch point at xi = infinity,
    sweeps the batch round-robin applying sequential actions with a
    Laplace refit after each model change, and stops on a sweep with no
    add/delete and re-estimation shifts below 1e-3 in log xi.  Deletions
    of local vectors are permanent; untouched far-away vectors are merged
    back unchanged.  The returned posterior is a fresh Laplace fit using
    the merged vectors as both basis and pseudo-data with their stored
    labels as targets.
    """
    dim = current.points.shape[1] if len(current) else batch.points.shape[1] \
        if len(batch) else 2
    if warm is not None and warm.mean.shape[0] != len(current):
        warm = None  # stale snapshot, fall back to a cold start
    if len(batch) == 0:
        w0 = warm.mean if warm is not None else None
        return TrainResult(current,
                           _global_posterior(current, params, config, w0))
    if len(current) and batch.points.shape[1] != current.points.shape[1]:
        raise ValueError("batch dimension differs from model dimension")

    # --- split the model into the local working set and the remainder
    if K is not None and len(current) > K:
        centroid = batch.points.mean(axis=0)
        d2 = np.sum((current.points - centroid) ** 2, axis=1)
        order = np.argsort(d2, kind="stable")
        local_ids = np.sort(order[:K])
        rest_ids = np.sort(order[K:])
    else:
        local_ids = np.arange(len(current))
        rest_ids = np.arange(0)

    basis_pts = [current.points[i].copy() for i in local_ids]
    basis_lab = [float(current.labels[i]) for i in local_ids]
    basis_xi = [float(current.precisions[i]) for i in local_ids]

    P = batch.points
    y = batch.labels
    n = P.shape[0]

    # candidate l -> index into the basis lists, or -1 when not a member;
    # batch points that coincide with an existing vector take its xi
    bound = np.full(n, -1, dtype=int)
    for j, bp in enumerate(basis_pts):
        d2 = np.sum((P - bp) ** 2, axis=1)
        hit = int(np.argmin(d2))
        if d2[hit] <= DUP_EPS ** 2:
            bound[hit] = j

    K_dd = feature_matrix(P, P, params)
    ext = [j for j in range(len(basis_pts)) if j not in set(bound[bound >= 0])]
    K_ext = (feature_matrix(P, np.asarray([basis_pts[j] for j in ext]), params)
             if ext else np.zeros((n, 0)))
    ext_col = {j: c for c, j in enumerate(ext)}

    def make_phi() -> np.ndarray:
        if not basis_pts:
            return np.zeros((n, 0))
        owner = {}
        for l_, j_ in enumerate(bound):
            if j_ >= 0 and j_ not in owner:
                owner[int(j_)] = l_
        cols = [K_dd[:, owner[j]] if j in owner else K_ext[:, ext_col[j]]
                for j in range(len(basis_pts))]
        return np.column_stack(cols)

    actions_log = []
    degraded = False
    state = None
    w0_local = warm.mean[local_ids] if warm is not None else None
    try:
        Phi = make_phi()
        mu, delta, B = _newton_mode(Phi, y, np.asarray(basis_xi),
                                    config.bias, w0_local)
    except LaplaceConvergenceError:
        degraded = True
    if not degraded:
        for sweep in range(MAX_SWEEPS):
            n_applied = 0
            for l in range(n):
                j = int(bound[l])
                xi_l = basis_xi[j] if j >= 0 else math.inf
                if state is None:
                    state = LaplaceState(Phi=Phi, delta=delta,
                                         A=np.asarray(basis_xi), B=B,
                                         t_hat=Phi @ mu + delta / B,
                                         candidates=K_dd)
                stats = relevance_statistics(l, state, xi_l)
                act = sequential_action(stats, xi_l)
                if act.kind == "skip":
                    continue
                if (act.kind == "reestimate"
                        and abs(math.log(act.xi) - math.log(xi_l))
                        < XI_LOG_TOL):
                    # below the convergence tolerance; applying it would
                    # force a refit without moving the model
                    continue
                snapshot = (list(basis_pts), list(basis_lab), list(basis_xi),
                            bound.copy(), dict(ext_col), mu, Phi, delta, B)
                if act.kind == "add":
                    basis_pts.append(P[l].copy())
                    basis_lab.append(float(y[l]))
                    basis_xi.append(act.xi)
                    bound[l] = len(basis_pts) - 1
                    mu = np.append(mu, 0.0)
                elif act.kind == "delete":
                    del basis_pts[j], basis_lab[j], basis_xi[j]
                    mu = np.delete(mu, j)
                    bound[l] = -1
                    bound[bound > j] -= 1
                    for jj in sorted(ext_col):
                        if jj > j:
                            ext_col[jj - 1] = ext_col.pop(jj)
                else:  # reestimate
                    basis_xi[j] = act.xi
                try:
                    if act.kind != "reestimate":
                        Phi = make_phi()  # basis membership changed
                    mu, delta, B = _newton_mode(Phi, y, np.asarray(basis_xi),
                                                config.bias, mu)
                except LaplaceConvergenceError:
                    (basis_pts, basis_lab, basis_xi, bound, ext_col,
                     mu, Phi, delta, B) = snapshot
                    degraded = True
                    break
                actions_log.append((sweep, l, act.kind, xi_l, act.xi))
                n_applied += 1
                state = None
            if degraded or n_applied == 0:
                break

    # --- merge: survivors replace the local subset; deletions stick
    pts = [current.points[i] for i in rest_ids] + basis_pts
    lab = [current.labels[i] for i in rest_ids] + basis_lab
    xis = [current.precisions[i] for i in rest_ids] + basis_xi
    merged = RelevanceVectorSet(
        np.asarray(pts, dtype=float).reshape(-1, dim),
        np.asarray(lab, dtype=float), np.asarray(xis, dtype=float))

    w0_merged = None
    if not degraded and warm is not None:
        # previous means for the untouched remainder, sweep means for
        # the local survivors; adds entered at zero already
        w0_merged = np.concatenate([warm.mean[rest_ids], mu])
    try:
        posterior = _global_posterior(merged, params, config, w0_merged)
    except LaplaceConvergenceError as err:
        degraded = True
        Phi = feature_matrix(merged.points, merged.points, params)
        _, B = _link_parts(Phi @ err.last_mean + config.bias, merged.labels)
        posterior = _posterior_from_mode(Phi, merged.precisions, config.bias,
                                         err.last_mean, B)
    return TrainResult(merged, posterior, degraded, actions_log)


def _global_posterior(rvs: RelevanceVectorSet, params: KernelParams,
                      config: ClassifierConfig, w0=None) -> WeightPosterior:
    """Laplace fit over the vectors themselves with labels as targets."""
    if len(rvs) == 0:
        return empty_posterior(config.bias)
    from .mapping import TrainingBatch
    data = TrainingBatch(rvs.points, rvs.labels)
    return laplace_approximation(rvs.points, rvs.precisions, data,
                                 params, config, w0)


def predictive_probability(x, rvs: RelevanceVectorSet,
                           posterior: WeightPosterior,
                           params: KernelParams):
    """P(y = +1 | x) via the probit predictive with variance inflation.

    Accepts one point or an (N, d) stack; returns a float or an (N,)
    array accordingly.  Requires the full covariance.
    """
    if posterior.covariance is None:
        raise ValueError("full covariance required for prediction")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if len(rvs) == 0:
        out = np.full(X.shape[0], ndtr(posterior.bias))
        return float(out[0]) if single else out
    Phi = feature_matrix(X, rvs.points, params)
    num = Phi @ posterior.mean + posterior.bias
    var = 1.0 + np.sum((Phi @ posterior.covariance) * Phi, axis=1)
    out = ndtr(num / np.sqrt(var))
    return float(out[0]) if single else out
