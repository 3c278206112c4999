"""Map quality metrics, holdout prediction scores, and timing benchmarks.

Classification metrics compare the map against a ground-truth grid at
the cell centers. Prediction metrics (AUC, NLL) score the predictive
probabilities on a labelled test set. The collision benchmark times the
certificate checks against a pointwise dense-sampling baseline and
cross-checks their verdicts.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .classify import CorrectedWeights, classify_curve, classify_segment, g1
from .kernel import KernelParams
from .mapping import HEADER_SIZE, OccupancyMap, bernoulli_entropy_bits
from .sim import GridEnvironment

_QUERY_CHUNK = 512  # rows per predictive batch, bounds the Phi allocation


# ---------------------------------------------------------------------------
# classification against ground truth


@dataclass(frozen=True)
class ClassificationReport:
    """Confusion counts of map-vs-truth occupancy at one threshold."""

    accuracy: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    threshold: float


def _chunked_occupancy(omap: OccupancyMap, points: np.ndarray) -> np.ndarray:
    out = np.empty(points.shape[0])
    for lo in range(0, points.shape[0], _QUERY_CHUNK):
        hi = lo + _QUERY_CHUNK
        out[lo:hi] = np.asarray(omap.query_occupancy(points[lo:hi]))
    return out


def env_cell_centers(env: GridEnvironment) -> Tuple[np.ndarray, np.ndarray]:
    """All cell centers of the ground-truth grid with their labels.

    Row-major order, so sample index iy * nx + ix names cell (iy, ix).
    """
    ny, nx = env.shape
    xs = env.origin[0] + (np.arange(nx) + 0.5) * env.resolution
    ys = env.origin[1] + (np.arange(ny) + 0.5) * env.resolution
    xx, yy = np.meshgrid(xs, ys)
    points = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return points, env.cells.ravel().copy()


def _interior_mask(env: GridEnvironment) -> np.ndarray:
    """Occupied cells whose 8 neighbours are all occupied too.

    Grid-edge cells always touch the (free) outside, so they are never
    interior.
    """
    occ = env.cells
    ny, nx = occ.shape
    pad = np.pad(occ, 1, constant_values=False)
    all_occ = np.ones_like(occ)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            all_occ &= pad[1 + dy:1 + dy + ny, 1 + dx:1 + dx + nx]
    return occ & all_occ


def accuracy_recall(omap: OccupancyMap, env: GridEnvironment,
                    thresh: float = 0.5,
                    interior: str = "occupied") -> ClassificationReport:
    """Score the map against the true grid at every cell center.

    A cell is predicted occupied when P(occupied) > thresh; recall is
    the sensitivity on the truly occupied cells. interior selects how
    cells buried inside obstacles are treated: "occupied" keeps them as
    positives, "exclude" drops them from the sample, since no scan can
    ever observe them.
    """
    if interior not in ("occupied", "exclude"):
        raise ValueError(f"unknown interior convention {interior!r}")
    if abs(omap.resolution - env.resolution) > 1e-12:
        raise ValueError("map and environment resolutions differ")
    points, truth = env_cell_centers(env)
    if not (omap.contains(points[0]) and omap.contains(points[-1])):
        raise ValueError("map grid does not cover the environment")
    if interior == "exclude":
        keep = ~_interior_mask(env).ravel()
        points, truth = points[keep], truth[keep]
    pred = _chunked_occupancy(omap, points) > thresh
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    n = truth.shape[0]
    pos = tp + fn
    recall = tp / pos if pos else float("nan")
    return ClassificationReport(accuracy=(tp + tn) / n, recall=recall,
                                tp=tp, fp=fp, tn=tn, fn=fn, n=n,
                                threshold=float(thresh))


# ---------------------------------------------------------------------------
# holdout prediction scores


class AUCUndefinedError(ValueError):
    """Single-class test set; AUC has no value but NLL still does."""

    def __init__(self, message: str, nll: float):
        super().__init__(message)
        self.nll = nll


@dataclass(frozen=True)
class PredictionReport:
    auc: float
    nll: float
    n_pos: int
    n_neg: int


def holdout_split(n: int, test_frac: float = 0.1,
                  seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic train/test split keyed on the sample index.

    Each index is hashed together with the seed, so membership never
    depends on how many samples exist or the order they arrive in.
    """
    if not 0.0 < test_frac < 1.0:
        raise ValueError("test_frac must be in (0, 1)")
    is_test = np.empty(n, dtype=bool)
    for i in range(n):
        h = hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8)
        is_test[i] = int.from_bytes(h.digest(), "big") / 2.0 ** 64 < test_frac
    idx = np.arange(n)
    return idx[~is_test], idx[is_test]


def _mean_nll(p: np.ndarray, y: np.ndarray) -> float:
    lik = np.where(y > 0, p, 1.0 - p)
    # floored at float tiny so one saturated miss keeps the mean finite
    return float(np.mean(-np.log(np.maximum(lik, np.finfo(float).tiny))))


def auc_nll(omap: OccupancyMap, points, labels) -> PredictionReport:
    """Rank-statistic AUC and mean negative log likelihood.

    labels are +1 occupied, -1 free. Ties in the predicted probability
    get average ranks, which makes the statistic equal the trapezoidal
    area under the ROC curve. A single-class test set raises
    AUCUndefinedError carrying the NLL, which needs no negatives.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    y = np.asarray(labels, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("points and labels lengths differ")
    if X.shape[0] == 0:
        raise ValueError("empty test set")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    p = _chunked_occupancy(omap, X)
    nll = _mean_nll(p, y)
    n_pos = int(np.sum(y > 0))
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AUCUndefinedError("test set has a single class", nll)
    ranks = rankdata(p)
    rank_sum = float(np.sum(ranks[y > 0]))
    auc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return PredictionReport(auc=auc, nll=nll, n_pos=n_pos, n_neg=n_neg)


# ---------------------------------------------------------------------------
# storage


def storage_estimate(omap: OccupancyMap, mode: str = "mean") -> int:
    """Exact byte size of serialize(omap, mode).

    Every record is 8 bytes. The fixed header always reserves the
    4-byte spectral-radius slot that only the compressed mode reads.
    """
    if mode not in ("mean", "precision"):
        raise ValueError(f"unknown mode {mode!r}")
    return HEADER_SIZE + 8 * len(omap.rvs)


# ---------------------------------------------------------------------------
# map entropy on a fixed grid


def grid_entropy(omap: OccupancyMap, stride: int = 1) -> float:
    """Mean Bernoulli entropy (bits) over the map nodes, subsampled by
    stride in both axes. The node set is fixed by the map's grid, so
    successive calls measure the same locations."""
    if stride < 1:
        raise ValueError("stride must be at least 1")
    nx, ny = omap.extents
    xs = omap.origin[0] + np.arange(0, nx, stride) * omap.resolution
    ys = omap.origin[1] + np.arange(0, ny, stride) * omap.resolution
    xx, yy = np.meshgrid(xs, ys)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    p = _chunked_occupancy(omap, pts)
    return float(np.mean(bernoulli_entropy_bits(p)))


# ---------------------------------------------------------------------------
# collision-check benchmark


@dataclass(frozen=True)
class BenchRow:
    """Timing summary for one horizon value."""

    t_f: float
    n: int
    cert_segment_us: float
    cert_curve_us: float
    sampled_us: float
    sampled_half_us: float
    cert_free: int
    cert_colliding: int
    unsafe_frees: int


BENCH_CSV_HEADER = ("t_f,n,cert_segment_us,cert_curve_us,sampled_us,"
                    "sampled_half_us,cert_free,cert_colliding,unsafe_frees")


def bench_csv(rows: Sequence[BenchRow]) -> str:
    lines = [BENCH_CSV_HEADER]
    for r in rows:
        lines.append(f"{r.t_f:g},{r.n},{r.cert_segment_us:.3f},"
                     f"{r.cert_curve_us:.3f},{r.sampled_us:.3f},"
                     f"{r.sampled_half_us:.3f},{r.cert_free},"
                     f"{r.cert_colliding},{r.unsafe_frees}")
    return "\n".join(lines) + "\n"


def _sample_points_segment(p0, p1, delta: float) -> np.ndarray:
    length = float(np.linalg.norm(p1 - p0))
    n = max(int(math.ceil(length / delta)), 1)
    ts = np.linspace(0.0, 1.0, n + 1)
    return p0[None, :] + ts[:, None] * (p1 - p0)[None, :]


def _sample_points_curve(curve: Callable[[float], np.ndarray], t_f: float,
                         length: float, delta: float) -> np.ndarray:
    n = max(int(math.ceil(length / delta)), 1)
    ts = np.linspace(0.0, t_f, n + 1)
    return np.asarray([curve(t) for t in ts])


def bench_collision(omap: OccupancyMap,
                    t_f_values: Sequence[float] = (1.0, 2.0, 5.0, 10.0),
                    n_queries: int = 50, delta: float = 0.125,
                    seed: int = 0,
                    area: Optional[Tuple[float, float, float, float]] = None
                    ) -> List[BenchRow]:
    """Time certificate checks against pointwise dense sampling.

    For each horizon t_f, n_queries straight segments and as many
    constant-acceleration arcs are drawn inside ``area`` (default: the
    map's gridded area). Certificates run through classify_segment and
    classify_curve; the baseline walks the same geometry with one exact
    point check every ``delta`` meters, the way a sampling-based
    collision checker would, and again at delta / 2. A certificate may
    reject a query the samples consider free, never the other way
    around; unsafe_frees counts violations of that one-sided guarantee.

    Single-threaded by construction. Wall times are in microseconds per
    query.
    """
    if omap.posterior.covariance is None:
        raise ValueError(
            "benchmark needs the full posterior for the exact baseline")
    params: KernelParams = omap.kernel
    config = omap.config
    if len(omap.rvs) > 0:
        omap.posterior_with_lambda()
    corrected = CorrectedWeights.from_posterior(omap.rvs, omap.posterior,
                                                config)
    if area is None:
        nx, ny = omap.extents
        area = (float(omap.origin[0]), float(omap.origin[1]),
                float(omap.origin[0] + (nx - 1) * omap.resolution),
                float(omap.origin[1] + (ny - 1) * omap.resolution))
    x0, y0, x1, y1 = area
    rng = np.random.default_rng(seed)
    rows: List[BenchRow] = []
    for t_f in t_f_values:
        t_f = float(t_f)
        starts = rng.uniform((x0, y0), (x1, y1), size=(n_queries, 2))
        headings = rng.uniform(0.0, 2.0 * math.pi, size=n_queries)
        speeds = rng.uniform(0.3, 1.0, size=n_queries)
        accels = rng.uniform(-0.15, 0.15, size=(n_queries, 2))
        cert_seg = cert_crv = samp = samp_half = 0.0
        free = colliding = unsafe = 0
        for q in range(n_queries):
            p0 = starts[q]
            u = np.array([math.cos(headings[q]), math.sin(headings[q])])
            p1 = p0 + speeds[q] * t_f * u

            tic = time.perf_counter()
            cert_s = classify_segment(p0, p1, corrected, params, config)
            cert_seg += time.perf_counter() - tic

            def curve(t, p0=p0, v=speeds[q] * u, a=accels[q]):
                return p0 + t * v + (0.5 * t * t) * a

            tic = time.perf_counter()
            cert_c = classify_curve(curve, t_f, corrected, params, config)
            cert_crv += time.perf_counter() - tic

            arc = speeds[q] * t_f \
                + 0.5 * float(np.linalg.norm(accels[q])) * t_f ** 2
            seg_hit = crv_hit = False
            for width, slot in ((delta, "full"), (delta / 2.0, "half")):
                pts_seg = _sample_points_segment(p0, p1, width)
                pts_crv = _sample_points_curve(curve, t_f, arc, width)
                tic = time.perf_counter()
                hits_seg = [bool(g1(pt, omap.rvs, omap.posterior, params,
                                    config) > 0.0) for pt in pts_seg]
                hits_crv = [bool(g1(pt, omap.rvs, omap.posterior, params,
                                    config) > 0.0) for pt in pts_crv]
                elapsed = time.perf_counter() - tic
                if slot == "full":
                    samp += elapsed
                    seg_hit = any(hits_seg)
                    crv_hit = any(hits_crv)
                else:
                    samp_half += elapsed
            for cert, hit in ((cert_s, seg_hit), (cert_c, crv_hit)):
                if cert.kind.endswith("Free"):
                    free += 1
                    if hit:
                        unsafe += 1
                else:
                    colliding += 1
        scale = 1e6 / n_queries
        rows.append(BenchRow(
            t_f=t_f, n=n_queries,
            cert_segment_us=cert_seg * scale, cert_curve_us=cert_crv * scale,
            sampled_us=samp * scale, sampled_half_us=samp_half * scale,
            cert_free=free, cert_colliding=colliding, unsafe_frees=unsafe))
    return rows
