"""Online occupancy mapping from streaming range scans.

Converts each scan into a labeled training batch on the sampling grid
(occupied points near beam endpoints, free points along the rays), feeds
only the not-yet-seen samples to the sparse classifier, and maintains the
map state: relevance vectors, weight posterior, spatial index, and a
compact binary serialization.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .index import SpatialIndex
from .kernel import ClassifierConfig, KernelParams, feature_matrix
from .rvm import (RelevanceVectorSet, WeightPosterior, empty_posterior,
                  laplace_approximation, predictive_probability,
                  train_online)

K_UPDATE = 200  # working-set size for each incremental training call
DEFAULT_RESOLUTION = 0.25
DEFAULT_ROBOT_RADIUS = 0.25


@dataclass
class TrainingBatch:
    """Labeled planar samples generated from one scan.

    points: (N, d) float array on the sampling grid.
    labels: (N,) array of -1 (free) / +1 (occupied).
    k: timestamp index of the scan that produced the batch.
    """

    points: np.ndarray
    labels: np.ndarray
    k: int = 0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.labels = np.asarray(self.labels, dtype=float).ravel()
        if self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points and labels length mismatch")
        if self.labels.size and not np.all(np.abs(self.labels) == 1.0):
            raise ValueError("labels must be -1 or +1")
        if len({p.tobytes() for p in self.points}) != len(self.points):
            raise ValueError("duplicate points in batch")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def samples(self):
        """View as a list of (point, label) pairs."""
        return list(zip(self.points, self.labels))


@dataclass
class LidarScan:
    """One planar range scan.

    pose: (x, y, yaw) of the sensor when the scan was taken.
    angles: beam directions in the sensor frame, radians; world beam
    direction is yaw + angle.
    ranges: measured distances, one per beam. A range equal to
    range_max means the beam hit nothing within reach.
    """

    pose: tuple
    angles: np.ndarray
    ranges: np.ndarray
    range_max: float

    def __post_init__(self):
        self.pose = (float(self.pose[0]), float(self.pose[1]),
                     float(self.pose[2]))
        self.angles = np.asarray(self.angles, dtype=float).ravel()
        self.ranges = np.asarray(self.ranges, dtype=float).ravel()
        if self.angles.shape != self.ranges.shape:
            raise ValueError("angles and ranges length mismatch")
        if not self.range_max > 0:
            raise ValueError("range_max must be positive")
        if self.ranges.size and (np.any(self.ranges <= 0)
                                 or np.any(self.ranges > self.range_max)):
            raise ValueError("ranges must lie in (0, range_max]")

    def __len__(self) -> int:
        return self.angles.shape[0]

    @property
    def position(self) -> np.ndarray:
        return np.array(self.pose[:2])

    def endpoints(self) -> np.ndarray:
        """World coordinates of every beam endpoint, (N, 2)."""
        world = self.pose[2] + self.angles
        return self.position[None, :] + self.ranges[:, None] * np.stack(
            [np.cos(world), np.sin(world)], axis=1)

    def hits(self) -> np.ndarray:
        """Boolean mask of beams that struck an obstacle."""
        return self.ranges < self.range_max


@dataclass
class OccupancyMap:
    """The live map: sparse classifier state plus its sampling grid.

    Grid nodes sit at origin + (ix, iy) * resolution for 0 <= ix < nx,
    0 <= iy < ny with extents = (nx, ny). Every training sample, and
    therefore every relevance vector, lies exactly on a node, which is
    what lets serialization store locations as integers. ``seen`` holds
    row-major node indices already emitted as training samples, so each
    node trains the classifier at most once. A map loaded from the
    compressed format has no covariance or precisions; it answers
    queries through the corrected-weight bound and refuses retraining.
    """

    kernel: KernelParams
    config: ClassifierConfig
    origin: np.ndarray
    resolution: float
    extents: tuple
    robot_radius: float = DEFAULT_ROBOT_RADIUS
    rvs: RelevanceVectorSet = None
    posterior: WeightPosterior = None
    index: SpatialIndex = field(default_factory=SpatialIndex)
    seen: set = field(default_factory=set)
    degraded: bool = False
    compressed: bool = False
    updates: int = 0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).ravel()
        if self.origin.shape != (2,):
            raise ValueError("origin must be a 2-D point")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        nx, ny = int(self.extents[0]), int(self.extents[1])
        if nx < 1 or ny < 1:
            raise ValueError("extents must be at least one node each way")
        self.extents = (nx, ny)
        if not self.robot_radius >= 0:
            raise ValueError("robot_radius must be nonnegative")
        if self.rvs is None:
            self.rvs = RelevanceVectorSet.empty()
        if self.posterior is None:
            self.posterior = empty_posterior(self.config.bias)
        if len(self.index) != len(self.rvs):
            raise ValueError("index entry count must match the vector set")

    # ------------------------------------------------------------- grid
    @property
    def grid(self):
        return (self.origin.copy(), self.resolution, self.extents)

    def grid_point(self, ix: int, iy: int) -> np.ndarray:
        """World coordinates of node (ix, iy); the single source of
        node positions, reused bit for bit by the serializer."""
        return self.origin + np.array([ix, iy], dtype=float) * self.resolution

    def node_index(self, ix: int, iy: int) -> int:
        return iy * self.extents[0] + ix

    def nearest_node(self, point) -> tuple:
        p = np.asarray(point, dtype=float)
        ij = np.rint((p - self.origin) / self.resolution).astype(int)
        return int(ij[0]), int(ij[1])

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.extents[0] and 0 <= iy < self.extents[1]

    def contains(self, point) -> bool:
        """True if the point lies within the gridded area."""
        p = np.asarray(point, dtype=float)
        nx, ny = self.extents
        hi = self.origin + np.array([nx - 1, ny - 1]) * self.resolution
        return bool(np.all(p >= self.origin) and np.all(p <= hi))

    # ---------------------------------------------------------- queries
    def posterior_with_lambda(self) -> WeightPosterior:
        """Posterior with lambda_max filled in (cached on the map)."""
        if self.posterior.lambda_max is None:
            self.posterior = self.posterior.with_lambda_max()
        return self.posterior

    def query_occupancy(self, x):
        """P(occupied | x); scalar for one point, array for a stack.

        With the full covariance this is the predictive probability.
        A compressed map only has corrected weights to work with, so it
        returns the probit of the corrected score, an upper bound that
        agrees with the certificate machinery on which side of the
        decision threshold a point falls.
        """
        if self.posterior.covariance is not None:
            return predictive_probability(x, self.rvs, self.posterior,
                                          self.kernel)
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if len(self.rvs) == 0:
            out = np.full(X.shape[0], ndtr(self.config.bias))
            return float(out[0]) if single else out
        e = self.config.threshold
        lam = self.posterior.lambda_max or 0.0
        shift = -e * math.sqrt(max(lam, 0.0)) if e <= 0 else 0.0
        nu = self.posterior.mean + shift
        Phi = feature_matrix(X, self.rvs.points, self.kernel)
        out = ndtr(Phi @ nu + self.config.bias)
        return float(out[0]) if single else out

    def query_entropy(self, x):
        """Bernoulli entropy of the occupancy estimate, in bits."""
        p = np.asarray(self.query_occupancy(x))
        return bernoulli_entropy_bits(p) if p.ndim else \
            float(bernoulli_entropy_bits(p))

    def region_entropy(self, center, radius: float, n: int = 100,
                       seed: int = 0) -> float:
        """Mean point entropy over a disc, from n seeded samples."""
        if n < 1:
            raise ValueError("need at least one sample")
        if not radius > 0:
            raise ValueError("radius must be positive")
        rng = np.random.default_rng(seed)
        theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
        rho = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
        pts = np.asarray(center, dtype=float) + np.stack(
            [rho * np.cos(theta), rho * np.sin(theta)], axis=1)
        return float(np.mean(bernoulli_entropy_bits(
            np.asarray(self.query_occupancy(pts)))))


def bernoulli_entropy_bits(p):
    """-p log2 p - (1-p) log2 (1-p), with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
              + np.where(p < 1, (1 - p) * np.log2(np.where(p < 1, 1 - p, 1.0)),
                         0.0))
    return h


def empty_map(kernel: KernelParams, config: ClassifierConfig, origin,
              extents, resolution: float = DEFAULT_RESOLUTION,
              robot_radius: float = DEFAULT_ROBOT_RADIUS) -> OccupancyMap:
    """A fresh map over the given sampling grid, no vectors yet."""
    return OccupancyMap(kernel, config, origin, resolution, extents,
                        robot_radius)


# ------------------------------------------------------------------ training


def generate_training_data(scan: LidarScan, omap: OccupancyMap) \
        -> TrainingBatch:
    """Grid samples a scan labels, minus everything emitted before.

    Hitting beams inflate their endpoints into balls of the robot
    radius: nodes inside a ball (plus the node nearest each endpoint,
    so a zero radius still marks the obstacle) are occupied. Free nodes
    come from walking every ray at resolution steps and snapping to the
    grid, skipping any node that falls inside an inflation ball.
    Max-range beams contribute free samples only. Each node is emitted
    at most once over the map's lifetime; reprocessing an identical
    scan yields an empty batch.
    """
    pos = scan.position
    if not omap.contains(pos):
        raise ValueError("scan pose lies outside the map grid")
    res = omap.resolution
    r = omap.robot_radius
    nx, ny = omap.extents
    hits = scan.hits()
    ends = scan.endpoints()
    hit_ends = ends[hits]

    occupied = set()
    for endpoint in hit_ends:
        occupied.add(omap.nearest_node(endpoint))
        lo = np.ceil((endpoint - omap.origin - r) / res).astype(int)
        hi = np.floor((endpoint - omap.origin + r) / res).astype(int)
        for ix in range(lo[0], hi[0] + 1):
            for iy in range(lo[1], hi[1] + 1):
                node = omap.grid_point(ix, iy)
                if float(np.sum((node - endpoint) ** 2)) <= r * r:
                    occupied.add((ix, iy))
    occupied = {(ix, iy) for ix, iy in occupied if omap.in_bounds(ix, iy)}

    world = scan.pose[2] + scan.angles
    free = set()
    for i in range(len(scan)):
        u = np.array([math.cos(world[i]), math.sin(world[i])])
        ts = np.arange(0.0, scan.ranges[i] + 1e-9, res)
        pts = pos[None, :] + ts[:, None] * u
        ij = np.rint((pts - omap.origin) / res).astype(int)
        for ix, iy in dict.fromkeys(map(tuple, ij)):
            if not omap.in_bounds(ix, iy) or (ix, iy) in occupied:
                continue
            node = omap.grid_point(ix, iy)
            d2 = np.sum((hit_ends - node) ** 2, axis=1) if len(hit_ends) \
                else np.empty(0)
            if d2.size and float(np.min(d2)) <= r * r:
                continue  # inside someone's inflation ball
            free.add((ix, iy))

    points = []
    labels = []
    for label, nodes in ((1.0, occupied), (-1.0, free)):
        fresh = sorted(n for n in nodes
                       if omap.node_index(*n) not in omap.seen)
        for ix, iy in fresh:
            points.append(omap.grid_point(ix, iy))
            labels.append(label)
            omap.seen.add(omap.node_index(ix, iy))
    if not points:
        return TrainingBatch(np.zeros((0, 2)), np.zeros(0), k=omap.updates)
    return TrainingBatch(np.asarray(points), np.asarray(labels),
                         k=omap.updates)


def update_map(omap: OccupancyMap, scan: LidarScan) -> OccupancyMap:
    """Fold one scan into the map in place (also returned).

    Generates the difference batch, runs one incremental training call
    over the K_UPDATE nearest vectors, then swaps in the new vector
    set, posterior snapshot, and spatial index. An empty batch leaves
    the map untouched. Training trouble sets the degraded flag and
    keeps the last consistent model.
    """
    if omap.compressed:
        raise ValueError("compressed maps cannot be retrained")
    batch = generate_training_data(scan, omap)
    if len(batch) == 0:
        return omap
    result = train_online(omap.rvs, batch, omap.kernel, omap.config,
                          K=K_UPDATE, warm=omap.posterior)
    omap.rvs = result.rvs
    omap.posterior = result.posterior
    omap.degraded = omap.degraded or result.degraded
    index = SpatialIndex()
    for i in range(len(result.rvs)):
        index.insert(result.rvs.points[i], i, int(result.rvs.labels[i]))
    omap.index = index
    omap.updates += 1
    return omap


# -------------------------------------------------------------- persistence


class MapFormatError(ValueError):
    """Malformed map bytes; ``offset`` points at the offending byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


_MAGIC = b"SBKM"
_VERSION = 1
_MODE_PRECISION = 0
_MODE_MEAN = 1
_FLAG_DEGRADED = 1
# magic, version, mode, flags | eta, gamma row-major, cutoff | bias,
# threshold | origin, resolution | nx, ny | robot radius | lambda | count
_HEADER = struct.Struct("<4sHBB6d2d3dIIdfI")
_RECORD = struct.Struct("<If")
HEADER_SIZE = _HEADER.size


def serialize(omap: OccupancyMap, mode: str = "mean") -> bytes:
    """Pack the map into the little-endian on-disk format.

    One 8-byte record per vector: the node's row-major u32 grid index
    and one f32 whose sign is the label. mode="precision" stores the
    prior precision and supports exact retraining after a reload;
    mode="mean" (default) stores the weight mean plus a single global
    lambda_max in the header, all the certificate machinery needs.
    """
    if mode == "mean":
        mode_id = _MODE_MEAN
    elif mode == "precision":
        mode_id = _MODE_PRECISION
        if omap.compressed:
            raise ValueError("compressed map has no precisions to store")
    else:
        raise ValueError(f"unknown serialization mode: {mode!r}")
    nx, ny = omap.extents
    count = len(omap.rvs)
    lam = 0.0
    if mode_id == _MODE_MEAN and count:
        lam = omap.posterior_with_lambda().lambda_max or 0.0
    g = omap.kernel.gamma
    flags = _FLAG_DEGRADED if omap.degraded else 0
    parts = [_HEADER.pack(
        _MAGIC, _VERSION, mode_id, flags,
        omap.kernel.eta, g[0, 0], g[0, 1], g[1, 0], g[1, 1],
        omap.kernel.cutoff, omap.config.bias, omap.config.threshold,
        omap.origin[0], omap.origin[1], omap.resolution, nx, ny,
        omap.robot_radius, lam, count)]
    for m in range(count):
        p = omap.rvs.points[m]
        ix, iy = omap.nearest_node(p)
        if not omap.in_bounds(ix, iy) or \
                not np.array_equal(omap.grid_point(ix, iy), p):
            raise ValueError(
                f"vector {m} at {p} does not sit on a grid node")
        if mode_id == _MODE_PRECISION:
            value = omap.rvs.labels[m] * omap.rvs.precisions[m]
        else:
            value = omap.posterior.mean[m]
        packed = np.float32(value)
        if not np.isfinite(packed) or packed == 0:
            # the float's sign carries the label, so zero is unusable
            raise ValueError(f"vector {m} value {value} unusable as float32")
        parts.append(_RECORD.pack(omap.node_index(ix, iy), float(packed)))
    return b"".join(parts)


def deserialize(data: bytes) -> OccupancyMap:
    """Rebuild a map from bytes produced by serialize.

    Precision records reconstruct the full posterior by refitting the
    Laplace approximation, so the reloaded map trains on like the
    original. Mean records produce a compressed, query-only map. The
    ``seen`` bookkeeping is not part of the format and restarts empty.
    """
    if len(data) < HEADER_SIZE:
        raise MapFormatError("truncated header", len(data))
    (magic, version, mode_id, flags, eta, g00, g01, g10, g11, cutoff,
     bias, threshold, ox, oy, resolution, nx, ny, robot_radius, lam,
     count) = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise MapFormatError(f"bad magic {magic!r}", 0)
    if version != _VERSION:
        raise MapFormatError(f"unsupported version {version}", 4)
    if mode_id not in (_MODE_PRECISION, _MODE_MEAN):
        raise MapFormatError(f"unknown mode {mode_id}", 6)
    if resolution <= 0 or not math.isfinite(resolution):
        raise MapFormatError(f"bad resolution {resolution}", 96)
    if nx < 1 or ny < 1:
        raise MapFormatError(f"bad extents {(nx, ny)}", 104)
    expected = HEADER_SIZE + count * _RECORD.size
    if len(data) != expected:
        raise MapFormatError(
            f"expected {expected} bytes for {count} records, got "
            f"{len(data)}", min(len(data), expected))

    kernel = KernelParams(eta=eta, gamma=np.array([[g00, g01], [g10, g11]]),
                          cutoff=cutoff)
    config = ClassifierConfig(bias=bias, threshold=threshold)
    omap = OccupancyMap(kernel, config, (ox, oy), resolution, (nx, ny),
                        robot_radius, degraded=bool(flags & _FLAG_DEGRADED),
                        compressed=(mode_id == _MODE_MEAN))

    points = np.zeros((count, 2))
    values = np.zeros(count)
    labels = np.zeros(count)
    for m in range(count):
        off = HEADER_SIZE + m * _RECORD.size
        node, value = _RECORD.unpack_from(data, off)
        if node >= nx * ny:
            raise MapFormatError(f"record {m} node {node} outside grid", off)
        if not math.isfinite(value) or value == 0.0:
            raise MapFormatError(f"record {m} has bad value {value}", off + 4)
        points[m] = omap.grid_point(node % nx, node // nx)
        values[m] = value
        labels[m] = 1.0 if value > 0 else -1.0

    index = SpatialIndex()
    for m in range(count):
        index.insert(points[m], m, int(labels[m]))
    if mode_id == _MODE_PRECISION:
        if count:
            rvs = RelevanceVectorSet(points, labels, np.abs(values))
            data_batch = TrainingBatch(points, labels)
            posterior = laplace_approximation(points, np.abs(values),
                                              data_batch, kernel, config)
        else:
            rvs = RelevanceVectorSet.empty()
            posterior = empty_posterior(bias)
    else:
        rvs = RelevanceVectorSet(points, labels, np.ones(count)) if count \
            else RelevanceVectorSet.empty()
        posterior = WeightPosterior(values, None, bias,
                                    lambda_max=max(float(lam), 0.0))
    omap.rvs = rvs
    omap.posterior = posterior
    omap.index = index
    return omap
