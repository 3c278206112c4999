"""Ground-truth grid worlds, lidar simulation, and motion rollouts.

The environment is a boolean cell grid: cells[iy, ix] covers the square
[origin + (ix, iy) * res, origin + (ix + 1, iy + 1) * res), so world
coordinates grow rightward and upward while text files list the top row
first. Everything outside the grid counts as free space; rays simply
fly until their range runs out.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .mapping import LidarScan


@dataclass
class GridEnvironment:
    """Occupancy ground truth on a uniform grid."""

    cells: np.ndarray
    resolution: float
    origin: np.ndarray

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=bool)
        if self.cells.ndim != 2 or self.cells.size == 0:
            raise ValueError("cells must be a non-empty 2-D grid")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        self.origin = np.asarray(self.origin, dtype=float).ravel()
        if self.origin.shape != (2,):
            raise ValueError("origin must be a 2-D point")

    @classmethod
    def from_text(cls, text: str) -> "GridEnvironment":
        """Parse the ASCII world format.

        Header lines ``resolution R`` and ``origin X Y`` in either
        order, then one line per grid row made of '#' (occupied) and
        '.' (free). The first grid line is the top row of the world.
        """
        resolution = None
        origin = None
        rows: List[str] = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            head = line.split()
            if head[0] == "resolution" and not rows:
                resolution = float(head[1])
            elif head[0] == "origin" and not rows:
                origin = np.array([float(head[1]), float(head[2])])
            else:
                if set(line) - {"#", "."}:
                    raise ValueError(f"bad grid row: {raw!r}")
                rows.append(line)
        if resolution is None or origin is None or not rows:
            raise ValueError("world needs resolution, origin, and grid rows")
        if len({len(r) for r in rows}) != 1:
            raise ValueError("grid rows must have equal length")
        top_first = np.array([[c == "#" for c in r] for r in rows])
        return cls(np.flipud(top_first), resolution, origin)

    def to_text(self) -> str:
        lines = [f"resolution {self.resolution}",
                 f"origin {self.origin[0]} {self.origin[1]}"]
        for row in np.flipud(self.cells):
            lines.append("".join("#" if c else "." for c in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_pgm(cls, data: bytes, resolution: float,
                 origin=(0.0, 0.0)) -> "GridEnvironment":
        """8-bit PGM (P2 or P5); values below 128 are occupied."""
        if data[:2] not in (b"P2", b"P5"):
            raise ValueError("not a PGM file")
        binary = data[:2] == b"P5"
        # strip comments, then magic, width, height, maxval
        tokens: List[bytes] = []
        pos = 0
        while len(tokens) < 4:
            if pos >= len(data):
                raise ValueError("truncated PGM header")
            if data[pos:pos + 1] == b"#":
                pos = data.index(b"\n", pos) + 1
                continue
            if data[pos:pos + 1].isspace():
                pos += 1
                continue
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
        width, height, maxval = (int(t) for t in tokens[1:])
        if maxval > 255:
            raise ValueError("only 8-bit PGM supported")
        if binary:
            raster = np.frombuffer(data, dtype=np.uint8,
                                   count=width * height, offset=pos + 1)
        else:
            raster = np.array(data[pos:].split()[:width * height],
                              dtype=np.uint8)
        if raster.size != width * height:
            raise ValueError("truncated PGM raster")
        top_first = raster.reshape(height, width) < 128
        return cls(np.flipud(top_first), resolution, np.asarray(origin, float))

    @property
    def shape(self):
        return self.cells.shape

    @property
    def extents(self):
        """(xmin, ymin, xmax, ymax) of the gridded area."""
        ny, nx = self.cells.shape
        return (float(self.origin[0]), float(self.origin[1]),
                float(self.origin[0] + nx * self.resolution),
                float(self.origin[1] + ny * self.resolution))

    def cell_of(self, point) -> tuple:
        p = np.asarray(point, dtype=float)
        ix = int(math.floor((p[0] - self.origin[0]) / self.resolution))
        iy = int(math.floor((p[1] - self.origin[1]) / self.resolution))
        return iy, ix

    def occupied_at(self, point) -> bool:
        """Ground-truth occupancy; points off the grid are free."""
        iy, ix = self.cell_of(point)
        ny, nx = self.cells.shape
        if 0 <= iy < ny and 0 <= ix < nx:
            return bool(self.cells[iy, ix])
        return False


@dataclass
class RobotState:
    position: np.ndarray
    yaw: float
    speed: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).ravel()
        if self.position.shape != (2,):
            raise ValueError("position must be 2-D")
        if not (np.all(np.isfinite(self.position))
                and math.isfinite(self.yaw) and math.isfinite(self.speed)):
            raise ValueError("state must be finite")

    @property
    def pose(self) -> tuple:
        return (float(self.position[0]), float(self.position[1]),
                float(self.yaw))


@dataclass(frozen=True)
class SensorSpec:
    """Beam layout of the simulated scanner."""

    n_beams: int = 180
    fov: float = 2.0 * math.pi
    range_max: float = 10.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.n_beams < 1:
            raise ValueError("need at least one beam")
        if not 0 < self.fov <= 2.0 * math.pi + 1e-12:
            raise ValueError("fov must be in (0, 2 pi]")
        if not self.range_max > 0:
            raise ValueError("range_max must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    def beam_angles(self) -> np.ndarray:
        """Sensor-frame beam angles; a full circle avoids duplicating
        the wrap-around beam."""
        full = abs(self.fov - 2.0 * math.pi) < 1e-12
        return np.linspace(-self.fov / 2.0, self.fov / 2.0, self.n_beams,
                           endpoint=not full)


def cast_ray(env: GridEnvironment, start, angle: float,
             range_max: float) -> float:
    """Distance to the first occupied cell along the ray, else +inf.

    Steps cell to cell through the grid (the classic voxel traversal),
    reporting the parameter at which the ray enters the occupied cell.
    Leaving the grid means free flight: the grid is convex, the ray
    cannot re-enter.
    """
    start = np.asarray(start, dtype=float)
    res = env.resolution
    ny, nx = env.cells.shape
    x = float(start[0] - env.origin[0])
    y = float(start[1] - env.origin[1])
    dx = math.cos(angle)
    dy = math.sin(angle)
    ix = int(math.floor(x / res))
    iy = int(math.floor(y / res))

    if dx > 0:
        step_x, t_max_x, t_delta_x = 1, ((ix + 1) * res - x) / dx, res / dx
    elif dx < 0:
        step_x, t_max_x, t_delta_x = -1, (ix * res - x) / dx, -res / dx
    else:
        step_x, t_max_x, t_delta_x = 0, math.inf, math.inf
    if dy > 0:
        step_y, t_max_y, t_delta_y = 1, ((iy + 1) * res - y) / dy, res / dy
    elif dy < 0:
        step_y, t_max_y, t_delta_y = -1, (iy * res - y) / dy, -res / dy
    else:
        step_y, t_max_y, t_delta_y = 0, math.inf, math.inf

    t = 0.0
    inside_once = False
    while t <= range_max:
        inside = 0 <= ix < nx and 0 <= iy < ny
        if inside:
            inside_once = True
            if env.cells[iy, ix]:
                return t
        elif inside_once:
            return math.inf  # left the grid for good
        if t_max_x < t_max_y:
            t = t_max_x
            t_max_x += t_delta_x
            ix += step_x
        else:
            t = t_max_y
            t_max_y += t_delta_y
            iy += step_y
    return math.inf


def simulate_scan(env: GridEnvironment, pose, spec: SensorSpec,
                  seed: Optional[int] = None) -> LidarScan:
    """Cast one beam per angle and package the ranges as a LidarScan.

    Gaussian range noise (std spec.noise_sigma) is drawn from a
    generator seeded with ``seed``, so equal seeds give equal scans;
    zero sigma never draws and is deterministic outright.
    """
    x, y, yaw = (float(pose[0]), float(pose[1]), float(pose[2]))
    if env.occupied_at((x, y)):
        raise ValueError("scan pose lies inside an occupied cell")
    angles = spec.beam_angles()
    ranges = np.empty(angles.shape[0])
    for i, a in enumerate(angles):
        hit = cast_ray(env, (x, y), yaw + a, spec.range_max)
        ranges[i] = min(hit, spec.range_max)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noisy = ranges + rng.normal(0.0, spec.noise_sigma, size=ranges.shape)
        # noise must not break the range invariants
        ranges = np.clip(noisy, 1e-9, spec.range_max)
    return LidarScan((x, y, yaw), angles, ranges, spec.range_max)


def rollout_linear(p0, v, dt: float) -> np.ndarray:
    """Endpoint of the constant-velocity segment p0 + t v, t in [0, dt]."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return np.asarray(p0, dtype=float) + dt * np.asarray(v, dtype=float)


def rollout_poly(p0, theta0: float, v0: float, a, dt: float):
    """Constant-acceleration arc from speed v0 at heading theta0.

    p(t) = p0 + t v0 [cos theta0, sin theta0] + t^2/2 a. Returns the
    curve as a callable on [0, dt] plus the end state whose heading is
    the direction of the terminal velocity (theta0 if that velocity
    vanishes) and whose speed is its norm.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    p0 = np.asarray(p0, dtype=float)
    a = np.asarray(a, dtype=float)
    u = np.array([math.cos(theta0), math.sin(theta0)])
    vel0 = v0 * u

    def curve(t: float) -> np.ndarray:
        return p0 + t * vel0 + (0.5 * t * t) * a

    vel_end = vel0 + dt * a
    speed = float(np.linalg.norm(vel_end))
    yaw = math.atan2(vel_end[1], vel_end[0]) if speed > 0 else float(theta0)
    return curve, RobotState(curve(dt), yaw, speed)


# ---------------------------------------------------------------------------
# scan logs


def save_scan_log(scans: Sequence[LidarScan], path,
                  times: Optional[Sequence[float]] = None) -> None:
    """Write scans as JSON Lines; beams must be uniformly spaced."""
    with open(path, "w") as fh:
        for k, scan in enumerate(scans):
            ang = scan.angles
            inc = float(ang[1] - ang[0]) if len(ang) > 1 else 0.0
            if len(ang) > 2 and not np.allclose(np.diff(ang), inc,
                                                atol=1e-9):
                raise ValueError("scan log needs uniform beam spacing")
            rec = {
                "t": float(times[k]) if times is not None else float(k),
                "pose": [scan.pose[0], scan.pose[1], scan.pose[2]],
                "angle_min": float(ang[0]) if len(ang) else 0.0,
                "angle_inc": inc,
                "range_max": scan.range_max,
                "ranges": [float(r) for r in scan.ranges],
            }
            fh.write(json.dumps(rec) + "\n")


def load_scan_log(path) -> List[LidarScan]:
    scans = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            n = len(rec["ranges"])
            angles = rec["angle_min"] + rec["angle_inc"] * np.arange(n)
            scans.append(LidarScan(tuple(rec["pose"]), angles,
                                   np.array(rec["ranges"], dtype=float),
                                   float(rec["range_max"])))
    return scans
