"""Motion-primitive A* with certificate collision checks, the
scan-train-plan-act loop, and entropy-driven exploration.

Planning never touches ground truth: successor filtering goes through
classify_segment / classify_curve on the learned map, so unknown space
is optimistically free and safety comes from replanning after every
scan.
"""

from __future__ import annotations

import heapq
import json
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .classify import CorrectedWeights, classify_curve, classify_segment
from .evaluation import grid_entropy
from .mapping import OccupancyMap, update_map
from .sim import (GridEnvironment, RobotState, SensorSpec, rollout_linear,
                  rollout_poly, simulate_scan)

SEGMENT = "segment"
POLY = "poly"

_TIE_EPS = 1e-9  # entropy ties resolve to the lowest candidate index


@dataclass(frozen=True)
class MotionPrimitive:
    """One fixed-duration action: a velocity (segment) or an
    acceleration (poly curve), with its motion cost.

    Poly cost is pinned to (|a|^2 + 2) tau; the +2 keeps idling
    expensive so plans prefer progress. Segments use the same form
    with the velocity norm.
    """

    kind: str
    vector: tuple
    duration: float
    cost: float

    def __post_init__(self):
        if self.kind not in (SEGMENT, POLY):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        vec = tuple(float(c) for c in self.vector)
        object.__setattr__(self, "vector", vec)
        if len(vec) != 2 or not all(math.isfinite(c) for c in vec):
            raise ValueError("vector must be two finite components")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.cost > 0:
            raise ValueError("cost must be positive")
        if self.kind == POLY:
            want = (vec[0] ** 2 + vec[1] ** 2 + 2.0) * self.duration
            if abs(self.cost - want) > 1e-9 * max(1.0, want):
                raise ValueError("poly cost must be (|a|^2 + 2) tau")


def segment_primitives(v_max: float, tau: float = 1.0) \
        -> List[MotionPrimitive]:
    """Eight compass directions at speed v_max."""
    if not v_max > 0:
        raise ValueError("v_max must be positive")
    cost = (v_max ** 2 + 2.0) * tau
    out = []
    for k in range(8):
        ang = k * math.pi / 4.0
        out.append(MotionPrimitive(SEGMENT,
                                   (v_max * math.cos(ang),
                                    v_max * math.sin(ang)), tau, cost))
    return out


def poly_primitives(a_max: float, tau: float = 1.0) -> List[MotionPrimitive]:
    """Accelerations on the 3x3 grid over [-a_max, a_max]^2."""
    if not a_max > 0:
        raise ValueError("a_max must be positive")
    out = []
    for ay in (-a_max, 0.0, a_max):
        for ax in (-a_max, 0.0, a_max):
            cost = (ax * ax + ay * ay + 2.0) * tau
            out.append(MotionPrimitive(POLY, (ax, ay), tau, cost))
    return out


# ---------------------------------------------------------------------------
# rollouts and successor generation


def rollout_primitive(state: RobotState, prim: MotionPrimitive) \
        -> Tuple[Callable[[float], np.ndarray], RobotState]:
    """Curve on [0, duration] plus the end state for one primitive."""
    if prim.kind == SEGMENT:
        v = np.asarray(prim.vector)
        end = rollout_linear(state.position, v, prim.duration)
        speed = float(np.linalg.norm(v))
        yaw = math.atan2(v[1], v[0]) if speed > 0 else state.yaw
        p0 = state.position.copy()

        def curve(t: float, p0=p0, v=v) -> np.ndarray:
            return p0 + t * v

        return curve, RobotState(end, yaw, speed)
    return rollout_poly(state.position, state.yaw, state.speed,
                        np.asarray(prim.vector), prim.duration)


def rollout_partial(state: RobotState, prim: MotionPrimitive,
                    dt: float) -> RobotState:
    """State after following the primitive for dt <= duration."""
    if not 0 < dt <= prim.duration + 1e-12:
        raise ValueError("dt must lie within the primitive duration")
    curve, end = rollout_primitive(state, prim)
    if dt >= prim.duration - 1e-12:
        return end
    if prim.kind == SEGMENT:
        return RobotState(curve(dt), end.yaw, end.speed)
    u = np.array([math.cos(state.yaw), math.sin(state.yaw)])
    vel = state.speed * u + dt * np.asarray(prim.vector)
    speed = float(np.linalg.norm(vel))
    yaw = math.atan2(vel[1], vel[0]) if speed > 0 else state.yaw
    return RobotState(curve(dt), yaw, speed)


def corrected_weights(omap: OccupancyMap) -> CorrectedWeights:
    """Certificate-ready weights for the map's current posterior."""
    if len(omap.rvs) > 0 and not omap.compressed:
        omap.posterior_with_lambda()
    return CorrectedWeights.from_posterior(omap.rvs, omap.posterior,
                                           omap.config)


def as_state(start) -> RobotState:
    if isinstance(start, RobotState):
        return start
    start = tuple(float(c) for c in start)
    if len(start) == 2:
        return RobotState(np.array(start), 0.0, 0.0)
    if len(start) == 3:
        return RobotState(np.array(start[:2]), start[2], 0.0)
    raise ValueError("start must be (x, y), (x, y, yaw), or a RobotState")


def get_successors(state: RobotState, omap: OccupancyMap,
                   primitives: Sequence[MotionPrimitive],
                   corrected: Optional[CorrectedWeights] = None) \
        -> List[Tuple[RobotState, MotionPrimitive]]:
    """Roll out each primitive and keep it iff its path is certified.

    Works entirely from the learned map; a fresh map certifies
    everything because unobserved space counts as free.
    """
    cw = corrected if corrected is not None else corrected_weights(omap)
    out = []
    for prim in primitives:
        curve, end = rollout_primitive(state, prim)
        if prim.kind == SEGMENT:
            cert = classify_segment(state.position, end.position, cw,
                                    omap.kernel, omap.config)
        else:
            cert = classify_curve(curve, prim.duration, cw,
                                  omap.kernel, omap.config)
        if cert.kind.endswith("Free"):
            out.append((end, prim))
    return out


# ---------------------------------------------------------------------------
# A* search


@dataclass(frozen=True)
class PlannerLimits:
    v_max: float = 1.0
    max_expansions: int = 20000
    clearance: float = 0.0

    def __post_init__(self):
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")
        if self.max_expansions < 1:
            raise ValueError("need at least one expansion")
        if self.clearance < 0:
            raise ValueError("clearance must be nonnegative")


@dataclass(frozen=True)
class PlanResult:
    states: tuple
    primitives: tuple
    total_cost: float
    status: str  # Reached | NoPath | Timeout
    expansions: int = 0


def heuristic_factor(primitives: Sequence[MotionPrimitive],
                     v_max: float) -> float:
    """Largest per-meter underestimate of the remaining cost.

    Every primitive moves at most d_max meters (its speed times
    duration for segments, the capped v_max times duration for poly)
    while paying its full cost, so cost / d_max lower-bounds the price
    of each meter of progress. Multiplying the Euclidean distance to
    the goal by the minimum such ratio never overestimates; for poly
    sets the minimum is the coasting primitive's 2 / v_max.
    """
    best = None
    for p in primitives:
        if p.kind == SEGMENT:
            d = math.hypot(*p.vector) * p.duration
        else:
            d = v_max * p.duration
        if d <= 0:
            continue
        ratio = p.cost / d
        best = ratio if best is None else min(best, ratio)
    if best is None:
        raise ValueError("no primitive can make progress")
    return best


def _quantize(state: RobotState, res_half: float, v_max: float) -> tuple:
    return (int(round(state.position[0] / res_half)),
            int(round(state.position[1] / res_half)),
            int(round(state.yaw / (math.pi / 8.0))) % 16,
            int(round(4.0 * state.speed / v_max)))


def astar_plan(omap: OccupancyMap, start, goal_region,
               primitives: Sequence[MotionPrimitive],
               limits: Optional[PlannerLimits] = None) -> PlanResult:
    """A* over primitive rollouts on the learned map.

    goal_region is ((x, y), radius); any state whose position falls in
    the disc is terminal. The closed set quantizes position to half the
    map resolution, heading to pi/8, and speed to quarters of v_max.
    Successor states faster than v_max are discarded, which is what
    makes the coasting-cost heuristic admissible. A positive clearance
    additionally discards endpoints that close to a positive vector:
    evidence added by the next scans thickens obstacle faces, and a
    state parked inside that future margin could fail every outgoing
    certificate, retreat included. Both filters only remove edges, so
    the heuristic stays a lower bound.
    """
    limits = limits or PlannerLimits()
    start = as_state(start)
    center = np.asarray(goal_region[0], dtype=float)
    radius = float(goal_region[1])
    if not radius > 0:
        raise ValueError("goal radius must be positive")
    if start.speed > limits.v_max + 1e-9:
        raise ValueError("start exceeds the planner speed cap")

    def togo(state: RobotState) -> float:
        return max(0.0, float(np.linalg.norm(state.position - center))
                   - radius)

    if togo(start) == 0.0:
        return PlanResult((start,), (), 0.0, "Reached", 0)
    factor = heuristic_factor(primitives, limits.v_max)
    cw = corrected_weights(omap)
    pos_pts = omap.rvs.points[omap.rvs.labels > 0] if len(omap.rvs) \
        else np.zeros((0, 2))
    clear_sq = limits.clearance ** 2

    def too_close(p: np.ndarray) -> bool:
        if clear_sq == 0.0 or pos_pts.shape[0] == 0:
            return False
        return bool(np.min(np.sum((pos_pts - p) ** 2, axis=1)) < clear_sq)

    res_half = omap.resolution / 2.0
    start_key = _quantize(start, res_half, limits.v_max)
    g_best = {start_key: 0.0}
    parent = {start_key: None}
    open_heap = [(factor * togo(start), 0, start, start_key)]
    tick = 1
    closed = set()
    expansions = 0
    while open_heap:
        _, _, state, key = heapq.heappop(open_heap)
        if key in closed:
            continue
        closed.add(key)
        if togo(state) == 0.0:
            chain_states = [state]
            chain_prims = []
            k = key
            while parent[k] is not None:
                k, prim, prev = parent[k]
                chain_states.append(prev)
                chain_prims.append(prim)
            chain_states.reverse()
            chain_prims.reverse()
            return PlanResult(tuple(chain_states), tuple(chain_prims),
                              g_best[key], "Reached", expansions)
        expansions += 1
        if expansions > limits.max_expansions:
            return PlanResult((start,), (), math.inf, "Timeout", expansions)
        g_here = g_best[key]
        for nxt, prim in get_successors(state, omap, primitives, cw):
            if nxt.speed > limits.v_max + 1e-9:
                continue
            if too_close(nxt.position):
                continue
            nkey = _quantize(nxt, res_half, limits.v_max)
            g_new = g_here + prim.cost
            if nkey in closed or g_new >= g_best.get(nkey, math.inf):
                continue
            g_best[nkey] = g_new
            parent[nkey] = (key, prim, state)
            heapq.heappush(open_heap,
                           (g_new + factor * togo(nxt), tick, nxt, nkey))
            tick += 1
    return PlanResult((start,), (), math.inf, "NoPath", expansions)


# ---------------------------------------------------------------------------
# navigation loop


@dataclass(frozen=True)
class NavConfig:
    sensor: SensorSpec
    primitives: tuple
    v_max: float = 1.0
    max_steps: int = 80
    nopath_abort: int = 3
    max_expansions: int = 20000
    clearance: float = 0.75
    scan_seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise ValueError("need at least one primitive")
        if self.max_steps < 1 or self.nopath_abort < 1:
            raise ValueError("step and abort limits must be positive")


@dataclass
class NavResult:
    status: str  # Reached | Abort | StepLimit
    trace: List[dict]
    states: List[RobotState]
    executed: List[Tuple[RobotState, MotionPrimitive, float]]


def _describe(prim: MotionPrimitive) -> str:
    return f"{prim.kind}:{prim.vector[0]:.3f},{prim.vector[1]:.3f}"


def trace_jsonl(trace: Sequence[dict]) -> str:
    return "".join(json.dumps(row) + "\n" for row in trace)


def navigate(env: GridEnvironment, omap: OccupancyMap, start, goal_region,
             config: NavConfig) -> NavResult:
    """Scan, retrain, replan, move one primitive; repeat.

    Plans only on the learned map and replans from scratch after every
    scan, so a primitive invalidated by new evidence is simply never
    chosen again. Aborts after nopath_abort consecutive planning
    failures. Each trace row records the pose the scan was taken from
    and the action chosen there.
    """
    state = as_state(start)
    center = np.asarray(goal_region[0], dtype=float)
    radius = float(goal_region[1])
    limits = PlannerLimits(config.v_max, config.max_expansions,
                           config.clearance)
    trace: List[dict] = []
    states = [state]
    executed: List[Tuple[RobotState, MotionPrimitive, float]] = []
    status = "StepLimit"
    failures = 0
    for step in range(config.max_steps):
        seed = None if config.scan_seed is None else config.scan_seed + step
        scan = simulate_scan(env, state.pose, config.sensor, seed=seed)
        tic = time.perf_counter()
        update_map(omap, scan)
        update_ms = (time.perf_counter() - tic) * 1e3
        row = {"step": step, "pose": list(state.pose), "action": "",
               "plan_cost": None, "map_update_ms": update_ms,
               "plan_ms": 0.0, "n_rvs": len(omap.rvs)}
        if float(np.linalg.norm(state.position - center)) <= radius:
            row["action"] = "reached"
            row["plan_cost"] = 0.0
            trace.append(row)
            status = "Reached"
            break
        tic = time.perf_counter()
        plan = astar_plan(omap, state, goal_region, config.primitives,
                          limits)
        row["plan_ms"] = (time.perf_counter() - tic) * 1e3
        if plan.status != "Reached":
            failures += 1
            row["action"] = f"replan_failed:{plan.status}"
            trace.append(row)
            if failures >= config.nopath_abort:
                status = "Abort"
                break
            continue
        failures = 0
        if not plan.primitives:
            row["action"] = "reached"
            row["plan_cost"] = 0.0
            trace.append(row)
            status = "Reached"
            break
        prim = plan.primitives[0]
        row["action"] = _describe(prim)
        row["plan_cost"] = plan.total_cost
        trace.append(row)
        executed.append((state, prim, prim.duration))
        state = plan.states[1]
        states.append(state)
    return NavResult(status, trace, states, executed)


# ---------------------------------------------------------------------------
# exploration


def frontier_candidates(scan, yaws=(0.0, math.pi / 4.0, math.pi / 2.0,
                                    3.0 * math.pi / 4.0),
                        tol: float = 1e-9) -> List[Tuple[float, float,
                                                         float]]:
    """Candidate sensing poses: every max-range beam endpoint, each
    paired with the four canonical yaw angles."""
    x, y, yaw0 = scan.pose
    out = []
    for ang, rng in zip(scan.angles, scan.ranges):
        if rng < scan.range_max - tol:
            continue
        ex = x + rng * math.cos(yaw0 + ang)
        ey = y + rng * math.sin(yaw0 + ang)
        for yaw in yaws:
            out.append((float(ex), float(ey), float(yaw)))
    return out


def select_exploration_goal(omap: OccupancyMap, candidates,
                            sensor: SensorSpec,
                            min_clearance: float = 2.0,
                            region_samples: int = 100) \
        -> Optional[Tuple[float, float, float]]:
    """Pick the candidate whose sensor footprint has maximal entropy.

    Candidates closer than min_clearance to any positive relevance
    vector are discarded first; if that removes them all, returns None
    to signal that exploration is complete. Entropy ties within 1e-9
    keep the earliest candidate.
    """
    if not candidates:
        raise ValueError("candidate list must be nonempty")
    pos_pts = omap.rvs.points[omap.rvs.labels > 0] if len(omap.rvs) \
        else np.zeros((0, 2))
    best = None
    best_h = -math.inf
    for cand in candidates:
        p = np.asarray(cand[:2], dtype=float)
        if pos_pts.shape[0]:
            d2 = np.sum((pos_pts - p) ** 2, axis=1)
            if float(d2.min()) < min_clearance ** 2:
                continue
        h = omap.region_entropy(p, sensor.range_max, n=region_samples)
        if h > best_h + _TIE_EPS:
            best_h = h
            best = (float(cand[0]), float(cand[1]), float(cand[2]))
    return best


@dataclass(frozen=True)
class ExploreConfig:
    sensor: SensorSpec
    primitives: tuple
    v_max: float = 1.0
    steps: int = 40
    period: float = 0.5
    goal_radius: float = 0.5
    min_clearance: float = 2.0
    clearance: float = 0.75
    entropy_stride: int = 2
    max_expansions: int = 20000
    nopath_abort: int = 5

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise ValueError("need at least one primitive")
        if not self.period > 0:
            raise ValueError("period must be positive")


@dataclass
class ExploreResult:
    status: str  # Done | NoFrontier | Abort
    trace: List[dict]
    entropy: List[Tuple[float, float, int]]  # (sim time, bits, n_rvs)
    states: List[RobotState]
    executed: List[Tuple[RobotState, MotionPrimitive, float]]


def explore(env: GridEnvironment, omap: OccupancyMap, start,
            config: ExploreConfig) -> ExploreResult:
    """Entropy-driven roaming: re-pick the goal every ``period``
    seconds of sim time, executing only that slice of each plan.

    Planning failures against the current goal discard its candidates
    and fall through to the next-best frontier; a scan position whose
    every frontier is unreachable counts toward the abort limit.
    """
    state = as_state(start)
    limits = PlannerLimits(config.v_max, config.max_expansions,
                           config.clearance)
    trace: List[dict] = []
    entropy: List[Tuple[float, float, int]] = []
    states = [state]
    executed: List[Tuple[RobotState, MotionPrimitive, float]] = []
    status = "Done"
    t_sim = 0.0
    failures = 0
    for step in range(config.steps):
        scan = simulate_scan(env, state.pose, config.sensor)
        tic = time.perf_counter()
        update_map(omap, scan)
        update_ms = (time.perf_counter() - tic) * 1e3
        entropy.append((t_sim, grid_entropy(omap, config.entropy_stride),
                        len(omap.rvs)))
        row = {"step": step, "pose": list(state.pose), "action": "",
               "plan_cost": None, "map_update_ms": update_ms,
               "plan_ms": 0.0, "n_rvs": len(omap.rvs)}
        candidates = frontier_candidates(scan)
        tic = time.perf_counter()
        goal = select_exploration_goal(omap, candidates, config.sensor,
                                       config.min_clearance) \
            if candidates else None
        if goal is None:
            # no max-range beams, or every endpoint hugs the walls
            row["plan_ms"] = (time.perf_counter() - tic) * 1e3
            row["action"] = "no_frontier"
            trace.append(row)
            status = "NoFrontier"
            break
        plan = None
        while goal is not None:
            attempt = astar_plan(omap, state,
                                 (goal[:2], config.goal_radius),
                                 config.primitives, limits)
            if attempt.status == "Reached" and attempt.primitives:
                plan = attempt
                break
            # unreachable frontier: drop this position, try the next
            candidates = [c for c in candidates
                          if math.hypot(c[0] - goal[0], c[1] - goal[1])
                          > _TIE_EPS]
            goal = select_exploration_goal(omap, candidates, config.sensor,
                                           config.min_clearance) \
                if candidates else None
        row["plan_ms"] = (time.perf_counter() - tic) * 1e3
        if plan is None:
            failures += 1
            row["action"] = "replan_failed"
            trace.append(row)
            if failures >= config.nopath_abort:
                status = "Abort"
                break
            continue
        failures = 0
        prim = plan.primitives[0]
        dt = min(config.period, prim.duration)
        row["action"] = _describe(prim)
        row["plan_cost"] = plan.total_cost
        trace.append(row)
        executed.append((state, prim, dt))
        state = rollout_partial(state, prim, dt)
        states.append(state)
        t_sim += dt
    if status == "Done":
        # closing measurement so the series covers the final pose
        scan = simulate_scan(env, state.pose, config.sensor)
        update_map(omap, scan)
        entropy.append((t_sim, grid_entropy(omap, config.entropy_stride),
                        len(omap.rvs)))
    return ExploreResult(status, trace, entropy, states, executed)


def entropy_csv(rows: Sequence[Tuple[float, float, int]]) -> str:
    lines = ["t,entropy_bits,n_rvs"]
    for t, h, n in rows:
        lines.append(f"{t:.3f},{h:.9f},{n}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# safety oracle helpers (exact point-to-cell distances on ground truth)


def executed_polyline(executed, points_per_primitive: int = 100) \
        -> np.ndarray:
    """Dense samples of every executed slice, for post-hoc checks."""
    pts = []
    for state, prim, dt in executed:
        curve, _ = rollout_primitive(state, prim)
        for t in np.linspace(0.0, dt, points_per_primitive):
            pts.append(curve(t))
    if not pts:
        return np.zeros((0, 2))
    return np.asarray(pts)


def min_obstacle_distance(env: GridEnvironment, point) -> float:
    """Exact distance from a point to the nearest occupied cell square."""
    p = np.asarray(point, dtype=float)
    occ = np.argwhere(env.cells)
    if occ.shape[0] == 0:
        return math.inf
    res = env.resolution
    lows = env.origin + occ[:, ::-1] * res
    dx = np.maximum(np.maximum(lows[:, 0] - p[0], p[0] - (lows[:, 0] + res)),
                    0.0)
    dy = np.maximum(np.maximum(lows[:, 1] - p[1], p[1] - (lows[:, 1] + res)),
                    0.0)
    return float(np.min(np.hypot(dx, dy)))
