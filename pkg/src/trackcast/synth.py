"""Seeded multi-agent scenarios with ground truth and noisy detections.

Agents move on the ground plane (camera x to the right, z forward, y = 1.65 m
down to the road). Three behaviours are available: straight constant-velocity
motion, circular loops that stay inside the scene, and a single-lane approach
to an intersection followed by a left / straight / right branch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from .kitti_io import DetectionRecord, Sequence, TrackletRecord, sequence_filename, serialize_records

FRAME_RATE = 10.0
DT = 1.0 / FRAME_RATE
GROUND_Y = 1.65

CONSTANT_VELOCITY = "constant_velocity"
TURN = "turn"
INTERSECTION = "intersection"
BEHAVIORS = (CONSTANT_VELOCITY, TURN, INTERSECTION)
BRANCHES = ("left", "straight", "right")

LABEL_DIR = "label_02"
DETECTION_DIR = "detections"


@dataclass
class ScenarioConfig:
    num_agents: int = 8
    num_frames: int = 200
    behavior: str = TURN
    branch_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)   # left, straight, right
    noise_sigma: float = 0.0
    dropout: float = 0.0
    fp_rate: float = 0.0
    seed: int = 0
    bounds: float = 50.0
    speed_range: tuple[float, float] = (5.0, 15.0)
    turn_radius_range: tuple[float, float] = (8.0, 20.0)
    min_separation: float = 6.0
    approach_length: float = 40.0
    spawn_gap: int = 20          # frames between intersection arrivals

    def validate(self) -> None:
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown behavior {self.behavior!r}")
        if self.num_agents < 0 or self.num_frames < 0:
            raise ValueError("agent and frame counts must be non-negative")
        p = np.asarray(self.branch_probs, dtype=np.float64)
        if p.shape != (3,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"branch probabilities must be three non-negative values summing to 1, got {self.branch_probs}")
        for name in ("dropout", "fp_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid speed range {self.speed_range}")
        lo, hi = self.turn_radius_range
        if not 0 < lo <= hi or hi >= self.bounds:
            raise ValueError(f"invalid turn radius range {self.turn_radius_range}")


@dataclass
class Agent:
    agent_id: int
    behavior: str
    speed: float
    dims: tuple[float, float, float]       # height, width, length
    start_frame: int = 0
    origin: tuple[float, float] = (0.0, 0.0)   # start point, or circle centre for loops
    heading: float = 0.0                   # ground-plane direction angle of travel (atan2(dz, dx))
    radius: float = 0.0
    clockwise: bool = False
    branch: str | None = None

    def pose(self, frame: int) -> tuple[float, float, float] | None:
        """(x, z, rotation_y) at ``frame``, or None when the agent is not in the scene."""
        t = (frame - self.start_frame) * DT
        if t < 0:
            return None
        if self.behavior == CONSTANT_VELOCITY:
            c, s = math.cos(self.heading), math.sin(self.heading)
            x = self.origin[0] + self.speed * t * c
            z = self.origin[1] + self.speed * t * s
            return x, z, _ry(c, s)
        if self.behavior == TURN:
            sign = -1.0 if self.clockwise else 1.0
            th = self.heading + sign * self.speed * t / self.radius
            x = self.origin[0] + self.radius * math.cos(th)
            z = self.origin[1] + self.radius * math.sin(th)
            return x, z, _ry(-sign * math.sin(th), sign * math.cos(th))
        return intersection_pose(self.speed * t - self.origin[1], self.branch, self.radius)

    def position(self, frame: int) -> np.ndarray | None:
        p = self.pose(frame)
        return None if p is None else np.array(p[:2])


def _ry(dx: float, dz: float) -> float:
    # travel direction (dx, dz) == (cos ry, -sin ry)
    return math.atan2(-dz, dx)


def intersection_pose(s: float, branch: str | None, radius: float) -> tuple[float, float, float]:
    """Pose at arc length ``s`` past the stop line at the origin, travelling +z."""
    if s <= 0 or branch == "straight":
        return 0.0, s, _ry(0.0, 1.0)
    if branch not in ("left", "right"):
        raise ValueError(f"unknown branch {branch!r}")
    side = -1.0 if branch == "left" else 1.0     # left is towards -x
    arc = 0.5 * math.pi * radius
    if s <= arc:
        phi = s / radius
        x = side * radius * (1.0 - math.cos(phi))
        z = radius * math.sin(phi)
        return x, z, _ry(side * math.sin(phi), math.cos(phi))
    return side * (radius + (s - arc)), radius, _ry(side, 0.0)


@dataclass
class GroundTruthLog:
    seq_id: int
    config: ScenarioConfig
    agents: list[Agent]
    records: list[TrackletRecord]
    detections: list[DetectionRecord]
    det_gt_ids: list[int]                 # ground-truth id per detection, -1 for false positives
    intents: dict[int, str] = field(default_factory=dict)

    def gt_sequence(self) -> Sequence:
        return Sequence.from_records(self.seq_id, self.records)

    def det_sequence(self) -> Sequence:
        return Sequence.from_records(self.seq_id, self.detections)

    def detections_at(self, frame: int) -> tuple[list[DetectionRecord], list[int]]:
        pairs = [(d, g) for d, g in zip(self.detections, self.det_gt_ids) if d.frame == frame]
        return [d for d, _ in pairs], [g for _, g in pairs]


def _dims(rng: np.random.Generator) -> tuple[float, float, float]:
    return (float(rng.uniform(1.4, 1.6)), float(rng.uniform(1.5, 1.8)), float(rng.uniform(3.5, 4.5)))


def _track_positions(agent: Agent, frames: int) -> np.ndarray:
    out = np.full((frames, 2), np.nan)
    for f in range(frames):
        p = agent.position(f)
        if p is not None:
            out[f] = p
    return out


def _separated(a: np.ndarray, others: list[np.ndarray], min_sep: float) -> bool:
    for b in others:
        d = np.sqrt(((a - b) ** 2).sum(axis=1))
        d = d[np.isfinite(d)]
        if d.size and d.min() < min_sep:
            return False
    return True


def _in_bounds(p, bounds: float) -> bool:
    return p is not None and abs(p[0]) <= bounds and abs(p[1]) <= bounds


def _make_agents(cfg: ScenarioConfig, rng: np.random.Generator) -> list[Agent]:
    agents: list[Agent] = []
    if cfg.behavior == INTERSECTION:
        radius = float(rng.uniform(*cfg.turn_radius_range))
        for k in range(cfg.num_agents):
            branch = BRANCHES[int(rng.choice(3, p=np.asarray(cfg.branch_probs)))]
            agents.append(Agent(k, INTERSECTION, float(rng.uniform(*cfg.speed_range)), _dims(rng),
                                start_frame=k * cfg.spawn_gap, origin=(0.0, cfg.approach_length),
                                radius=radius, branch=branch))
        return agents
    paths: list[np.ndarray] = []
    for k in range(cfg.num_agents):
        for _ in range(2000):
            speed = float(rng.uniform(*cfg.speed_range))
            dims = _dims(rng)
            if cfg.behavior == TURN:
                r = float(rng.uniform(*cfg.turn_radius_range))
                lim = cfg.bounds - r - 2.5
                agent = Agent(k, TURN, speed, dims, origin=(float(rng.uniform(-lim, lim)), float(rng.uniform(-lim, lim))),
                              heading=float(rng.uniform(-math.pi, math.pi)), radius=r, clockwise=bool(rng.random() < 0.5))
            else:
                start = rng.uniform(-0.8 * cfg.bounds, 0.8 * cfg.bounds, size=2)
                agent = Agent(k, CONSTANT_VELOCITY, speed, dims, origin=(float(start[0]), float(start[1])),
                              heading=float(rng.uniform(-math.pi, math.pi)))
            path = _track_positions(agent, cfg.num_frames)
            if _separated(path, paths, cfg.min_separation):
                agents.append(agent)
                paths.append(path)
                break
        else:
            raise ValueError(f"could not place agent {k} with {cfg.min_separation} m separation; reduce num_agents")
    return agents


def _record(frame: int, agent_id: int, dims, x: float, z: float, ry: float, score=None) -> TrackletRecord:
    alpha = ry - math.atan2(x, z)
    alpha = (alpha + math.pi) % (2 * math.pi) - math.pi
    return TrackletRecord(frame=frame, category="Car", truncated=0.0, occluded=0, alpha=alpha,
                          bbox2d=(0.0, 0.0, 0.0, 0.0), dims=tuple(dims), center=(x, GROUND_Y, z),
                          rotation_y=ry, score=score, track_id=agent_id)


def generate(cfg: ScenarioConfig, seq_id: int = 0) -> GroundTruthLog:
    """Ground truth and detections, fully determined by ``cfg.seed``.

    Motion, detection noise, dropout and false positives draw from separate
    streams, so e.g. changing the noise level leaves the trajectories intact.
    """
    cfg.validate()
    motion_ss, noise_ss, clutter_ss = np.random.SeedSequence([cfg.seed, seq_id]).spawn(3)
    motion = np.random.default_rng(motion_ss)
    noise = np.random.default_rng(noise_ss)
    clutter = np.random.default_rng(clutter_ss)
    agents = _make_agents(cfg, motion)
    records: list[TrackletRecord] = []
    dets: list[DetectionRecord] = []
    det_ids: list[int] = []
    for f in range(cfg.num_frames):
        frame_dets = []
        for a in agents:
            pose = a.pose(f)
            if not _in_bounds(pose, cfg.bounds):
                continue
            x, z, ry = pose
            gt = _record(f, a.agent_id, a.dims, x, z, ry)
            records.append(gt)
            eps = noise.standard_normal(3) * cfg.noise_sigma
            keep = noise.random() >= cfg.dropout
            score = float(noise.uniform(0.5, 1.0))
            if keep:
                cx, cy, cz = (gt.center[0] + eps[0], gt.center[1] + eps[1], gt.center[2] + eps[2])
                if cfg.noise_sigma == 0:
                    cx, cy, cz = gt.center
                frame_dets.append((DetectionRecord(frame=f, category="Car", truncated=0.0, occluded=0,
                                                   alpha=gt.alpha, bbox2d=gt.bbox2d, dims=gt.dims,
                                                   center=(cx, cy, cz), rotation_y=gt.rotation_y, score=score),
                                   a.agent_id))
        if clutter.random() < cfg.fp_rate:
            x, z = clutter.uniform(-cfg.bounds, cfg.bounds, size=2)
            ry = float(clutter.uniform(-math.pi, math.pi))
            fp = _record(f, 0, _dims(clutter), float(x), float(z), ry)
            frame_dets.append((DetectionRecord(frame=f, category="Car", truncated=0.0, occluded=0, alpha=fp.alpha,
                                               bbox2d=fp.bbox2d, dims=fp.dims, center=fp.center,
                                               rotation_y=fp.rotation_y, score=float(clutter.uniform(0.3, 0.8))),
                               -1))
        for d, g in frame_dets:
            dets.append(d)
            det_ids.append(g)
    intents = {a.agent_id: a.branch for a in agents if a.branch is not None}
    return GroundTruthLog(seq_id, cfg, agents, records, dets, det_ids, intents)


def export(logs: GroundTruthLog | Seq[GroundTruthLog], directory) -> list[Path]:
    """Write ``label_02/%04d.txt`` and ``detections/%04d.txt`` for each log."""
    if isinstance(logs, GroundTruthLog):
        logs = [logs]
    root = Path(directory)
    (root / LABEL_DIR).mkdir(parents=True, exist_ok=True)
    (root / DETECTION_DIR).mkdir(parents=True, exist_ok=True)
    written = []
    for log in logs:
        name = sequence_filename(log.seq_id)
        lp = root / LABEL_DIR / name
        dp = root / DETECTION_DIR / name
        lp.write_text(serialize_records(log.records))
        dp.write_text(serialize_records(log.detections))
        written += [lp, dp]
    return written


def crossing_config(seed: int = 0, noise: bool = True, **kw) -> ScenarioConfig:
    """Eight looping agents over 200 frames; the noisy variant adds 0.3 m noise, 5% dropout, 5% clutter."""
    base = dict(num_agents=8, num_frames=200, behavior=TURN, seed=seed)
    if noise:
        base.update(noise_sigma=0.3, dropout=0.05, fp_rate=0.05)
    base.update(kw)
    return ScenarioConfig(**base)


def intersection_config(seed: int = 0, num_agents: int = 12, spawn_gap: int = 40, **kw) -> ScenarioConfig:
    """Single-lane approach with three equally likely branches and a fixed turn radius.

    Arrivals are spaced so the previous agent is out of interaction range
    when the next one reaches the stop line.
    """
    base = dict(num_agents=num_agents, num_frames=num_agents * spawn_gap + 80, behavior=INTERSECTION, seed=seed,
                speed_range=(5.0, 6.0), turn_radius_range=(8.0, 8.0), spawn_gap=spawn_gap)
    base.update(kw)
    return ScenarioConfig(**base)


def decision_frame(agent: Agent) -> int:
    """First frame at or past the stop line; the history up to the previous frame is branch-free."""
    if agent.behavior != INTERSECTION:
        raise ValueError("only intersection agents have a decision frame")
    steps = agent.origin[1] / (agent.speed * DT)
    return agent.start_frame + int(math.floor(steps)) + 1


def branch_future(agent: Agent, frame: int, T: int, branch: str) -> np.ndarray:
    """(T, 2) ground-plane positions for frames ``frame .. frame+T-1`` had the agent taken ``branch``."""
    out = np.empty((T, 2))
    for k in range(T):
        s = agent.speed * (frame + k - agent.start_frame) * DT - agent.origin[1]
        x, z, _ = intersection_pose(s, branch, agent.radius)
        out[k] = (x, z)
    return out
