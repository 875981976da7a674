"""Tracking head: learned affinity, optimal assignment, Kalman motion model and track lifecycle."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ParamStore, Tape, Tensor
from .graph import DETECTION, TRACK, AgentGraph, AgentNode, wrap_angle
from .kitti_io import DetectionRecord, TrackletRecord
from .layers import init_mlp, mlp

SENTINEL = 1e6
BCE_FLOOR = 1e-7
PAIR_DIM = 4
STATE_DIM = 10
OBS_DIM = 7

TENTATIVE = "tentative"
CONFIRMED = "confirmed"
DEAD = "dead"


# ---------------------------------------------------------------------------
# affinity
# ---------------------------------------------------------------------------


def init_affinity(store: ParamStore, D: int, hidden: int) -> None:
    init_mlp(store, "aff", [2 * D + PAIR_DIM, hidden, 1])


def pair_geometry(track_states: np.ndarray, det_states: np.ndarray) -> np.ndarray:
    """Rows (i * n_det + j): ground-plane offset, distance, absolute yaw gap."""
    nt, nd = len(track_states), len(det_states)
    if nt == 0 or nd == 0:
        return np.zeros((nt * nd, PAIR_DIM))
    t = np.asarray(track_states, dtype=np.float64)
    d = np.asarray(det_states, dtype=np.float64)
    dx = d[None, :, 0] - t[:, None, 0]
    dz = d[None, :, 2] - t[:, None, 2]
    dist = np.sqrt(dx * dx + dz * dz)
    dyaw = np.abs(wrap_angle(d[None, :, 3] - t[:, None, 3]))
    # a box seen from the opposite side is the same box
    dyaw = np.minimum(dyaw, np.pi - dyaw)
    geo = np.stack([dx / 2.0, dz / 2.0, dist / 2.0, dyaw / (np.pi / 2)], axis=-1)
    return geo.reshape(nt * nd, PAIR_DIM)


def affinity_from_features(tape: Tape, store: ParamStore, h_tracks: Tensor, h_dets: Tensor,
                           pair_geo: np.ndarray | None = None) -> Tensor:
    nt, nd = h_tracks.shape[0], h_dets.shape[0]
    if nt == 0 or nd == 0:
        return tape.constant(np.zeros((nt, nd)))
    rows = np.repeat(np.arange(nt), nd)
    cols = np.tile(np.arange(nd), nt)
    if pair_geo is None:
        pair_geo = np.zeros((nt * nd, PAIR_DIM))
    x = ad.concat([ad.take_rows(h_tracks, rows), ad.take_rows(h_dets, cols), tape.constant(pair_geo)])
    logits = mlp(tape, store, "aff", x, hidden_act="tanh", out_act=None)
    return ad.reshape(ad.sigmoid(logits), (nt, nd))


def affinity(graph: AgentGraph, store: ParamStore, tape: Tape) -> Tensor:
    """Track x detection affinity in [0, 1] from post-GNN node features."""
    tr = [i for i, n in enumerate(graph.nodes) if n.source == TRACK]
    de = [i for i, n in enumerate(graph.nodes) if n.source == DETECTION]
    h = graph.features
    if not tr or not de:
        return tape.constant(np.zeros((len(tr), len(de))))
    geo = pair_geometry(np.array([graph.nodes[i].state for i in tr]),
                        np.array([graph.nodes[i].state for i in de]))
    return affinity_from_features(tape, store, ad.take_rows(h, tr), ad.take_rows(h, de), geo)


def association_loss(aff: Tensor, gt_pairs: np.ndarray) -> Tensor:
    """Mean binary cross-entropy against the 0/1 ground-truth pairing matrix."""
    tape = aff.tape
    if aff.data.size == 0:
        return tape.constant(0.0)
    target = np.asarray(gt_pairs, dtype=np.float64)
    if target.shape != aff.shape:
        raise ad.ShapeError(f"gt pairs {target.shape} vs affinity {aff.shape}")
    p = ad.clamp(aff, BCE_FLOOR, 1.0 - BCE_FLOOR)
    pos = ad.log(p) * target
    neg = ad.log(1.0 - p) * (1.0 - target)
    return -ad.reduce_mean(pos + neg)


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------


@dataclass
class Assignment:
    matches: list[tuple[int, int]]
    unmatched_rows: list[int]
    unmatched_cols: list[int]
    cost: float

    def as_dict(self) -> dict[int, int]:
        return dict(self.matches)


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one assignment; rectangular inputs are padded.

    Among equal-cost optimal solutions, the lexicographically smallest
    sequence of (row, col) pairs is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    nr, nc = cost.shape
    n = max(nr, nc)
    if n == 0:
        return Assignment([], [], [], 0.0)
    padded = np.full((n, n), SENTINEL)
    padded[:nr, :nc] = cost
    col_of = kernels.solve_assignment(padded)
    matches = []
    total = 0.0
    for r in range(nr):
        c = int(col_of[r])
        if c < nc:
            matches.append((r, c))
            total += cost[r, c]
    used_r = {r for r, _ in matches}
    used_c = {c for _, c in matches}
    return Assignment(
        matches,
        [r for r in range(nr) if r not in used_r],
        [c for c in range(nc) if c not in used_c],
        total,
    )


def associate(aff, threshold: float = 0.5) -> Assignment:
    """Optimal matching on ``1 - affinity``; matches below ``threshold`` are dropped."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    aff = np.asarray(aff, dtype=np.float64)
    a = hungarian(1.0 - aff)
    keep = [(r, c) for r, c in a.matches if aff[r, c] >= threshold]
    kept_r = {r for r, _ in keep}
    kept_c = {c for _, c in keep}
    nr, nc = aff.shape
    return Assignment(
        keep,
        [r for r in range(nr) if r not in kept_r],
        [c for c in range(nc) if c not in kept_c],
        float(sum(1.0 - aff[r, c] for r, c in keep)),
    )


# ---------------------------------------------------------------------------
# motion model
# ---------------------------------------------------------------------------


@dataclass
class KalmanConfig:
    q_velocity: float = 1e-2
    q_yaw: float = 1e-2
    r_obs: float = 1e-1
    p0: float = 10.0
    p0_velocity: float = 1e4

    def process_noise(self) -> np.ndarray:
        q = np.zeros(STATE_DIM)
        q[7:10] = self.q_velocity
        q[3] = self.q_yaw
        return np.diag(q)

    def obs_noise(self) -> np.ndarray:
        return self.r_obs * np.eye(OBS_DIM)


@dataclass
class Track:
    id: int
    x: np.ndarray                  # x y z yaw l w h vx vy vz
    P: np.ndarray
    hits: int = 1
    age: int = 0
    status: str = TENTATIVE
    history: list = field(default_factory=list)   # ground-plane positions, oldest first
    category: str = "Car"
    score: float = 1.0
    gt_id: int = -1
    ever_confirmed: bool = False
    feature: np.ndarray | None = None

    @property
    def position(self) -> np.ndarray:
        return self.x[:3]

    def observation(self) -> np.ndarray:
        return self.x[:OBS_DIM]


def det_observation(det: DetectionRecord) -> np.ndarray:
    h, w, l = det.dims
    x, y, z = det.center
    return np.array([x, y, z, det.rotation_y, l, w, h], dtype=np.float64)


def new_track(track_id: int, obs: np.ndarray, cfg: KalmanConfig | None = None, **kw) -> Track:
    cfg = cfg or KalmanConfig()
    x = np.zeros(STATE_DIM)
    x[:OBS_DIM] = obs
    x[3] = float(wrap_angle(x[3]))
    P = cfg.p0 * np.eye(STATE_DIM)
    P[7:, 7:] = cfg.p0_velocity * np.eye(3)
    return Track(id=track_id, x=x, P=P, history=[x[[0, 2]].copy()], **kw)


def transition(dt: float) -> np.ndarray:
    F = np.eye(STATE_DIM)
    F[0, 7] = F[1, 8] = F[2, 9] = dt
    return F


def kalman_predict(track: Track, dt: float = 1.0, cfg: KalmanConfig | None = None) -> Track:
    """Constant-velocity propagation; ``dt`` counts frames."""
    if dt < 1:
        raise ValueError("dt must be at least one frame")
    cfg = cfg or KalmanConfig()
    F = transition(dt)
    track.x = F @ track.x
    track.x[3] = float(wrap_angle(track.x[3]))
    track.P = F @ track.P @ F.T + dt * cfg.process_noise()
    return track


def kalman_update(track: Track, obs, cfg: KalmanConfig | None = None, R: np.ndarray | None = None,
                  fix_orientation: bool = True) -> Track:
    """Linear update on the (x, y, z, yaw, l, w, h) observation."""
    cfg = cfg or KalmanConfig()
    if isinstance(obs, DetectionRecord):
        obs = det_observation(obs)
    z = np.array(obs, dtype=np.float64)
    R = cfg.obs_noise() if R is None else R
    Hm = np.zeros((OBS_DIM, STATE_DIM))
    Hm[:, :OBS_DIM] = np.eye(OBS_DIM)
    y = z - Hm @ track.x
    y[3] = float(wrap_angle(y[3]))
    if fix_orientation and abs(y[3]) > math.pi / 2:
        y[3] = float(wrap_angle(y[3] + math.pi))
    S = Hm @ track.P @ Hm.T + R
    try:
        K = np.linalg.solve(S, Hm @ track.P).T
    except np.linalg.LinAlgError as exc:
        raise ad.NumericalError("singular innovation covariance; check the noise configuration") from exc
    track.x = track.x + K @ y
    track.x[3] = float(wrap_angle(track.x[3]))
    I_KH = np.eye(STATE_DIM) - K @ Hm
    track.P = I_KH @ track.P @ I_KH.T + K @ R @ K.T
    track.hits += 1
    track.age = 0
    return track


# ---------------------------------------------------------------------------
# lifecycle
# ---------------------------------------------------------------------------


@dataclass
class LifecycleParams:
    min_hits: int = 3
    max_age: int = 2
    history_len: int = 10


@dataclass
class TrackTable:
    tracks: list[Track] = field(default_factory=list)
    next_id: int = 0
    frame_count: int = 0
    kalman: KalmanConfig = field(default_factory=KalmanConfig)

    def spawn(self, obs: np.ndarray, **kw) -> Track:
        t = new_track(self.next_id, obs, self.kalman, **kw)
        self.next_id += 1
        self.tracks.append(t)
        return t

    def predict(self) -> None:
        for t in self.tracks:
            kalman_predict(t, 1.0, self.kalman)


def track_node(t: Track, node_id: int) -> AgentNode:
    return AgentNode(node_id, TRACK, t.x[:OBS_DIM].copy(), t.x[7:10].copy(), np.array(t.history))


def detection_node(det: DetectionRecord, node_id: int) -> AgentNode:
    return AgentNode(node_id, DETECTION, det_observation(det), np.zeros(3), None)


def _alpha(x: float, z: float, ry: float) -> float:
    return float(wrap_angle(ry - math.atan2(x, z)))


def emit_record(t: Track, frame: int, det: DetectionRecord | None) -> TrackletRecord:
    x, y, z, ry, l, w, h = (float(v) for v in t.x[:OBS_DIM])
    return TrackletRecord(
        frame=frame, category=t.category, truncated=0.0, occluded=0, alpha=_alpha(x, z, ry),
        bbox2d=det.bbox2d if det is not None else (0.0, 0.0, 0.0, 0.0),
        dims=(h, w, l), center=(x, y, z), rotation_y=ry,
        score=t.score, track_id=t.id,
    )


def lifecycle_step(table: TrackTable, assignment: Assignment, detections: list[DetectionRecord],
                   params: LifecycleParams | None = None, frame: int | None = None,
                   det_gt_ids: list[int] | None = None) -> tuple[TrackTable, list[TrackletRecord]]:
    """Apply one frame's assignment to the (already predicted) track table.

    Matched tracks are updated, unmatched tracks age and die past ``max_age``,
    unmatched detections open tentative tracks. Only confirmed tracks that were
    matched this frame are emitted; during the first ``min_hits`` frames of a
    sequence matched tracks are emitted immediately.
    """
    params = params or LifecycleParams()
    table.frame_count += 1
    frame = table.frame_count - 1 if frame is None else frame
    matched = assignment.as_dict()
    emitted: list[TrackletRecord] = []
    warmup = table.frame_count <= params.min_hits
    survivors: list[Track] = []
    fresh: list[Track] = []
    for r, t in enumerate(table.tracks):
        if r in matched:
            det = detections[matched[r]]
            kalman_update(t, det, table.kalman)
            t.score = 1.0 if det.score is None else float(det.score)
            t.category = det.category
            if det_gt_ids is not None:
                t.gt_id = det_gt_ids[matched[r]]
            if t.hits >= params.min_hits:
                t.ever_confirmed = True
                t.status = CONFIRMED
            if t.ever_confirmed or warmup:
                emitted.append(emit_record(t, frame, det))
        else:
            t.age += 1
            t.hits = 0
            if t.age > params.max_age:
                t.status = DEAD
                continue
        survivors.append(t)
    matched_cols = set(matched.values())
    for c, det in enumerate(detections):
        if c in matched_cols:
            continue
        t = new_track(table.next_id, det_observation(det), table.kalman,
                      score=1.0 if det.score is None else float(det.score), category=det.category,
                      gt_id=-1 if det_gt_ids is None else det_gt_ids[c])
        table.next_id += 1
        if params.min_hits <= 1:
            t.ever_confirmed = True
            t.status = CONFIRMED
        if t.ever_confirmed or warmup:
            emitted.append(emit_record(t, frame, det))
        fresh.append(t)
    for t in survivors:
        t.history.append(t.x[[0, 2]].copy())
        del t.history[:-params.history_len]
    table.tracks = survivors + fresh
    emitted.sort(key=lambda r: r.track_id)
    return table, emitted
