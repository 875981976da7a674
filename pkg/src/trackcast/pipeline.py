"""Per-frame joint tracking and forecasting, training, and sequence runners.

Each frame the predicted tracks and the new detections form one graph. The
shared post-GNN features feed two heads side by side: the affinity head
(association and track lifecycle) and the forecasting head. Forecasts are
computed from features and pre-update track state only, so the frame's
assignment can never leak into them.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape
from .config import ModelConfig, RunConfig, TrackConfig, TrainConfig
from .forecast import (DppParams, TrajectorySet, build_context, context_width, cvae_decode, cvae_loss,
                       diversity_loss, init_cvae, init_sampler, past_features, repeat_rows, sample_forecast,
                       sampler_forward, step_sq_dist)
from .graph import AgentNode, build_graph, init_encoder, init_gnn, run_gnn
from .kitti_io import DetectionRecord, Sequence, TrackletRecord
from .mot import (Assignment, KalmanConfig, LifecycleParams, TrackTable, affinity, associate, association_loss,
                  detection_node, hungarian, init_affinity, lifecycle_step, track_node)

STAGE1_PREFIXES = ("enc.", "gnn.", "aff.", "cvae.")
SAMPLER_PREFIX = "sampler."
SAMPLER_BATCH = 16


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class Model:
    store: ParamStore
    cfg: ModelConfig

    @property
    def dpp(self) -> DppParams:
        return DppParams(self.cfg.sigma_d, self.cfg.rho, self.cfg.R)

    def save(self, path) -> None:
        self.store.meta["model"] = asdict(self.cfg)
        self.store.save(path)

    @classmethod
    def load(cls, path) -> "Model":
        store = ParamStore.load(path)
        if "model" not in store.meta:
            raise ValueError(f"{path}: checkpoint carries no model configuration")
        return cls(store, ModelConfig(**store.meta["model"]))


def init_model(cfg: ModelConfig, seed: int = 0) -> Model:
    store = ParamStore(seed)
    init_encoder(store, cfg.H, cfg.D)
    init_gnn(store, cfg.D, cfg.D_msg, cfg.L)
    init_affinity(store, cfg.D, cfg.hidden_aff)
    C = context_width(cfg.D, cfg.H)
    init_cvae(store, C, cfg.H, cfg.T, cfg.Z, cfg.hidden_cvae)
    init_sampler(store, C, cfg.K, cfg.Z, cfg.hidden_sampler)
    store.meta["model"] = asdict(cfg)
    return Model(store, cfg)


def stage1_names(store: ParamStore) -> list[str]:
    return [n for n in store.names() if n.startswith(STAGE1_PREFIXES)]


def sampler_names(store: ParamStore) -> list[str]:
    return store.names(SAMPLER_PREFIX)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    """One sequence: ground truth plus detections with their ground-truth ids (-1 if unknown/clutter)."""

    seq_id: int
    gt: Sequence
    detections: dict[int, list[DetectionRecord]]
    det_gt_ids: dict[int, list[int]]
    num_frames: int

    @classmethod
    def from_log(cls, log) -> "Scene":
        dets: dict[int, list] = {}
        ids: dict[int, list] = {}
        for d, g in zip(log.detections, log.det_gt_ids):
            dets.setdefault(d.frame, []).append(d)
            ids.setdefault(d.frame, []).append(g)
        return cls(log.seq_id, log.gt_sequence(), dets, ids, log.config.num_frames)

    @classmethod
    def from_sequences(cls, gt: Sequence, det: Sequence, match_radius: float = 2.0) -> "Scene":
        """Detections get the id of the ground-truth box whose centre is matched within ``match_radius``."""
        dets, ids = {}, {}
        for f, recs in det:
            g = gt.at(f)
            if g and recs:
                cost = np.array([[np.hypot(d.center[0] - t.center[0], d.center[2] - t.center[2]) for t in g]
                                 for d in recs])
                a = hungarian(np.where(cost <= match_radius, cost, 1e6))
                gid = [-1] * len(recs)
                for r, c in a.matches:
                    if cost[r, c] <= match_radius:
                        gid[r] = g[c].track_id
            else:
                gid = [-1] * len(recs)
            dets[f] = list(recs)
            ids[f] = gid
        n = max(gt.last_frame, det.last_frame) + 1
        return cls(gt.seq_id, gt, dets, ids, n)

    def at(self, frame: int) -> tuple[list[DetectionRecord], list[int]]:
        return self.detections.get(frame, []), self.det_gt_ids.get(frame, [])

    def gt_positions(self) -> dict[tuple[int, int], np.ndarray]:
        out = {}
        for f, recs in self.gt:
            for r in recs:
                out[(r.track_id, f)] = np.array([r.center[0], r.center[2]])
        return out


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class SequenceState:
    table: TrackTable
    rng: np.random.Generator
    seq_id: int = 0


def new_state(seq_id: int, seed: int, kalman: KalmanConfig | None = None) -> SequenceState:
    return SequenceState(TrackTable(kalman=kalman or KalmanConfig()), np.random.default_rng([seed, seq_id]), seq_id)


@dataclass
class FrameResult:
    frame: int
    emitted: list[TrackletRecord]
    forecasts: dict[int, TrajectorySet]     # keyed by confirmed track id
    timings: dict[str, float] = field(default_factory=dict)   # milliseconds


def _track_context(model: Model, features: np.ndarray, tracks) -> tuple[np.ndarray, np.ndarray]:
    H = model.cfg.H
    past, last = zip(*(past_features(np.array(t.history), H) for t in tracks))
    vel = np.array([[t.x[7], t.x[9]] for t in tracks])
    tape = Tape()
    ctx = build_context(tape.constant(features), np.array(past), vel).data
    return ctx, np.array(last)


def step_frame(model: Model, state: SequenceState, detections: list[DetectionRecord], frame: int,
               tcfg: TrackConfig | None = None, assignment_hook: Callable[[Assignment], Assignment] | None = None,
               forecast: bool = True) -> FrameResult:
    """Advance one sequence by one frame."""
    tcfg = tcfg or TrackConfig()
    cfg = model.cfg
    timings: dict[str, float] = {}
    t_start = clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = (now - clock) * 1e3
        clock = now

    table = state.table
    table.predict()
    lap("predict")
    tracks = list(table.tracks)
    nt, nd = len(tracks), len(detections)
    nodes = [track_node(t, i) for i, t in enumerate(tracks)] + [detection_node(d, nt + j) for j, d in enumerate(detections)]
    graph = build_graph(nodes, cfg.radius)
    lap("graph")
    tape = Tape()
    feats = None
    if nodes:
        graph = run_gnn(graph, model.store, tape, cfg.H)
        feats = graph.features
    lap("gnn")

    # (b) forecasting head: features and pre-update track state only
    forecasts: dict[int, TrajectorySet] = {}
    rows = [i for i, t in enumerate(tracks) if t.ever_confirmed]
    if forecast and rows:
        ctx, last = _track_context(model, feats.data[rows], [tracks[i] for i in rows])
        sets = sample_forecast(model.store, ctx, last, tcfg.mode, cfg.K, rng=state.rng, dpp=model.dpp)
        forecasts = {tracks[i].id: s for i, s in zip(rows, sets)}
    lap("forecast")

    # (a) tracking head
    if nt and nd:
        aff = affinity(graph, model.store, tape).data
    else:
        aff = np.zeros((nt, nd))
    assignment = associate(aff, tcfg.threshold)
    if assignment_hook is not None:
        assignment = assignment_hook(assignment)
    lap("association")
    params = LifecycleParams(tcfg.min_hits, tcfg.max_age, max(cfg.H, 2))
    _, emitted = lifecycle_step(table, assignment, detections, params, frame)
    # report forecasts only for emitted tracks; their values were fixed before association
    shown = {r.track_id for r in emitted}
    forecasts = {tid: s for tid, s in forecasts.items() if tid in shown}
    lap("lifecycle")
    timings["total"] = (time.perf_counter() - t_start) * 1e3
    return FrameResult(frame, emitted, forecasts, timings)


@dataclass
class SequenceResult:
    seq_id: int
    records: list[TrackletRecord]
    forecasts: list[tuple[int, int, TrajectorySet]]     # (frame, track id, samples)
    timings: list[dict[str, float]]


def run_sequence(model: Model, scene: Scene, tcfg: TrackConfig | None = None, seed: int = 0,
                 forecast: bool = True, assignment_hook=None) -> SequenceResult:
    tcfg = tcfg or TrackConfig()
    state = new_state(scene.seq_id, seed)
    records, fcs, timings = [], [], []
    for f in range(scene.num_frames):
        dets, _ = scene.at(f)
        try:
            res = step_frame(model, state, dets, f, tcfg, assignment_hook, forecast)
        except Exception as exc:
            raise type(exc)(f"sequence {scene.seq_id}, frame {f}: {exc}") from exc
        records += res.emitted
        fcs += [(f, tid, s) for tid, s in sorted(res.forecasts.items())]
        timings.append(res.timings)
    return SequenceResult(scene.seq_id, records, fcs, timings)


def run_sequences(model: Model, scenes: list[Scene], tcfg: TrackConfig | None = None, seed: int = 0,
                  forecast: bool = True, workers: int = 1) -> list[SequenceResult]:
    """Independent sequences in parallel; results in input order."""
    if workers <= 1 or len(scenes) <= 1:
        return [run_sequence(model, s, tcfg, seed, forecast) for s in scenes]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: run_sequence(model, s, tcfg, seed, forecast), scenes))


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------


@dataclass
class TrainFrame:
    seq_id: int
    frame: int
    nodes: list[AgentNode]
    num_tracks: int
    gt_pairs: np.ndarray         # (tracks, detections) 0/1
    fc_rows: np.ndarray          # track rows with a full future
    fc_ids: np.ndarray           # their ground-truth ids
    past_rel: np.ndarray         # (m, H, 2)
    velocity: np.ndarray         # (m, 2)
    last_pos: np.ndarray         # (m, 2)
    future_rel: np.ndarray       # (m, T, 2)


def teacher_frames(scene: Scene, cfg: ModelConfig, tcfg: TrackConfig | None = None,
                   kalman: KalmanConfig | None = None) -> list[TrainFrame]:
    """Run the tracker with ground-truth association and record what the model would see."""
    tcfg = tcfg or TrackConfig()
    table = TrackTable(kalman=kalman or KalmanConfig())
    params = LifecycleParams(tcfg.min_hits, tcfg.max_age, max(cfg.H, 2))
    gt_pos = scene.gt_positions()
    out = []
    for f in range(scene.num_frames):
        dets, ids = scene.at(f)
        table.predict()
        tracks = list(table.tracks)
        nt = len(tracks)
        nodes = [track_node(t, i) for i, t in enumerate(tracks)] + [detection_node(d, nt + j) for j, d in enumerate(dets)]
        pairs = np.array([[1.0 if t.gt_id >= 0 and t.gt_id == g else 0.0 for g in ids] for t in tracks]).reshape(nt, len(dets))
        rows, gids, past, vel, last, fut = [], [], [], [], [], []
        for i, t in enumerate(tracks):
            if not t.ever_confirmed or t.gt_id < 0:
                continue
            target = [gt_pos.get((t.gt_id, f + k)) for k in range(cfg.T)]
            if any(p is None for p in target):
                continue
            p_rel, p_last = past_features(np.array(t.history), cfg.H)
            rows.append(i)
            gids.append(t.gt_id)
            past.append(p_rel)
            vel.append([t.x[7], t.x[9]])
            last.append(p_last)
            fut.append(np.array(target) - p_last)
        out.append(TrainFrame(scene.seq_id, f, nodes, nt, pairs, np.array(rows, dtype=np.intp), np.array(gids, dtype=np.intp),
                              np.array(past).reshape(-1, cfg.H, 2), np.array(vel).reshape(-1, 2),
                              np.array(last).reshape(-1, 2), np.array(fut).reshape(-1, cfg.T, 2)))
        lifecycle_step(table, associate(pairs, 0.5), dets, params, f, det_gt_ids=ids)
    return out


def frame_features(model: Model, tf: TrainFrame, tape: Tape):
    graph = run_gnn(build_graph(tf.nodes, model.cfg.radius), model.store, tape, model.cfg.H)
    return graph


def frame_contexts(model: Model, tf: TrainFrame) -> np.ndarray:
    """Forecast contexts for the frame's supervised track rows under the current weights."""
    if len(tf.fc_rows) == 0:
        return np.zeros((0, context_width(model.cfg.D, model.cfg.H)))
    tape = Tape()
    g = frame_features(model, tf, tape)
    return build_context(ad.take_rows(g.features, tf.fc_rows), tf.past_rel, tf.velocity).data


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def stage1_loss(model: Model, tf: TrainFrame, tape: Tape, tcfg: TrainConfig, noise: np.ndarray):
    """Joint loss through the shared GNN; returns (total, association, forecast) or None if unsupervised."""
    nd = len(tf.nodes) - tf.num_tracks
    has_assoc = tf.num_tracks > 0 and nd > 0
    has_fc = len(tf.fc_rows) > 0
    if not (has_assoc or has_fc):
        return None
    g = frame_features(model, tf, tape)
    total = tape.constant(0.0)
    la = lf = 0.0
    if has_assoc:
        a = association_loss(affinity(g, model.store, tape), tf.gt_pairs)
        total = total + a * tcfg.w_a
        la = a.item()
    if has_fc:
        ctx = build_context(ad.take_rows(g.features, tf.fc_rows), tf.past_rel, tf.velocity)
        c = cvae_loss(tape, model.store, tf.past_rel, tf.future_rel, ctx, tcfg.beta, noise)
        total = total + c * tcfg.w_f
        lf = c.item()
    return total, la, lf


def sampler_loss(model: Model, tape: Tape, ctx: np.ndarray, future_rel: np.ndarray, tcfg: TrainConfig):
    """Diversity over each agent's K decoded samples plus a best-of-K reconstruction anchor."""
    K, T = model.cfg.K, model.cfg.T
    m = len(ctx)
    c = tape.constant(ctx)
    codes = sampler_forward(tape, model.store, c, K)
    trajs = cvae_decode(tape, model.store, codes, repeat_rows(c, K))
    div = diversity_loss(trajs, codes, model.dpp, groups=m)
    target = np.repeat(np.asarray(future_rel).reshape(m, 2 * T), K, axis=0)
    per_sample = ad.reduce_mean(step_sq_dist(trajs, target), axis=1)
    anchor = ad.reduce_mean(ad.reduce_min(ad.reshape(per_sample, (m, K)), axis=1))
    return div * tcfg.w_div + anchor * tcfg.w_anchor, div.item(), anchor.item()


@dataclass
class TrainLog:
    lines: list[str] = field(default_factory=list)
    stage1: list[float] = field(default_factory=list)      # mean loss per epoch
    stage2: list[float] = field(default_factory=list)
    first_epoch_steps: list[float] = field(default_factory=list)
    path: str | Path | None = None     # plain-text log, one line per epoch, written as training goes

    def __post_init__(self):
        if self.path is not None:
            Path(self.path).write_text("")

    def add(self, line: str) -> None:
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")

    def text(self) -> str:
        return "".join(l + "\n" for l in self.lines)


def epoch_lr(base: float, epoch: int, epochs: int, tcfg: TrainConfig) -> float:
    if tcfg.lr_decay == "none" or epochs <= 1:
        return base
    frac = tcfg.lr_floor + (1.0 - tcfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))
    return base * frac


def _check(value: float, step: int, stage: int) -> None:
    if not np.isfinite(value):
        raise ad.NumericalError(f"stage {stage}: non-finite loss at step {step}")


def train(model: Model, scenes: list[Scene], tcfg: TrainConfig | None = None, track_cfg: TrackConfig | None = None,
          log: TrainLog | None = None) -> TrainLog:
    """Two-stage training, in place. Single-threaded and fully seeded."""
    tcfg = tcfg or TrainConfig()
    log = log or TrainLog()
    rng = np.random.default_rng(tcfg.seed)
    frames = [tf for s in scenes for tf in teacher_frames(s, model.cfg, track_cfg)]
    names1 = stage1_names(model.store)
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(frames))
        lr = epoch_lr(tcfg.lr, epoch, tcfg.epochs, tcfg)
        tot = ta = tfc = 0.0
        n = 0
        for k in order:
            tf = frames[k]
            noise = rng.standard_normal((len(tf.fc_rows), model.cfg.Z))
            tape = Tape()
            out = stage1_loss(model, tf, tape, tcfg, noise)
            if out is None:
                continue
            loss, la, lf = out
            _check(loss.item(), step, 1)
            grads = ad.backward(tape, loss)
            ad.adam_step(model.store, grads, lr, names=names1)
            if epoch == 0:
                log.first_epoch_steps.append(loss.item())
            tot += loss.item()
            ta += la
            tfc += lf
            n += 1
            step += 1
        n = max(n, 1)
        log.stage1.append(tot / n)
        log.add(f"stage=1 epoch={epoch} loss={tot / n:.6f} association={ta / n:.6f} forecast={tfc / n:.6f}")

    # stage 2: frozen GNN and CVAE, contexts computed once
    ctxs, futs = [], []
    for tf in frames:
        if len(tf.fc_rows):
            ctxs.append(frame_contexts(model, tf))
            futs.append(tf.future_rel)
    if ctxs and tcfg.sampler_epochs > 0:
        ctx_all = np.concatenate(ctxs)
        fut_all = np.concatenate(futs)
        names2 = sampler_names(model.store)
        for epoch in range(tcfg.sampler_epochs):
            order = rng.permutation(len(ctx_all))
            lr = epoch_lr(tcfg.sampler_lr, epoch, tcfg.sampler_epochs, tcfg)
            tot = td = tanc = 0.0
            n = 0
            for b in range(0, len(order), SAMPLER_BATCH):
                idx = order[b:b + SAMPLER_BATCH]
                tape = Tape()
                loss, d, a = sampler_loss(model, tape, ctx_all[idx], fut_all[idx], tcfg)
                _check(loss.item(), step, 2)
                grads = ad.backward(tape, loss)
                ad.adam_step(model.store, grads, lr, names=names2)
                tot += loss.item()
                td += d
                tanc += a
                n += 1
                step += 1
            n = max(n, 1)
            log.stage2.append(tot / n)
            log.add(f"stage=2 epoch={epoch} loss={tot / n:.6f} diversity={td / n:.6f} anchor={tanc / n:.6f}")
    return log


# ---------------------------------------------------------------------------
# forecasting cases for evaluation
# ---------------------------------------------------------------------------


@dataclass
class ForecastCase:
    seq_id: int
    frame: int
    gt_id: int
    context: np.ndarray
    last_pos: np.ndarray
    future: np.ndarray       # (T, 2) absolute


def forecast_cases(model: Model, scene: Scene, tcfg: TrackConfig | None = None,
                   select: Callable[[int, int], bool] | None = None) -> list[ForecastCase]:
    """Contexts for supervised (frame, ground-truth id) pairs, optionally filtered by ``select(frame, gt_id)``."""
    out = []
    for tf in teacher_frames(scene, model.cfg, tcfg):
        if len(tf.fc_rows) == 0:
            continue
        keep = [k for k, g in enumerate(tf.fc_ids) if select is None or select(tf.frame, int(g))]
        if not keep:
            continue
        ctx = frame_contexts(model, tf)
        for k in keep:
            out.append(ForecastCase(tf.seq_id, tf.frame, int(tf.fc_ids[k]), ctx[k], tf.last_pos[k],
                                    tf.future_rel[k] + tf.last_pos[k]))
    return out


def sample_cases(model: Model, cases: list[ForecastCase], mode: str, seed: int = 0) -> list[TrajectorySet]:
    if not cases:
        return []
    rng = np.random.default_rng(seed)
    ctx = np.array([c.context for c in cases])
    last = np.array([c.last_pos for c in cases])
    return sample_forecast(model.store, ctx, last, mode, model.cfg.K, rng=rng, dpp=model.dpp)


# ---------------------------------------------------------------------------
# data sets
# ---------------------------------------------------------------------------


def synthetic_logs(cfg: RunConfig, split: str) -> list:
    """Seeded synthetic sequences; training sequences use ids disjoint from evaluation ones."""
    from . import synth

    d = cfg.data
    offset = 1000 if split == "train" else 0
    if d.scenario == "crossing":
        sc = synth.crossing_config(seed=d.seed, noise=d.noise)
    else:
        sc = synth.intersection_config(seed=d.seed)
    return [synth.generate(sc, seq_id=offset + k) for k in range(d.sequences)]


def synthetic_scenes(cfg: RunConfig, split: str) -> list[Scene]:
    return [Scene.from_log(log) for log in synthetic_logs(cfg, split)]


def load_scenes(path) -> list[Scene]:
    from . import synth
    from .kitti_io import list_sequences, load_sequence, sequence_filename

    root = Path(path)
    label_dir = root / synth.LABEL_DIR
    det_dir = root / synth.DETECTION_DIR
    if not label_dir.is_dir():
        raise FileNotFoundError(f"{label_dir} not found")
    scenes = []
    for sid in list_sequences(label_dir):
        dp = det_dir / sequence_filename(sid)
        gt, det = load_sequence(label_dir / sequence_filename(sid), dp if dp.exists() else None, seq_id=sid)
        scenes.append(Scene.from_sequences(gt, det))
    return scenes


def scenes_for(cfg: RunConfig, split: str) -> list[Scene]:
    if cfg.data.path is not None:
        return load_scenes(cfg.data.path)
    return synthetic_scenes(cfg, split)
