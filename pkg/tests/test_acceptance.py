"""Acceptance criteria 1-10, one test each. A summary line per criterion is
printed at the end of the run."""
import filecmp
import itertools
import math
import time

import numpy as np
import pytest

from helpers import MALFORMED, gradcheck_ops, random_record, rel_err
from test_forecast import cofactor_det
from trackcast import autodiff as ad
from trackcast import cli, synth
from trackcast.autodiff import Tape
from trackcast.config import ModelConfig, RunConfig, TrackConfig, TrainConfig
from trackcast.forecast import (DppParams, build_context, cvae_decode, cvae_loss, diversity_loss, expected_cardinality,
                                repeat_rows, sampler_forward, subset_det)
from trackcast.graph import AgentNode, DETECTION, TRACK, build_graph, init_encoder, init_gnn, run_gnn
from trackcast.kitti_io import (KittiParseError, Sequence, TrackletRecord, format_record, parse_line, parse_text)
from trackcast.metrics import ClearCounts, MetricReport, ade_fde, amota_family, asd_fsd, evaluate_tracking
from trackcast.mot import affinity, association_loss, hungarian
from trackcast.pipeline import (Scene, forecast_cases, frame_features, init_model, new_state, run_sequence,
                                sample_cases, step_frame, teacher_frames, train)


# ---------------------------------------------------------------------------
# 1. autodiff oracle
# ---------------------------------------------------------------------------

TOY = ModelConfig(D=4, D_msg=4, L=1, H=2, Z=2, K=3, T=3, hidden_aff=4, hidden_cvae=4, hidden_sampler=4)


def toy_frame():
    """A frame with three confirmed tracks and their three detections."""
    scene = Scene.from_log(synth.generate(synth.crossing_config(0, noise=False, num_agents=3, num_frames=20)))
    for tf in teacher_frames(scene, TOY):
        if tf.num_tracks == 3 and len(tf.nodes) == 6 and len(tf.fc_rows) == 3:
            return tf
    raise AssertionError("no three-agent frame")


def composed_loss(model, tf, noise, tape=None):
    tape = Tape() if tape is None else tape
    g = frame_features(model, tf, tape)
    assoc = association_loss(affinity(g, model.store, tape), tf.gt_pairs)
    ctx = build_context(ad.take_rows(g.features, tf.fc_rows), tf.past_rel, tf.velocity)
    fc = cvae_loss(tape, model.store, tf.past_rel, tf.future_rel, ctx, 0.1, noise)
    codes = sampler_forward(tape, model.store, ctx, TOY.K)
    trajs = cvae_decode(tape, model.store, codes, repeat_rows(ctx, TOY.K))
    div = diversity_loss(trajs, codes, DppParams(R=1.0), groups=len(tf.fc_rows))
    return assoc + fc + div


@pytest.mark.criterion(1)
def test_c1_autodiff_oracle(detail):
    t0 = time.perf_counter()
    worst_op = max(gradcheck_ops(np.random.default_rng(0)).values())
    model = init_model(TOY, seed=0)
    tf = toy_frame()
    noise = np.random.default_rng(1).standard_normal((3, TOY.Z))
    tape = Tape()
    grads = ad.backward(tape, composed_loss(model, tf, noise, tape))
    fd = ad.finite_diff_gradient(lambda s: composed_loss(model, tf, noise).item(), model.store, 1e-6)
    worst_loss = max(rel_err(grads[n], fd[n]) for n in fd)
    elapsed = time.perf_counter() - t0
    detail(f"max rel err ops {worst_op:.2e}, composed loss {worst_loss:.2e} ({len(fd)} tensors), {elapsed:.1f} s")
    assert worst_op < 1e-5 and worst_loss < 1e-5 and elapsed < 10.0


# ---------------------------------------------------------------------------
# 2. assignment oracle
# ---------------------------------------------------------------------------

PERMS = {n: np.array(list(itertools.permutations(range(n)))) for n in range(1, 8)}


@pytest.mark.criterion(2)
def test_c2_assignment_oracle(detail):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    bad = 0
    for k in range(1000):
        n = int(rng.integers(1, 8))
        cost = rng.integers(0, 5, (n, n)).astype(float) if k % 3 == 0 else rng.uniform(-5, 5, (n, n))
        perms = PERMS[n]
        best = cost[np.arange(n), perms].sum(axis=1).min()
        bad += hungarian(cost).cost != best
    elapsed = time.perf_counter() - t0
    detail(f"{1000 - bad}/1000 exact matches, {elapsed:.2f} s")
    assert bad == 0 and elapsed < 5.0


# ---------------------------------------------------------------------------
# 3. GNN equivariance
# ---------------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_c3_gnn_equivariance(detail):
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(200):
        n = int(rng.integers(1, 13))
        nodes = []
        for i in range(n):
            st = np.concatenate([rng.uniform(-20, 20, 3), [rng.uniform(-math.pi, math.pi)], rng.uniform(1, 5, 3)])
            hist = st[[0, 2]] + np.cumsum(rng.normal(0, 0.5, (int(rng.integers(1, 6)), 2)), axis=0)
            nodes.append(AgentNode(i, TRACK if rng.random() < 0.5 else DETECTION, st, rng.normal(0, 1, 3), hist))
        store = ad.ParamStore(k)
        init_encoder(store, 3, 8)
        init_gnn(store, 8, 8, 2)
        out = run_gnn(build_graph(nodes, 15.0), store, Tape(), 3).features.data
        perm = rng.permutation(n)
        out_p = run_gnn(build_graph([nodes[i] for i in perm], 15.0), store, Tape(), 3).features.data
        worst = max(worst, float(np.abs(out_p - out[perm]).max()))
    detail(f"200 graphs, max deviation {worst:.1e}")
    assert worst <= 1e-9


# ---------------------------------------------------------------------------
# 4. DPP oracles
# ---------------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_c4_dpp_oracles(detail):
    rng = np.random.default_rng(4)
    ec_err = det_err = 0.0
    for _ in range(300):
        K = int(rng.integers(1, 9))
        A = rng.normal(size=(K, K))
        L = A @ A.T / K
        lam = np.linalg.eigvalsh(L)
        ec_err = max(ec_err, abs(expected_cardinality(L) - float(np.sum(lam / (1 + lam)))))
        sub = sorted(rng.choice(K, size=int(rng.integers(1, min(K, 6) + 1)), replace=False).tolist())
        want = cofactor_det(L[np.ix_(sub, sub)].tolist())
        det_err = max(det_err, abs(subset_det(L, sub) - want) / max(abs(want), 1e-300))
    ident = max(abs(expected_cardinality(np.eye(K)) - K / 2) for K in range(1, 9))
    ones = max(abs(expected_cardinality(np.ones((K, K))) - K / (1 + K)) for K in range(1, 9))
    detail(f"eigen {ec_err:.1e}, cofactor rel {det_err:.1e}, identity {ident:.1e}, all-ones {ones:.1e}")
    assert ec_err <= 1e-9 and det_err <= 1e-9 and ident <= 1e-12 and ones <= 1e-12


# ---------------------------------------------------------------------------
# 5. metric oracles
# ---------------------------------------------------------------------------


def _box(frame, tid, x, z, score=None):
    return TrackletRecord(frame=frame, category="Car", truncated=0.0, occluded=0, alpha=0.0,
                          bbox2d=(0.0, 0.0, 0.0, 0.0), dims=(1.5, 1.6, 4.0), center=(x, 1.65, z), rotation_y=0.0,
                          score=score, track_id=tid)


@pytest.mark.criterion(5)
def test_c5_metric_oracles(detail):
    errs = []
    errs.append(abs(ClearCounts(tp=8, fp=1, fn=2, ids=1, num_gt=10).mota - 0.6))
    gt = Sequence.from_records(0, [_box(f, i, 4.0 * i, 10.0 + 0.5 * f) for f in range(10) for i in range(4)])
    recs = gt.records()
    pred = Sequence.from_records(0, [TrackletRecord(**{**r.__dict__, "score": 0.1 + 0.02 * k})
                                     for k, r in enumerate(recs)])
    errs.append(abs(amota_family([gt], [pred])["sAMOTA"] - 1.0))
    g = np.array([[0.0, 0.0], [1.0, 0.0]])
    a, b = g + [2.0, 0.0], g + np.array([[3.0, 0.0], [0.0, 0.0]])
    for got, want in [(ade_fde(g[None], g), (0.0, 0.0)), (ade_fde((g + [0.0, 1.0])[None], g), (1.0, 1.0)),
                      (ade_fde(np.stack([a, b]), g), (1.5, 0.0)),
                      (asd_fsd(np.stack([g, g + [2.0, 0.0]])), (2.0, 2.0)), (asd_fsd(np.zeros((4, 3, 2))), (0.0, 0.0)),
                      (asd_fsd(np.stack([np.zeros((3, 2)) + [x, 0.0] for x in (0.0, 1.0, 5.0)])), (2.0, 2.0))]:
        errs.append(max(abs(got[0] - want[0]), abs(got[1] - want[1])))
    # noisy tracker, then a strictly monotone rescaling of its scores
    rng = np.random.default_rng(5)
    noisy = []
    for r in recs:
        if rng.random() < 0.85:
            x, y, z = r.center
            noisy.append(TrackletRecord(**{**r.__dict__, "center": (x + rng.normal(0, 0.4), y, z + rng.normal(0, 0.4)),
                                           "score": float(rng.uniform(0.1, 1.0)), "track_id": r.track_id + 10}))
        if rng.random() < 0.2:
            noisy.append(_box(r.frame, 90, float(rng.uniform(-20, 20)), float(rng.uniform(5, 40)),
                              score=float(rng.uniform(0.0, 0.6))))
    p1 = Sequence.from_records(0, noisy)
    p2 = Sequence.from_records(0, [TrackletRecord(**{**r.__dict__, "score": 5.0 * r.score ** 3 - 2.0}) for r in noisy])
    rep1 = MetricReport.from_tracking(evaluate_tracking([gt], [p1])).to_json()
    rep2 = MetricReport.from_tracking(evaluate_tracking([gt], [p2])).to_json()
    worst = max(errs)
    detail(f"max error {worst:.1e} over {len(errs)} hand oracles, rescaled report identical: {rep1 == rep2}")
    assert worst <= 1e-12 and rep1 == rep2


# ---------------------------------------------------------------------------
# 6. parser round trip
# ---------------------------------------------------------------------------


@pytest.mark.criterion(6)
def test_c6_parser_round_trip(detail):
    rng = np.random.default_rng(6)
    bad = 0
    for k in range(10_000):
        r = random_record(rng, with_track=bool(k % 2))
        bad += parse_line(format_record(r), isinstance(r, TrackletRecord)) != r
    rejected = 0
    good = "0 2 Car 0.0 0 -1.57 599.41 156.40 629.75 189.25 1.50 1.62 3.89 2.57 1.57 9.51 -1.55"
    for line, reason in MALFORMED:
        try:
            parse_text("\n".join([good, good, line, good]), True, path="seq.txt")
        except KittiParseError as exc:
            # blank lines are skipped, so the empty case cannot fail inside a file
            rejected += exc.line_no == 3 and reason in str(exc)
        else:
            try:
                parse_line(line, True, line_no=3)
            except KittiParseError as exc:
                rejected += line == "" and exc.line_no == 3 and reason in str(exc)
    detail(f"{10_000 - bad}/10000 records exact, {rejected}/{len(MALFORMED)} malformed lines rejected at the right line")
    assert bad == 0 and rejected == len(MALFORMED) == 20


# ---------------------------------------------------------------------------
# 7. end-to-end tracking
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def crossing_model(tmp_path_factory):
    cfg = RunConfig()
    scenes = [Scene.from_log(synth.generate(synth.crossing_config(0), seq_id=1000 + k)) for k in range(2)]
    model = init_model(cfg.model, cfg.train.seed)
    t0 = time.perf_counter()
    train(model, scenes, cfg.train, cfg.track)
    elapsed = time.perf_counter() - t0
    path = tmp_path_factory.mktemp("crossing") / "model.json"
    model.save(path)
    return model, path, elapsed


def _track_eval(model, noise):
    scene = Scene.from_log(synth.generate(synth.crossing_config(0, noise=noise), seq_id=0))
    res = run_sequence(model, scene, TrackConfig(), seed=0)
    return evaluate_tracking([scene.gt], [Sequence.from_records(0, res.records)])


@pytest.mark.criterion(7)
def test_c7_end_to_end_tracking(crossing_model, detail):
    model, _, elapsed = crossing_model
    noisy = _track_eval(model, True)
    clean = _track_eval(model, False)
    detail(f"noisy MOTA {noisy['MOTA']:.4f} IDS {noisy['IDS']}; noise-free MOTA {clean['MOTA']:.4f} "
           f"IDS {clean['IDS']}; training {elapsed:.0f} s")
    assert noisy["MOTA"] >= 0.75 and noisy["IDS"] <= 5
    assert clean["MOTA"] == 1.0 and clean["IDS"] == 0
    assert elapsed <= 600.0


# ---------------------------------------------------------------------------
# 8. diversity claim
# ---------------------------------------------------------------------------


@pytest.mark.criterion(8)
def test_c8_diversity_claim(detail):
    cfg = RunConfig()
    scenes = [Scene.from_log(synth.generate(synth.intersection_config(0), seq_id=1000 + k)) for k in range(4)]
    model = init_model(cfg.model, 0)
    train(model, scenes, cfg.train, cfg.track)
    test = synth.generate(synth.intersection_config(0, num_agents=40), seq_id=0)
    # last frame before the stop line: no input distinguishes the branches yet
    ask = {a.agent_id: synth.decision_frame(a) - 1 for a in test.agents}
    cases = forecast_cases(model, Scene.from_log(test), select=lambda f, g: ask[g] == f)
    stats = {}
    for mode in ("iid", "learned_sampler"):
        sets = sample_cases(model, cases, mode, seed=1)
        ade, asd, cov = [], [], []
        for c, s in zip(cases, sets):
            ade.append(ade_fde(s, c.future)[0])
            asd.append(asd_fsd(s)[0])
            ends = s.trajectories[:, -1]
            agent = test.agents[c.gt_id]
            cov.append(all(np.linalg.norm(ends - synth.branch_future(agent, c.frame, model.cfg.T, b)[-1], axis=1).min()
                           <= 2.0 for b in synth.BRANCHES))
        stats[mode] = (float(np.mean(ade)), float(np.mean(asd)), float(np.mean(cov)))
    (ade_i, asd_i, cov_i), (ade_l, asd_l, cov_l) = stats["iid"], stats["learned_sampler"]
    detail(f"{len(cases)} cases; ASD learned/iid {asd_l:.3f}/{asd_i:.3f} = {asd_l / asd_i:.2f}x; "
           f"ADE {ade_l:.3f} vs iid {ade_i:.3f}; coverage {cov_l:.3f} vs iid {cov_i:.3f}")
    assert len(cases) == 40
    assert asd_l >= 1.5 * asd_i and ade_l <= 1.1 * ade_i and cov_l >= 0.9 and cov_i < 0.7


# ---------------------------------------------------------------------------
# 9. parallel-head isolation
# ---------------------------------------------------------------------------


def _swap_all(a):
    if len(a.matches) < 2:
        return a
    rows = [r for r, _ in a.matches]
    cols = [c for _, c in a.matches]
    return type(a)(list(zip(rows, cols[1:] + cols[:1])), a.unmatched_rows, a.unmatched_cols, a.cost)


@pytest.mark.criterion(9)
def test_c9_parallel_head_isolation(crossing_model, detail):
    import copy

    model = crossing_model[0]
    scene = Scene.from_log(synth.generate(synth.crossing_config(0), seq_id=0))
    tcfg = TrackConfig(mode="iid")       # sampling noise makes any leak visible
    state = new_state(0, 0)
    for f in range(10):
        step_frame(model, state, scene.at(f)[0], f, tcfg)
    identical = changed = 0
    for f in range(10, 110):
        dets = scene.at(f)[0]
        dirty = copy.deepcopy(state)
        b = step_frame(model, dirty, dets, f, tcfg, assignment_hook=_swap_all)
        a = step_frame(model, state, dets, f, tcfg)
        changed += a.emitted != b.emitted
        same = bool(a.forecasts) and sorted(a.forecasts) == sorted(b.forecasts) and all(
            np.array_equal(a.forecasts[k].trajectories, b.forecasts[k].trajectories) for k in a.forecasts)
        identical += same
    detail(f"forecasts bit-identical in {identical}/100 frames; corruption changed emitted tracks in {changed}")
    assert identical == 100 and changed > 0


# ---------------------------------------------------------------------------
# 10. determinism
# ---------------------------------------------------------------------------


@pytest.mark.criterion(10)
def test_c10_determinism(crossing_model, tmp_path, detail):
    ckpt = str(crossing_model[1])
    common = ["--set", "data.sequences=2", "--set", "track.workers=2", "--seed", "7", "--checkpoint", ckpt]
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli.main(["track", "--out", str(out)] + common) == 0
        assert cli.main(["evaluate", "--out", str(out)] + [c for c in common if c not in ("--checkpoint", ckpt)]) == 0
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    same = [filecmp.cmp(outs[0] / f, outs[1] / f, shallow=False) for f in files]
    detail(f"{sum(same)}/{len(files)} output files bit-identical across two runs")
    assert len(files) >= 8 and all(same)
