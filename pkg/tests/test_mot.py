import itertools
import math

import numpy as np
import pytest

from helpers import box
from trackcast.autodiff import ParamStore, Tape
from trackcast.graph import DETECTION, TRACK, AgentNode, build_graph, init_encoder, init_gnn, run_gnn
from trackcast.layers import init_mlp
from trackcast.mot import (CONFIRMED, DEAD, PAIR_DIM, Assignment, KalmanConfig, LifecycleParams, TrackTable,
                           affinity, affinity_from_features, associate, association_loss, det_observation,
                           hungarian, init_affinity, kalman_predict, kalman_update, lifecycle_step, new_track)


def brute_force(cost):
    n = cost.shape[0]
    best, best_perm = None, None
    for perm in itertools.permutations(range(n)):    # lexicographic order
        c = sum(cost[i, perm[i]] for i in range(n))
        if best is None or c < best:
            best, best_perm = c, perm
    return best, best_perm


# --- affinity ------------------------------------------------------------


def mixed_graph(seed=0, D=4):
    rng = np.random.default_rng(seed)
    nodes = []
    for i in range(5):
        st = np.concatenate([rng.uniform(-10, 10, 3), [0.0], [4.0, 1.6, 1.5]])
        nodes.append(AgentNode(i, TRACK if i < 2 else DETECTION, st, np.zeros(3), None))
    s = ParamStore(seed)
    init_encoder(s, 2, D)
    init_gnn(s, D, D, 1)
    init_affinity(s, D, 6)
    t = Tape()
    return run_gnn(build_graph(nodes, 30.0), s, t, 2), s, t


def test_affinity_zero_weights():
    g, s, t = mixed_graph()
    for n in s.names("aff."):
        s.set(n, np.zeros_like(s[n]))
    a = affinity(g, s, t).data
    assert a.shape == (2, 3) and np.array_equal(a, np.full((2, 3), 0.5))


def test_affinity_deterministic_and_bounded():
    g, s, t = mixed_graph(1)
    a1 = affinity(g, s, t).data
    g2, _, t2 = mixed_graph(1)
    a2 = affinity(g2, s, t2).data
    assert np.array_equal(a1, a2)
    assert np.all((a1 >= 0) & (a1 <= 1))


def test_affinity_hand_example():
    D = 3
    s = ParamStore(0)
    init_mlp(s, "aff", [2 * D + PAIR_DIM, 1])
    w = np.zeros((2 * D + PAIR_DIM, 1))
    w[0, 0] = 1.0
    s.set("aff.W0", w)
    t = Tape()
    a = affinity_from_features(t, s, t.constant([[2.0, 0, 0]]), t.constant([[0.0, 0, 0]])).data
    assert abs(a[0, 0] - 1 / (1 + math.exp(-2))) < 1e-12
    assert abs(a[0, 0] - 0.8808) < 1e-4


# --- hungarian --------------------------------------------------------------


@pytest.mark.parametrize("cost,matches,total", [
    ([[0, 1], [1, 0]], [(0, 0), (1, 1)], 0.0),
    ([[1, 2], [3, 0]], [(0, 0), (1, 1)], 1.0),
    ([[4, 1, 3], [2, 0, 5], [3, 2, 2]], [(0, 1), (1, 0), (2, 2)], 5.0),
])
def test_hungarian_examples(cost, matches, total):
    a = hungarian(cost)
    assert a.matches == matches and a.cost == total


def test_hungarian_nan():
    with pytest.raises(ValueError):
        hungarian([[0.0, math.nan], [1.0, 0.0]])


def test_hungarian_rectangular():
    a = hungarian([[5.0, 1.0, 9.0]])
    assert a.matches == [(0, 1)] and a.unmatched_cols == [0, 2]
    a = hungarian([[5.0], [1.0], [9.0]])
    assert a.matches == [(1, 0)] and a.unmatched_rows == [0, 2]
    a = hungarian(np.zeros((0, 3)))
    assert a.matches == [] and a.unmatched_cols == [0, 1, 2]


def test_hungarian_brute_force():
    rng = np.random.default_rng(0)
    for k in range(300):
        n = int(rng.integers(1, 8))
        # small integer costs produce plenty of ties
        cost = rng.integers(0, 4, size=(n, n)).astype(float) if k % 2 else rng.uniform(0, 10, (n, n))
        best, perm = brute_force(cost)
        a = hungarian(cost)
        assert a.cost == best
        assert a.matches == list(enumerate(perm))


def test_hungarian_tie_break():
    a = hungarian(np.ones((3, 3)))
    assert a.matches == [(0, 0), (1, 1), (2, 2)]


# --- associate -------------------------------------------------------------


def test_associate_all_zero():
    a = associate(np.zeros((2, 3)), 0.5)
    assert a.matches == [] and a.unmatched_rows == [0, 1] and a.unmatched_cols == [0, 1, 2]


def test_associate_single():
    assert associate([[0.9]], 0.5).matches == [(0, 0)]


def test_associate_example():
    a = associate([[0.9, 0.4], [0.4, 0.6]], 0.5)
    assert a.matches == [(0, 0), (1, 1)]
    assert abs(a.cost - 0.5) < 1e-12


def test_associate_threshold_demotes():
    a = associate([[0.9, 0.0], [0.0, 0.3]], 0.5)
    assert a.matches == [(0, 0)] and a.unmatched_rows == [1] and a.unmatched_cols == [1]


def test_associate_partition():
    rng = np.random.default_rng(1)
    for _ in range(50):
        nr, nc = rng.integers(0, 6, size=2)
        a = associate(rng.uniform(0, 1, (nr, nc)), 0.5)
        rows = [r for r, _ in a.matches] + a.unmatched_rows
        cols = [c for _, c in a.matches] + a.unmatched_cols
        assert sorted(rows) == list(range(nr)) and sorted(cols) == list(range(nc))


def test_associate_bad_threshold():
    with pytest.raises(ValueError):
        associate([[0.5]], 1.0)


# --- kalman -----------------------------------------------------------------


def track_at(x, v=(0.0, 0.0, 0.0)):
    t = new_track(0, np.array([*x, 0.0, 4.0, 1.6, 1.5]))
    t.x[7:10] = v
    return t


def test_predict_moves():
    t = kalman_predict(track_at((0, 0, 0), (1, 0, 0)), 1)
    assert np.array_equal(t.x[:3], [1, 0, 0])
    t = kalman_predict(track_at((2, 0, 0), (-1, 0, 0)), 2)
    assert np.array_equal(t.x[:3], [0, 0, 0])


def test_predict_zero_velocity_grows_covariance():
    t = track_at((1, 2, 3))
    tr = np.trace(t.P)
    kalman_predict(t, 1)
    assert np.array_equal(t.x[:3], [1, 2, 3]) and np.trace(t.P) > tr


def test_update_noise_free_limit():
    t = kalman_predict(track_at((0, 0, 0), (1, 0, 0)), 1)
    obs = np.array([1.3, 0.2, -0.4, 0.1, 4.1, 1.7, 1.4])
    kalman_update(t, obs, R=1e-12 * np.eye(7))
    assert np.abs(t.x[:7] - obs).max() < 1e-9
    assert t.hits == 2 and t.age == 0


def test_update_zero_innovation():
    t = kalman_predict(track_at((3, 1, 2), (0.5, 0, 0)), 1)
    before = t.x.copy()
    kalman_update(t, t.x[:7].copy())
    assert np.abs(t.x - before).max() < 1e-12


def test_update_scalar_gain():
    t = track_at((0, 0, 0))
    t.P = np.eye(10)
    kalman_update(t, np.array([2.0, 2.0, 2.0, 0.0, 4.0, 1.6, 1.5]), R=np.eye(7))
    assert np.allclose(t.x[:3], [1.0, 1.0, 1.0], atol=1e-12)


def test_update_singular():
    from trackcast.autodiff import NumericalError

    t = track_at((0, 0, 0))
    t.P = np.zeros((10, 10))
    with pytest.raises(NumericalError):
        kalman_update(t, np.zeros(7), R=np.zeros((7, 7)))


def test_yaw_stays_wrapped():
    rng = np.random.default_rng(2)
    t = track_at((0, 0, 0))
    for _ in range(100):
        kalman_predict(t, 1)
        obs = np.array([0, 0, 0, rng.uniform(-10, 10), 4.0, 1.6, 1.5])
        kalman_update(t, obs)
        assert -math.pi <= t.x[3] < math.pi


# --- lifecycle ----------------------------------------------------------------


def run_frames(table, frames, params):
    out = []
    for f, dets in enumerate(frames):
        table.predict()
        nt = len(table.tracks)
        a = hungarian(np.zeros((nt, len(dets)))) if nt and dets else Assignment([], list(range(nt)), list(range(len(dets))), 0.0)
        _, emitted = lifecycle_step(table, a, dets, params, f)
        out.append(emitted)
    return out


def test_fresh_detection_confirmed_on_third_hit():
    table = TrackTable()
    params = LifecycleParams(min_hits=3, max_age=2)
    # the object appears after the start-of-sequence warm-up
    frames = [[]] * 5 + [[box(f, 0, 0.0, 10.0 + f * 0.1)] for f in range(5, 10)]
    out = run_frames(table, frames, params)
    assert out[5] == [] and out[6] == []
    assert len(out[7]) == 1 and out[7][0].track_id == 0
    assert table.tracks[0].status == CONFIRMED


def test_confirmed_track_dies_after_max_age():
    table = TrackTable()
    params = LifecycleParams(min_hits=3, max_age=2)
    frames = [[box(f, 0, 0.0, 10.0)] for f in range(4)] + [[], [], []]
    run_frames(table, frames, params)
    assert table.tracks == []


def test_unmatched_track_survives_within_max_age():
    table = TrackTable()
    params = LifecycleParams(min_hits=3, max_age=2)
    run_frames(table, [[box(f, 0, 0.0, 10.0)] for f in range(4)] + [[], []], params)
    assert len(table.tracks) == 1 and table.tracks[0].age == 2


def test_empty_no_op():
    table = TrackTable()
    _, emitted = lifecycle_step(table, Assignment([], [], [], 0.0), [], LifecycleParams())
    assert emitted == [] and table.tracks == [] and table.next_id == 0


def test_ids_never_reused():
    table = TrackTable()
    params = LifecycleParams(min_hits=1, max_age=0)
    seen = []
    for f in range(6):
        table.predict()
        a = Assignment([], list(range(len(table.tracks))), [0], 0.0)
        lifecycle_step(table, a, [box(f, 0, 0.0, 10.0)], params, f)
        seen += [t.id for t in table.tracks]
    assert seen == sorted(seen) and len(set(seen)) == len(seen)


def test_dead_status():
    table = TrackTable()
    t = table.spawn(det_observation(box(0, 0, 0.0, 5.0)))
    params = LifecycleParams(max_age=0)
    lifecycle_step(table, Assignment([], [0], [], 0.0), [], params)
    assert t.status == DEAD and table.tracks == []


# --- association loss ----------------------------------------------------


def test_loss_all_half():
    t = Tape()
    loss = association_loss(t.constant(np.full((2, 3), 0.5)), np.eye(2, 3))
    assert abs(loss.item() - math.log(2)) < 1e-12


def test_loss_perfect():
    t = Tape()
    target = np.eye(3)
    assert association_loss(t.constant(target), target).item() < 1e-6


def test_loss_empty():
    t = Tape()
    assert association_loss(t.constant(np.zeros((0, 2))), np.zeros((0, 2))).item() == 0.0


def test_kalman_defaults():
    cfg = KalmanConfig()
    Q = cfg.process_noise()
    assert np.array_equal(np.diag(Q)[7:], [1e-2] * 3)
    assert np.array_equal(cfg.obs_noise(), 0.1 * np.eye(7))
