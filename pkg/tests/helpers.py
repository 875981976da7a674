"""Shared builders for the test suite."""
import math

import numpy as np

from trackcast import autodiff as ad
from trackcast.autodiff import ParamStore, Tape
from trackcast.kitti_io import DetectionRecord, TrackletRecord

GOOD_LINE = "0 2 Car 0.0 0 -1.57 599.41 156.40 629.75 189.25 1.50 1.62 3.89 2.57 1.57 9.51 -1.55"

# (line, reason fragment); each one is wrong in exactly one place
MALFORMED = [
    ("0 Car 0.0", "field"),
    ("", "field"),
    ("0 2 Car 0.0 0 -1.57 599.41 156.40 629.75 189.25 1.50 1.62 3.89 2.57 1.57 9.51", "field"),
    (GOOD_LINE + " 0.9 extra", "field"),
    (GOOD_LINE.replace("0 2 Car", "x 2 Car", 1), "frame"),
    (GOOD_LINE.replace("0 2 Car", "-1 2 Car", 1), "frame"),
    (GOOD_LINE.replace("0 2 Car", "0 2.5 Car", 1), "track_id"),
    (GOOD_LINE.replace("0 2 Car", "0 -3 Car", 1), "track_id"),
    (GOOD_LINE.replace("Car 0.0", "Car abc", 1), "truncated"),
    (GOOD_LINE.replace("Car 0.0 0", "Car 0.0 zero", 1), "occluded"),
    (GOOD_LINE.replace("-1.57 599.41", "nan 599.41", 1), "alpha"),
    (GOOD_LINE.replace("599.41", "inf", 1), "left"),
    (GOOD_LINE.replace("156.40", "1..5", 1), "top"),
    (GOOD_LINE.replace("629.75", "-inf", 1), "right"),
    (GOOD_LINE.replace("189.25", "", 1), "field"),
    (GOOD_LINE.replace("1.50 1.62", "0.0 1.62", 1), "dimensions"),
    (GOOD_LINE.replace("1.62 3.89", "1.62 -3.89", 1), "dimensions"),
    (GOOD_LINE.replace("9.51", "9,51", 1), "z"),
    (GOOD_LINE.replace("599.41 156.40 629.75", "629.75 156.40 599.41", 1), "2D box"),
    (GOOD_LINE + " NaN", "score"),
]


def random_record(rng: np.random.Generator, with_track: bool = True, with_score: bool | None = None):
    left, top = rng.uniform(0, 1200), rng.uniform(0, 370)
    kw = dict(
        frame=int(rng.integers(0, 1000)),
        category=str(rng.choice(["Car", "Pedestrian", "Van", "Cyclist"])),
        truncated=float(rng.uniform(0, 1)),
        occluded=int(rng.integers(0, 4)),
        alpha=float(rng.uniform(-math.pi, math.pi)),
        bbox2d=(left, top, left + float(rng.uniform(0, 200)), top + float(rng.uniform(0, 200))),
        dims=tuple(float(v) for v in rng.uniform(0.1, 10.0, size=3)),
        center=tuple(float(v) for v in rng.uniform(-80, 80, size=3)),
        rotation_y=float(rng.uniform(-3 * math.pi, 3 * math.pi)),
        score=(float(rng.standard_normal()) if (with_score if with_score is not None else rng.random() < 0.5)
               else None),
    )
    if with_track:
        return TrackletRecord(track_id=int(rng.integers(-1, 100)), **kw)
    return DetectionRecord(**kw)


def box(frame, tid, x, z, ry=0.0, dims=(1.5, 1.6, 4.0), score=None, y=1.65):
    """Car-sized ground-truth style record at ground-plane position (x, z)."""
    return TrackletRecord(frame=frame, category="Car", truncated=0.0, occluded=0, alpha=0.0,
                          bbox2d=(0.0, 0.0, 0.0, 0.0), dims=dims, center=(x, y, z), rotation_y=ry,
                          score=score, track_id=tid)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def op_cases(rng):
    """(kind, operand shapes, attrs, positive-input flag) covering every primitive."""
    m, n = (int(d) for d in rng.integers(1, 5, size=2))
    k = int(rng.integers(1, 5))
    sq = int(rng.integers(1, 5))
    yield "matmul", [(m, n), (n, k)], {}, False
    for kind in ("add", "sub", "mul_elementwise"):
        yield kind, [(m, n), (m, n)], {}, False
        yield kind, [(m, n), ()], {}, False
    yield "scalar_mul", [(m, n)], {"c": 1.7}, False
    yield "add_bias", [(m, n), (n,)], {}, False
    yield "concat_last_axis", [(m, n), (m, k)], {}, False
    yield "concat_rows", [(m, n), (k, n)], {}, False
    for kind in ("reduce_sum", "reduce_mean"):
        for axis in (None, 0, 1):
            yield kind, [(m, n)], {"axis": axis}, False
    yield "reduce_min", [(m, n)], {"axis": 1}, False
    for kind in ("relu", "tanh", "sigmoid", "exp", "square"):
        yield kind, [(m, n)], {}, False
    yield "log", [(m, n)], {}, True
    yield "sqrt", [(m, n)], {}, True
    yield "reshape", [(m, n)], {"shape": (n, m)}, False
    yield "transpose", [(m, n)], {}, False
    yield "take_rows", [(m, n)], {"idx": rng.integers(0, m, size=3)}, False
    yield "inv", [(sq, sq)], {}, False
    yield "clamp", [(m, n)], {"lo": -0.5, "hi": 0.5}, False


def _op_store(rng, shapes, positive):
    s = ParamStore(0)
    for i, shp in enumerate(shapes):
        s.add(f"x{i}", shp if shp else (1,), init="zeros")
        v = rng.uniform(0.2, 2.0, size=shp) if positive else rng.standard_normal(shp)
        if len(shp) == 2 and shp[0] == shp[1] and shapes == [shp]:
            v = v + 3.0 * np.eye(shp[0])        # well conditioned for inv
        s._params[f"x{i}"] = np.asarray(v, dtype=np.float64).reshape(shp)
    return s


def gradcheck_ops(rng, eps=1e-6) -> dict[str, float]:
    """Worst relative error of backward vs central differences, per op kind."""
    worst: dict[str, float] = {}
    for kind, shapes, attrs, positive in op_cases(rng):
        s = _op_store(rng, shapes, positive)
        if kind in ("relu", "clamp", "reduce_min"):
            # keep clear of kinks
            x = s["x0"]
            x[np.abs(x) < 1e-3] += 0.1
            if kind == "clamp":
                x[np.abs(np.abs(x) - 0.5) < 1e-3] += 0.1
        t0 = Tape()
        out_shape = t0.apply(kind, *[t0.param(s, f"x{i}") for i in range(len(shapes))], **attrs).shape
        weights = rng.standard_normal(out_shape)

        def f(store, tape=None):
            tape = Tape() if tape is None else tape
            y = tape.apply(kind, *[tape.param(store, f"x{i}") for i in range(len(shapes))], **attrs)
            return ad.reduce_sum(y * tape.constant(weights))

        tape = Tape()
        grads = ad.backward(tape, f(s, tape))
        fd = ad.finite_diff_gradient(lambda p: f(p).item(), s, eps)
        err = max(rel_err(grads[n], fd[n]) for n in fd)
        worst[kind] = max(worst.get(kind, 0.0), err)
    return worst
