"""Evaluation metrics: rotated-box 3D IoU, CLEAR MOT, the AMOTA family,
and best-of-K displacement / self-distance trajectory metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence as Seq

import numpy as np

from . import kernels
from .kitti_io import DetectionRecord, Sequence
from .mot import SENTINEL

DEFAULT_IOU_MIN = 0.25
DEFAULT_RECALL_LEVELS = 40
DONTCARE_2D_OVERLAP = 0.5


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Box3d:
    center: tuple[float, float, float]   # geometric centre (x, y, z)
    dims: tuple[float, float, float]     # length, width, height
    yaw: float

    def __post_init__(self):
        if not all(d > 0 for d in self.dims):
            raise ValueError(f"box dimensions must be positive, got {self.dims}")

    @classmethod
    def from_record(cls, r: DetectionRecord) -> "Box3d":
        h, w, l = r.dims
        x, y, z = r.center
        # KITTI locations sit on the bottom face; y points down
        return cls((x, y - 0.5 * h, z), (l, w, h), r.rotation_y)

    def as_row(self) -> list[float]:
        return [*self.center, *self.dims, self.yaw]


def boxes_array(records: Iterable) -> np.ndarray:
    rows = [(r if isinstance(r, Box3d) else Box3d.from_record(r)).as_row() for r in records]
    return np.array(rows, dtype=np.float64).reshape(-1, 7)


def iou3d(a: Box3d, b: Box3d) -> float:
    """Rotated BEV intersection times vertical overlap, over the union of volumes."""
    return float(kernels.iou3d_matrix(np.array([a.as_row()]), np.array([b.as_row()]))[0, 0])


def iou_matrix(gt: Seq, pred: Seq) -> np.ndarray:
    if not gt or not pred:
        return np.zeros((len(gt), len(pred)))
    return kernels.iou3d_matrix(boxes_array(gt), boxes_array(pred))


def _bbox_overlap_fraction(pred, region) -> float:
    pl, pt, pr, pb = pred
    dl, dt, dr, db = region
    area = (pr - pl) * (pb - pt)
    if area <= 0:
        return 0.0
    iw = min(pr, dr) - max(pl, dl)
    ih = min(pb, db) - max(pt, dt)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / area


def dontcare_mask(preds: Seq[DetectionRecord], dontcare: Seq[DetectionRecord], iou_min: float) -> np.ndarray:
    """True for predictions that fall inside a DontCare region (2D box or valid 3D box)."""
    mask = np.zeros(len(preds), dtype=bool)
    if not dontcare or not preds:
        return mask
    boxed = [d for d in dontcare if all(v > 0 for v in d.dims)]
    iou = iou_matrix(boxed, preds) if boxed else np.zeros((0, len(preds)))
    for j, p in enumerate(preds):
        if any(_bbox_overlap_fraction(p.bbox2d, d.bbox2d) >= DONTCARE_2D_OVERLAP for d in dontcare):
            mask[j] = True
        elif iou.shape[0] and iou[:, j].max() >= iou_min:
            mask[j] = True
    return mask


@dataclass
class FrameMatch:
    frame: int
    matches: list[tuple[int, int, float]]   # (gt track id, predicted track id, IoU)
    fp: int
    fn: int
    num_gt: int
    gt_ids: list[int] = field(default_factory=list)
    ignored: int = 0


def _gated_matching(iou: np.ndarray, iou_min: float) -> list[tuple[int, int]]:
    if iou.size == 0:
        return []
    valid = iou >= iou_min
    if not valid.any():
        return []
    from .mot import hungarian

    cost = np.where(valid, 1.0 - iou, SENTINEL)
    return [(r, c) for r, c in hungarian(cost).matches if valid[r, c]]


def match_frame(gt: Seq, pred: Seq, iou_min: float = DEFAULT_IOU_MIN, dontcare: Seq = (),
                iou: np.ndarray | None = None, ignore: np.ndarray | None = None, frame: int = 0) -> FrameMatch:
    """One-to-one matching of a frame's ground truth and predictions on ``1 - IoU``."""
    gt = [g for g in gt if not g.is_dontcare]
    if iou is None:
        iou = iou_matrix(gt, pred)
    if ignore is None:
        ignore = dontcare_mask(pred, dontcare, iou_min)
    pairs = _gated_matching(iou, iou_min)
    matched_p = {c for _, c in pairs}
    unmatched_p = [j for j in range(len(pred)) if j not in matched_p]
    ignored = sum(1 for j in unmatched_p if ignore[j])
    return FrameMatch(
        frame=frame,
        matches=[(getattr(gt[r], "track_id", r), getattr(pred[c], "track_id", c), float(iou[r, c])) for r, c in pairs],
        fp=len(unmatched_p) - ignored,
        fn=len(gt) - len(pairs),
        num_gt=len(gt),
        gt_ids=[getattr(g, "track_id", i) for i, g in enumerate(gt)],
        ignored=ignored,
    )


@dataclass
class ClearCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    frag: int = 0
    iou_sum: float = 0.0
    num_gt: int = 0

    def __iadd__(self, other: "ClearCounts"):
        for k in ("tp", "fp", "fn", "ids", "frag", "iou_sum", "num_gt"):
            setattr(self, k, getattr(self, k) + getattr(other, k))
        return self

    @property
    def mota(self) -> float:
        if self.num_gt == 0:
            raise MetricError("MOTA is undefined without ground truth objects")
        return 1.0 - (self.fp + self.fn + self.ids) / self.num_gt

    @property
    def motp(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0


def clear_counts(frames: Seq[FrameMatch]) -> ClearCounts:
    """Accumulate one sequence's frame matches (in frame order)."""
    c = ClearCounts()
    last_pred: dict[int, int] = {}
    tracked: dict[int, list[bool]] = {}
    for fm in frames:
        c.tp += len(fm.matches)
        c.fp += fm.fp
        c.fn += fm.fn
        c.num_gt += fm.num_gt
        matched = {}
        for g, p, iou in fm.matches:
            c.iou_sum += iou
            matched[g] = p
            if g in last_pred and last_pred[g] != p:
                c.ids += 1
            last_pred[g] = p
        for g in fm.gt_ids:
            tracked.setdefault(g, []).append(g in matched)
    for flags in tracked.values():
        seen = False
        for k, f in enumerate(flags):
            if f and seen and not flags[k - 1]:
                c.frag += 1
            seen = seen or f
    return c


def clear_mot(sequences: Seq[Seq[FrameMatch]]) -> dict:
    """MOTA, MOTP, IDS and FRAG over one or more sequences of frame matches."""
    total = ClearCounts()
    for frames in sequences:
        total += clear_counts(frames)
    return {"MOTA": total.mota, "MOTP": total.motp, "IDS": total.ids, "FRAG": total.frag, "counts": total}


# ---------------------------------------------------------------------------
# sequence-level evaluation with cached overlaps
# ---------------------------------------------------------------------------


@dataclass
class _FrameCache:
    frame: int
    gt: list
    pred: list
    scores: np.ndarray
    iou: np.ndarray
    ignore: np.ndarray


def _build_cache(gt_seq: Sequence, pred_seq: Sequence, iou_min: float, need_scores: bool) -> list[_FrameCache]:
    frames = sorted(set(gt_seq.frames) | set(pred_seq.frames))
    out = []
    for f in frames:
        gt = [g for g in gt_seq.at(f) if not g.is_dontcare]
        pred = list(pred_seq.at(f))
        if need_scores and any(p.score is None for p in pred):
            raise MetricError(f"sequence {pred_seq.seq_id} frame {f}: prediction without a confidence score")
        scores = np.array([p.score if p.score is not None else 0.0 for p in pred], dtype=np.float64)
        out.append(_FrameCache(f, gt, pred, scores, iou_matrix(gt, pred),
                               dontcare_mask(pred, gt_seq.dontcare_at(f), iou_min)))
    return out


def _frame_matches(cache: list[_FrameCache], iou_min: float, min_score: float | None = None) -> list[FrameMatch]:
    out = []
    for fc in cache:
        if min_score is None:
            keep = np.arange(len(fc.pred))
        else:
            keep = np.flatnonzero(fc.scores >= min_score)
        pred = [fc.pred[j] for j in keep]
        out.append(match_frame(fc.gt, pred, iou_min, iou=fc.iou[:, keep], ignore=fc.ignore[keep], frame=fc.frame))
    return out


def evaluate_clear(gt_seqs: Seq[Sequence], pred_seqs: Seq[Sequence], iou_min: float = DEFAULT_IOU_MIN) -> ClearCounts:
    total = ClearCounts()
    for g, p in zip(gt_seqs, pred_seqs):
        total += clear_counts(_frame_matches(_build_cache(g, p, iou_min, False), iou_min))
    return total


def _recall_curve(caches: list[list[_FrameCache]], thresholds: np.ndarray, iou_min: float) -> np.ndarray:
    """True positives after admitting each score group, via incremental maximum matching."""
    events: dict[float, list] = {}
    for s, cache in enumerate(caches):
        for fi, fc in enumerate(cache):
            for j, score in enumerate(fc.scores):
                events.setdefault(float(score), []).append((s, fi, j))
    match_gt: dict[tuple[int, int], dict[int, int]] = {}   # (seq, frame) -> gt row -> pred col
    adj: dict[tuple[int, int, int], list[int]] = {}
    tp = 0
    curve = [0]
    for thr in thresholds:
        for s, fi, j in events[float(thr)]:
            fc = caches[s][fi]
            rows = np.flatnonzero(fc.iou[:, j] >= iou_min).tolist() if fc.iou.shape[0] else []
            adj[(s, fi, j)] = rows
            mg = match_gt.setdefault((s, fi), {})
            seen: set[int] = set()

            def augment(p):
                for g in adj[(s, fi, p)]:
                    if g in seen:
                        continue
                    seen.add(g)
                    if g not in mg or augment(mg[g]):
                        mg[g] = p
                        return True
                return False

            if rows and augment(j):
                tp += 1
        curve.append(tp)
    return np.array(curve, dtype=np.int64)


def amota_family(gt_seqs: Seq[Sequence], pred_seqs: Seq[Sequence], recall_levels: int = DEFAULT_RECALL_LEVELS,
                 iou_min: float = DEFAULT_IOU_MIN, _caches=None) -> dict:
    """sAMOTA, AMOTA and AMOTP averaged over ``recall_levels`` recall targets.

    For target r the confidence threshold is the one whose kept predictions
    reach the largest recall not exceeding r (highest such threshold on ties).
    Targets above the best achievable recall contribute zero.
    """
    L = int(recall_levels)
    if L < 1:
        raise ValueError("need at least one recall level")
    caches = _caches if _caches is not None else [
        _build_cache(g, p, iou_min, True) for g, p in zip(gt_seqs, pred_seqs)]
    num_gt = sum(len(fc.gt) for cache in caches for fc in cache)
    if num_gt == 0:
        raise MetricError("AMOTA is undefined without ground truth objects")
    all_scores = np.unique(np.concatenate([fc.scores for cache in caches for fc in cache] or [np.zeros(0)]))
    thresholds = all_scores[::-1]
    curve = _recall_curve(caches, thresholds, iou_min)
    counts_at: dict[int, ClearCounts] = {}
    s_vals, a_vals, p_vals = [], [], []
    for i in range(1, L + 1):
        if curve[-1] * L < i * num_gt:
            s_vals.append(0.0)
            a_vals.append(0.0)
            p_vals.append(0.0)
            continue
        ok = np.flatnonzero(curve * L <= i * num_gt)
        best_tp = curve[ok].max()
        k = int(ok[curve[ok] == best_tp].min())
        if k not in counts_at:
            total = ClearCounts()
            for cache in caches:
                if k == 0:
                    fm = [match_frame(fc.gt, [], iou_min, iou=fc.iou[:, :0], ignore=fc.ignore[:0], frame=fc.frame)
                          for fc in cache]
                else:
                    fm = _frame_matches(cache, iou_min, float(thresholds[k - 1]))
                total += clear_counts(fm)
            counts_at[k] = total
        c = counts_at[k]
        errors = c.fp + c.fn + c.ids
        a_vals.append(max(0.0, 1.0 - errors / num_gt))
        s_vals.append(max(0.0, 1.0 - (errors * L - (L - i) * num_gt) / (i * num_gt)))
        p_vals.append(c.motp)
    return {"sAMOTA": float(np.mean(s_vals)), "AMOTA": float(np.mean(a_vals)), "AMOTP": float(np.mean(p_vals)),
            "per_recall": {"sMOTA": s_vals, "MOTA": a_vals, "MOTP": p_vals}}


def evaluate_tracking(gt_seqs: Seq[Sequence], pred_seqs: Seq[Sequence], iou_min: float = DEFAULT_IOU_MIN,
                      recall_levels: int = DEFAULT_RECALL_LEVELS) -> dict:
    """All tracking metrics, fractions in [0, 1] (MOTA may be negative)."""
    caches = [_build_cache(g, p, iou_min, True) for g, p in zip(gt_seqs, pred_seqs)]
    total = ClearCounts()
    per_seq = []
    for cache in caches:
        fm = _frame_matches(cache, iou_min)
        per_seq.append(fm)
        total += clear_counts(fm)
    fam = amota_family(gt_seqs, pred_seqs, recall_levels, iou_min, _caches=caches)
    return {"sAMOTA": fam["sAMOTA"], "AMOTA": fam["AMOTA"], "AMOTP": fam["AMOTP"],
            "MOTA": total.mota, "MOTP": total.motp, "IDS": total.ids, "FRAG": total.frag,
            "counts": total, "frame_matches": per_seq}


# ---------------------------------------------------------------------------
# trajectory metrics
# ---------------------------------------------------------------------------


def _samples(samples) -> np.ndarray:
    arr = getattr(samples, "trajectories", samples)
    return np.asarray(arr, dtype=np.float64)


def ade_fde(samples, gt) -> tuple[float, float]:
    """Best-of-K average and final displacement errors (minima taken independently)."""
    y = _samples(samples)
    gt = np.asarray(gt, dtype=np.float64)
    if y.ndim != 3 or y.shape[1:] != gt.shape:
        raise ValueError(f"horizon mismatch: samples {y.shape} vs ground truth {gt.shape}")
    err = np.sqrt(((y - gt[None]) ** 2).sum(axis=-1))
    return float(err.mean(axis=1).min()), float(err[:, -1].min())


def asd_fsd(samples) -> tuple[float, float]:
    """Mean over samples of the distance to the nearest other sample (all steps / final step)."""
    y = _samples(samples)
    K = y.shape[0]
    if K < 2:
        raise ValueError("self-distance needs at least two samples")
    d = np.sqrt(((y[:, None] - y[None, :]) ** 2).sum(axis=-1))   # (K, K, T)
    avg = d.mean(axis=-1)
    fin = d[:, :, -1].copy()
    np.fill_diagonal(avg, np.inf)
    np.fill_diagonal(fin, np.inf)
    return float(avg.min(axis=1).mean()), float(fin.min(axis=1).mean())


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

TABLE1_COLUMNS = ("sAMOTA", "AMOTA", "AMOTP", "MOTA", "MOTP", "IDS", "FRAG")
TABLE2_METRICS = ("ADE", "FDE", "ASD", "FSD")
REPORT_NOTES = (
    "ADE/FDE are best-of-K (minimum over samples, taken independently).",
    "ASD/FSD average each sample's distance to its nearest other sample.",
)


@dataclass
class MetricReport:
    method: str = "trackcast"
    sAMOTA: float | None = None
    AMOTA: float | None = None
    AMOTP: float | None = None
    MOTA: float | None = None
    MOTP: float | None = None
    IDS: int | None = None
    FRAG: int | None = None
    forecasting: dict[str, dict[str, float]] = field(default_factory=dict)   # "1.0s" -> metrics
    counts: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=lambda: list(REPORT_NOTES))

    @classmethod
    def from_tracking(cls, result: dict, method: str = "trackcast") -> "MetricReport":
        pct = lambda v: 100.0 * v  # noqa: E731
        c: ClearCounts = result["counts"]
        return cls(method=method, sAMOTA=pct(result["sAMOTA"]), AMOTA=pct(result["AMOTA"]),
                   AMOTP=pct(result["AMOTP"]), MOTA=pct(result["MOTA"]), MOTP=pct(result["MOTP"]),
                   IDS=int(result["IDS"]), FRAG=int(result["FRAG"]),
                   counts={"TP": c.tp, "FP": c.fp, "FN": c.fn, "num_gt": c.num_gt})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        return cls(**data)

    def table1(self) -> str:
        header = ["Method"] + [f"{c}(%)" if c not in ("IDS", "FRAG") else c for c in TABLE1_COLUMNS]
        row = [self.method]
        for c in TABLE1_COLUMNS:
            v = getattr(self, c)
            row.append("-" if v is None else (str(v) if c in ("IDS", "FRAG") else f"{v:.2f}"))
        return _aligned([header, row], "3D MOT evaluation")

    def table2(self) -> str:
        rows = [["Settings", "Metrics", self.method]]
        for setting in sorted(self.forecasting, key=lambda s: float(s.rstrip("s"))):
            m = self.forecasting[setting]
            for name in TABLE2_METRICS:
                v = m.get(name)
                rows.append([setting if name == "ADE" else "", name, "-" if v is None else f"{v:.3f}"])
        notes = "\n".join(f"# {n}" for n in self.notes)
        return notes + "\n" + _aligned(rows, "Trajectory forecasting evaluation")


def _aligned(rows: list[list[str]], title: str) -> str:
    widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
    lines = [title]
    for n, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("-" * len(lines[-1]))
    return "\n".join(lines) + "\n"


def forecast_summary(entries: Seq[tuple[np.ndarray, np.ndarray]], horizon: int) -> dict[str, float]:
    """Mean ADE/FDE/ASD/FSD over (samples (K, T, 2), gt (T, 2)) pairs truncated to ``horizon`` steps."""
    vals = {k: [] for k in TABLE2_METRICS}
    for samples, gt in entries:
        y = _samples(samples)[:, :horizon]
        g = np.asarray(gt)[:horizon]
        if y.shape[1] < horizon or len(g) < horizon:
            continue
        ade, fde = ade_fde(y, g)
        vals["ADE"].append(ade)
        vals["FDE"].append(fde)
        if y.shape[0] >= 2:
            asd, fsd = asd_fsd(y)
            vals["ASD"].append(asd)
            vals["FSD"].append(fsd)
    out = {k: (float(np.mean(v)) if v else math.nan) for k, v in vals.items()}
    out["count"] = len(vals["ADE"])
    return out
