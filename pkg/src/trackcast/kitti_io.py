"""Reading and writing KITTI tracking-format label, detection and result files.

Detection lines carry 16 fields (17 with a trailing score); label and result
lines carry a track id after the frame index, for 17 (18) fields::

    frame [track_id] type truncated occluded alpha \
        left top right bottom  height width length  x y z  rotation_y [score]
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence as Seq

DONTCARE = "DontCare"


class KittiParseError(ValueError):
    def __init__(self, reason: str, line_no: int | None = None, field_name: str | None = None,
                 path: str | None = None):
        super().__init__(reason)
        self.reason = reason
        self.line_no = line_no
        self.field_name = field_name
        self.path = path

    def __str__(self) -> str:
        where = [str(p) for p in (self.path,) if p is not None]
        if self.line_no is not None:
            where.append(f"line {self.line_no}")
        if self.field_name is not None:
            where.append(f"field {self.field_name!r}")
        return f"{':'.join(where)}: {self.reason}" if where else self.reason


def normalize_angle(a: float) -> float:
    """Map into [-pi, pi]; values already inside the interval are returned untouched."""
    if -math.pi <= a <= math.pi:
        return a
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a < 0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class DetectionRecord:
    frame: int
    category: str
    truncated: float
    occluded: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    dims: tuple[float, float, float]      # height, width, length
    center: tuple[float, float, float]    # x, y, z (camera frame, bottom centre)
    rotation_y: float
    score: float | None = None

    def __post_init__(self):
        if self.frame < 0:
            raise ValueError(f"negative frame index {self.frame}")
        if self.category != DONTCARE:
            if not all(d > 0 for d in self.dims):
                raise ValueError(f"non-positive box dimensions {self.dims}")
        left, top, right, bottom = self.bbox2d
        if right < left or bottom < top:
            raise ValueError(f"inverted 2D box {self.bbox2d}")
        object.__setattr__(self, "rotation_y", normalize_angle(self.rotation_y))

    @property
    def height(self) -> float:
        return self.dims[0]

    @property
    def width(self) -> float:
        return self.dims[1]

    @property
    def length(self) -> float:
        return self.dims[2]

    @property
    def is_dontcare(self) -> bool:
        return self.category == DONTCARE


@dataclass(frozen=True)
class TrackletRecord(DetectionRecord):
    track_id: int = -1

    def __post_init__(self):
        super().__post_init__()
        if self.track_id < -1:
            raise ValueError(f"invalid track id {self.track_id}")


@dataclass
class Sequence:
    """Per-frame records of one sequence, frames kept in ascending order."""

    seq_id: int
    frames: dict[int, list] = field(default_factory=dict)
    dontcare: dict[int, list] = field(default_factory=dict)

    @classmethod
    def from_records(cls, seq_id: int, records: Iterable[DetectionRecord]) -> "Sequence":
        frames: dict[int, list] = {}
        dontcare: dict[int, list] = {}
        for r in records:
            target = dontcare if r.is_dontcare else frames
            target.setdefault(r.frame, []).append(r)
        return cls(seq_id, dict(sorted(frames.items())), dict(sorted(dontcare.items())))

    def __iter__(self):
        return iter(self.frames.items())

    def __len__(self):
        return len(self.frames)

    def records(self) -> list:
        return [r for recs in self.frames.values() for r in recs]

    def at(self, frame: int) -> list:
        return self.frames.get(frame, [])

    def dontcare_at(self, frame: int) -> list:
        return self.dontcare.get(frame, [])

    @property
    def last_frame(self) -> int:
        keys = list(self.frames) + list(self.dontcare)
        return max(keys) if keys else -1


_FLOAT_FIELDS = ("truncated", "alpha", "left", "top", "right", "bottom", "height", "width",
                 "length", "x", "y", "z", "rotation_y")


def _num(token: str, name: str, line_no, kind=float):
    try:
        value = kind(token)
    except ValueError:
        raise KittiParseError(f"cannot parse {token!r} as {kind.__name__}", line_no, name) from None
    if kind is float and not math.isfinite(value):
        raise KittiParseError(f"non-finite value {token!r}", line_no, name)
    return value


def parse_line(line: str, expect_track_id: bool, line_no: int | None = None):
    """Parse one KITTI line into a :class:`DetectionRecord` or :class:`TrackletRecord`."""
    tokens = line.split()
    base = 17 if expect_track_id else 16
    if len(tokens) not in (base, base + 1):
        raise KittiParseError(f"expected {base} or {base + 1} fields, got {len(tokens)}", line_no, "field count")
    pos = 0
    frame = _num(tokens[pos], "frame", line_no, int)
    if frame < 0:
        raise KittiParseError(f"negative frame {frame}", line_no, "frame")
    pos += 1
    track_id = None
    if expect_track_id:
        track_id = _num(tokens[pos], "track_id", line_no, int)
        if track_id < -1:
            raise KittiParseError(f"invalid track id {track_id}", line_no, "track_id")
        pos += 1
    category = tokens[pos]
    pos += 1
    truncated = _num(tokens[pos], "truncated", line_no)
    occluded = _num(tokens[pos + 1], "occluded", line_no, int)
    alpha = _num(tokens[pos + 2], "alpha", line_no)
    vals = [_num(tokens[pos + 3 + i], _FLOAT_FIELDS[2 + i], line_no) for i in range(11)]
    score = None
    if len(tokens) == base + 1:
        score = _num(tokens[-1], "score", line_no)
    kwargs = dict(
        frame=frame, category=category, truncated=truncated, occluded=occluded, alpha=alpha,
        bbox2d=tuple(vals[0:4]), dims=tuple(vals[4:7]), center=tuple(vals[7:10]),
        rotation_y=vals[10], score=score,
    )
    try:
        if expect_track_id:
            return TrackletRecord(track_id=track_id, **kwargs)
        return DetectionRecord(**kwargs)
    except ValueError as exc:
        raise KittiParseError(str(exc), line_no, "record") from None


def parse_text(text: str, expect_track_id: bool, path: str | None = None) -> list:
    records = []
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            records.append(parse_line(stripped, expect_track_id, i))
        except KittiParseError as exc:
            exc.path = path
            raise
    return records


def _f(x: float) -> str:
    return repr(float(x))


def format_record(r: DetectionRecord, with_score: bool | None = None) -> str:
    fields = [str(r.frame)]
    if isinstance(r, TrackletRecord):
        fields.append(str(r.track_id))
    fields += [r.category, _f(r.truncated), str(r.occluded), _f(r.alpha)]
    fields += [_f(v) for v in r.bbox2d]
    fields += [_f(v) for v in r.dims]
    fields += [_f(v) for v in r.center]
    fields.append(_f(normalize_angle(r.rotation_y)))
    if with_score is None:
        with_score = r.score is not None
    if with_score:
        if r.score is None:
            raise ValueError(f"record in frame {r.frame} has no score")
        fields.append(format(float(r.score), ".17g"))
    return " ".join(fields)


def serialize_results(records: Seq[TrackletRecord]) -> str:
    """Render tracker output; every record must carry a score."""
    lines = []
    for r in records:
        if r.score is None:
            raise ValueError(f"result record (frame {r.frame}, id {getattr(r, 'track_id', '?')}) has no score")
        lines.append(format_record(r, with_score=True))
    return "".join(line + "\n" for line in lines)


def serialize_records(records: Seq[DetectionRecord]) -> str:
    return "".join(format_record(r) + "\n" for r in records)


def read_records(path, expect_track_id: bool) -> list:
    path = Path(path)
    return parse_text(path.read_text(), expect_track_id, str(path))


def load_sequence(label_path, detection_path, category_filter: str | None = "Car",
                  seq_id: int | None = None) -> tuple[Sequence, Sequence]:
    """Load ground truth and detections for one sequence, filtered to one category.

    DontCare ground truth is kept aside on ``Sequence.dontcare``.
    """
    label_path = Path(label_path)
    if seq_id is None:
        try:
            seq_id = int(label_path.stem)
        except ValueError:
            seq_id = 0
    gt = read_records(label_path, expect_track_id=True)
    det = read_records(detection_path, expect_track_id=False) if detection_path is not None else []

    def keep(r):
        return r.is_dontcare or category_filter is None or r.category == category_filter

    gt = [r for r in gt if keep(r)]
    det = [r for r in det if not r.is_dontcare and (category_filter is None or r.category == category_filter)]
    return Sequence.from_records(seq_id, gt), Sequence.from_records(seq_id, det)


def load_tracklets(path, category_filter: str | None = "Car", seq_id: int | None = None) -> Sequence:
    path = Path(path)
    if seq_id is None:
        seq_id = int(path.stem)
    recs = read_records(path, expect_track_id=True)
    recs = [r for r in recs if r.is_dontcare or category_filter is None or r.category == category_filter]
    return Sequence.from_records(seq_id, recs)


def load_detections(path, category_filter: str | None = "Car", seq_id: int | None = None) -> Sequence:
    path = Path(path)
    if seq_id is None:
        seq_id = int(path.stem)
    recs = [r for r in read_records(path, expect_track_id=False)
            if category_filter is None or r.category == category_filter]
    return Sequence.from_records(seq_id, recs)


def sequence_filename(seq_id: int) -> str:
    return f"{seq_id:04d}.txt"


def write_sequence(path, records: Seq[DetectionRecord]) -> None:
    Path(path).write_text(serialize_records(records))


def list_sequences(directory) -> list[int]:
    out = []
    for p in sorted(Path(directory).glob("*.txt")):
        try:
            out.append(int(p.stem))
        except ValueError:
            continue
    return out


def with_track_id(r: DetectionRecord, track_id: int, score: float | None = None) -> TrackletRecord:
    fields = {k: getattr(r, k) for k in DetectionRecord.__dataclass_fields__}
    if score is not None:
        fields["score"] = score
    return TrackletRecord(track_id=track_id, **fields)


def strip_track_id(r: TrackletRecord, score: float | None = None) -> DetectionRecord:
    fields = {k: getattr(r, k) for k in DetectionRecord.__dataclass_fields__}
    if score is not None:
        fields["score"] = score
    return DetectionRecord(**fields)


__all__ = [
    "DONTCARE", "DetectionRecord", "KittiParseError", "Sequence", "TrackletRecord",
    "format_record", "list_sequences", "load_detections", "load_sequence", "load_tracklets",
    "normalize_angle", "parse_line", "parse_text", "read_records", "replace", "sequence_filename",
    "serialize_records", "serialize_results", "strip_track_id", "with_track_id", "write_sequence",
]
