"""Command line entry point.

    trackcast synth    --config run.cfg --out data/
    trackcast train    --config run.cfg --out run/
    trackcast track    --config run.cfg --checkpoint run/model.json --out run/
    trackcast forecast --config run.cfg --checkpoint run/model.json --out run/
    trackcast evaluate --config run.cfg --out run/
    trackcast report   run/report.json

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericalError
from .config import ConfigError, RunConfig, load_config
from .kitti_io import KittiParseError, Sequence, list_sequences, read_records, sequence_filename, write_sequence
from .metrics import MetricError, MetricReport, evaluate_tracking, forecast_summary

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT = "model.json"
RESULTS_DIR = "results"
FORECAST_DIR = "forecasts"
FORECAST_HEADER = "frame agent_id sample_idx t x z"
PLOT_HEADER = "seq,frame,agent_id,kind,sample_idx,t,x,z"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trackcast", description="Joint 3D tracking and diverse trajectory forecasting")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(name, help, checkpoint=False):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", help="key = value configuration file")
        s.add_argument("--seed", type=int, help="overrides train.seed (and data.seed for synth)")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="configuration override")
        if checkpoint:
            s.add_argument("--checkpoint", help=f"model checkpoint (default: OUT/{CHECKPOINT})")
        return s

    s = common("synth", "write synthetic KITTI-format sequences")
    s.add_argument("--split", choices=("train", "eval"), default="eval")
    common("train", "two-stage training")
    common("track", "run tracking with parallel forecasting", checkpoint=True)
    common("forecast", "forecast from ground-truth histories", checkpoint=True)
    s = common("evaluate", "score tracking results and their forecasts")
    s.add_argument("--results", help="directory written by track (default: OUT)")
    s = sub.add_parser("report", help="print tables from report.json files")
    s.add_argument("reports", nargs="+")
    return p


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    if args.config is not None and not Path(args.config).is_file():
        raise DataError(f"config file {args.config!r} not found")
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg.train.seed = args.seed
        if args.command == "synth":
            cfg.data.seed = args.seed
    cfg.validate()
    return cfg


def _load_model(args):
    from .pipeline import Model

    path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / CHECKPOINT
    if not path.is_file():
        raise DataError(f"checkpoint {str(path)!r} not found")
    try:
        return Model.load(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from None


def _forecast_rows(entries) -> np.ndarray:
    """(frame, agent_id, TrajectorySet) triples -> rows of frame, agent_id, sample_idx, t, x, z."""
    blocks = []
    for frame, agent, ts in entries:
        K, T, _ = ts.trajectories.shape
        k, t = np.meshgrid(np.arange(K), np.arange(1, T + 1), indexing="ij")
        blocks.append(np.column_stack([np.full(K * T, frame), np.full(K * T, agent), k.ravel(), t.ravel(),
                                       ts.trajectories.reshape(-1, 2)]))
    return np.concatenate(blocks) if blocks else np.zeros((0, 6))


def _write_forecasts(path: Path, rows: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, rows, fmt=["%d", "%d", "%d", "%d", "%.17g", "%.17g"], header=FORECAST_HEADER)


def _read_forecasts(path: Path) -> dict[tuple[int, int], np.ndarray]:
    """(frame, agent_id) -> (K, T, 2)."""
    try:
        rows = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if rows.size == 0:
        return {}
    if rows.shape[1] != 6:
        raise DataError(f"{path}: expected 6 columns, found {rows.shape[1]}")
    out = {}
    keys = rows[:, :2].astype(int)
    for key in sorted(set(map(tuple, keys))):
        sel = rows[(keys[:, 0] == key[0]) & (keys[:, 1] == key[1])]
        K, T = int(sel[:, 2].max()) + 1, int(sel[:, 3].max())
        arr = np.full((K, T, 2), np.nan)
        arr[sel[:, 2].astype(int), sel[:, 3].astype(int) - 1] = sel[:, 4:]
        if np.isnan(arr).any():
            raise DataError(f"{path}: incomplete forecast for frame {key[0]}, agent {key[1]}")
        out[key] = arr
    return out


def _horizon_steps(cfg: RunConfig, dt: float = 0.1) -> dict[str, int]:
    return {f"{h:.1f}s": max(1, int(round(h / dt))) for h in cfg.horizons()}


def _gt_future(positions, gt_id: int, frame: int, T: int) -> np.ndarray:
    out = []
    for k in range(T):
        p = positions.get((gt_id, frame + k))
        if p is None:
            break
        out.append(p)
    return np.array(out).reshape(-1, 2)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> None:
    from .pipeline import synthetic_logs
    from .synth import export

    if cfg.data.path is not None:
        raise UsageError("synth generates data; unset data.path")
    paths = export(synthetic_logs(cfg, args.split), Path(args.out))
    print(f"wrote {len(paths)} files to {args.out}")


def cmd_train(args, cfg: RunConfig) -> None:
    from .pipeline import TrainLog, init_model, scenes_for, train

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = scenes_for(cfg, "train")
    model = init_model(cfg.model, cfg.train.seed)
    log = train(model, scenes, cfg.train, cfg.track, log=TrainLog(path=out / cfg.train.log))
    model.save(out / CHECKPOINT)
    (out / "config.txt").write_text(cfg.to_text())
    print(log.lines[-1] if log.lines else "no training steps")
    print(f"checkpoint: {out / CHECKPOINT}")


def cmd_track(args, cfg: RunConfig) -> None:
    from .pipeline import run_sequences, scenes_for

    model = _load_model(args)
    out = Path(args.out)
    scenes = scenes_for(cfg, "eval")
    results = run_sequences(model, scenes, cfg.track, cfg.train.seed, cfg.track.forecast, cfg.track.workers)
    (out / RESULTS_DIR).mkdir(parents=True, exist_ok=True)
    for res in results:
        write_sequence(out / RESULTS_DIR / sequence_filename(res.seq_id), res.records)
        if cfg.track.forecast:
            _write_forecasts(out / FORECAST_DIR / sequence_filename(res.seq_id), _forecast_rows(res.forecasts))
    totals = [t["total"] for r in results for t in r.timings]
    mean = float(np.mean(totals)) if totals else 0.0
    print(f"tracked {len(results)} sequences, {len(totals)} frames, mean latency {mean:.1f} ms/frame")


def cmd_forecast(args, cfg: RunConfig) -> None:
    from .pipeline import forecast_cases, sample_cases, scenes_for

    model = _load_model(args)
    out = Path(args.out)
    steps = _horizon_steps(cfg)
    entries = []
    for scene in scenes_for(cfg, "eval"):
        cases = forecast_cases(model, scene, cfg.track)
        sets = sample_cases(model, cases, cfg.track.mode, seed=cfg.train.seed + scene.seq_id)
        rows = _forecast_rows([(c.frame, c.gt_id, s) for c, s in zip(cases, sets)])
        _write_forecasts(out / "gt_forecasts" / sequence_filename(scene.seq_id), rows)
        entries += [(s.trajectories, c.future) for c, s in zip(cases, sets)]
    report = MetricReport(method=cfg.track.mode)
    report.forecasting = {h: forecast_summary(entries, n) for h, n in steps.items()}
    (out / "forecast_report.json").write_text(report.to_json())
    (out / "forecast_table2.txt").write_text(report.table2())
    print(report.table2(), end="")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    from .pipeline import scenes_for

    out = Path(args.out)
    run = Path(args.results) if args.results else out
    res_dir = run / RESULTS_DIR
    if not res_dir.is_dir():
        raise DataError(f"{res_dir} not found; run `trackcast track` first")
    scenes = scenes_for(cfg, "eval")
    have = set(list_sequences(res_dir))
    gt_seqs, pred_seqs = [], []
    for scene in scenes:
        if scene.seq_id not in have:
            raise DataError(f"no results for sequence {scene.seq_id} in {res_dir}")
        recs = read_records(res_dir / sequence_filename(scene.seq_id), expect_track_id=True)
        gt_seqs.append(scene.gt)
        pred_seqs.append(Sequence.from_records(scene.seq_id, recs))
    result = evaluate_tracking(gt_seqs, pred_seqs, cfg.eval.iou_min, cfg.eval.recall_levels)
    report = MetricReport.from_tracking(result, method=f"trackcast ({cfg.track.mode})")

    # forecasts of tracks, scored against the ground truth each track covered on its last observed frame
    steps = _horizon_steps(cfg)
    entries, plot = [], []
    for scene, pred, matches in zip(scenes, pred_seqs, result["frame_matches"]):
        positions = scene.gt_positions()
        owner = {(fm.frame, pid): gid for fm in matches for gid, pid, _ in fm.matches}
        fpath = run / FORECAST_DIR / sequence_filename(scene.seq_id)
        forecasts = _read_forecasts(fpath) if fpath.exists() else {}
        for (frame, tid), traj in forecasts.items():
            gid = owner.get((frame - 1, tid))
            if gid is not None:
                fut = _gt_future(positions, gid, frame, traj.shape[1])
                if len(fut):
                    entries.append((traj[:, :len(fut)], fut))
        plot += _plot_rows(scene, pred, forecasts)
    if entries:
        report.forecasting = {h: forecast_summary(entries, n) for h, n in steps.items()}

    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "table1.txt").write_text(report.table1())
    (out / "table2.txt").write_text(report.table2())
    (out / "plot_data.csv").write_text(PLOT_HEADER + "\n" + "".join(plot))
    print(report.table1(), end="")
    if entries:
        print(report.table2(), end="")


def _plot_rows(scene, pred: Sequence, forecasts) -> list[str]:
    rows = []
    for kind, seq in (("gt", scene.gt), ("track", pred)):
        for r in seq.records():
            rows.append((r.frame, r.track_id, kind, 0, 0, r.center[0], r.center[2]))
    for (frame, tid), traj in forecasts.items():
        for k in range(traj.shape[0]):
            for t in range(traj.shape[1]):
                rows.append((frame, tid, "forecast", k, t + 1, traj[k, t, 0], traj[k, t, 1]))
    rows.sort(key=lambda r: (r[0], ("gt", "track", "forecast").index(r[2]), r[1], r[3], r[4]))
    return [f"{scene.seq_id},{f},{a},{kind},{k},{t},{x!r},{z!r}\n" for f, a, kind, k, t, x, z in rows]


def cmd_report(args) -> None:
    for path in args.reports:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"{path} not found")
        try:
            report = MetricReport.from_json(p.read_text())
        except (ValueError, TypeError) as exc:
            raise DataError(f"{path}: not a report ({exc})") from None
        print(report.table1(), end="")
        if report.forecasting:
            print(report.table2(), end="")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "track": cmd_track, "forecast": cmd_forecast,
            "evaluate": cmd_evaluate}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "report":
            cmd_report(args)
        else:
            COMMANDS[args.command](args, _config(args))
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, KittiParseError, MetricError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
