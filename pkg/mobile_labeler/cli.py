#!/usr/bin/env python3
"""
mobile-labeler command line
One binary, one subcommand per pipeline stage:

    sim -> ppscore -> seed -> selftrain -> eval, plus plotdata for figures

Exit codes: 0 success, 1 configuration error, 2 data error, 3 internal error.
"""

import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from functools import wraps
from pathlib import Path
from typing import Optional

import click
import numpy as np
import pandas as pd
from dotenv import load_dotenv

from mobile_labeler.config import PipelineConfig, load_config
from mobile_labeler.core.detector import make_detector
from mobile_labeler.core.ephemerality import DenseCloudCache, compute_pp_fields, load_pp_fields, write_pp_fields
from mobile_labeler.core.evaluate import evaluate_detections, table
from mobile_labeler.core.seed_labels import generate_seed_labels
from mobile_labeler.core.self_train import self_train_loop
from mobile_labeler.errors import DataError, PipelineError
from mobile_labeler.infra.telemetry import TelemetryCollector, setup_logging, with_telemetry
from mobile_labeler.ingest.lidar_io import load_dataset, read_labels, write_labels
from mobile_labeler.sim.simgen import PRESETS, make_benchmark, simulate, write_sim_output
from mobile_labeler.utils.atomic_write import atomic_open, atomic_write_text
from mobile_labeler.utils.box_geometry import points_in_box
from mobile_labeler.utils.parallel_execution import run_parallel, set_default_workers

logger = logging.getLogger("mobile_labeler")

HISTOGRAM_BINS = 20


@dataclass
class AppContext:
    config: PipelineConfig
    telemetry: TelemetryCollector
    telemetry_path: Optional[Path]


def guarded(func):
    """Map pipeline errors to exit codes; anything unexpected is an internal error"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except PipelineError as e:
            logger.error(f"❌ {e}")
            sys.exit(e.exit_code)
        except (click.ClickException, click.exceptions.Exit, SystemExit):
            raise
        except Exception as e:
            logger.exception(f"❌ Internal error: {e}")
            sys.exit(3)

    return wrapper


def _write_csv(path: Path, frame: pd.DataFrame):
    with atomic_open(path, "w") as f:
        frame.to_csv(f, index=False)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="PipelineConfig JSON")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker pool size (default: all cores)")
@click.option("--log-level", default=None, type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.option("--telemetry", "telemetry_path", type=click.Path(dir_okay=False), default=None, help="Write stage telemetry JSON")
@click.pass_context
@guarded
def cli(ctx, config_path, threads, log_level, telemetry_path):
    """Mobile-object label discovery from multi-traversal LiDAR"""
    load_dotenv()
    setup_logging((log_level or os.environ.get("MOBILE_LABELER_LOG_LEVEL", "INFO")).upper())

    config = load_config(config_path).with_overrides({"threads": threads})
    set_default_workers(config.threads)

    app = AppContext(config, TelemetryCollector(), Path(telemetry_path) if telemetry_path else None)
    ctx.obj = app

    def report():
        summary = app.telemetry.generate_report()
        for stage, stats in summary["stages"].items():
            latency = stats["latency_stats"] or {}
            logger.info(f"📊 {stage}: {latency.get('count', 0)} call(s), {latency.get('mean', 0.0):.2f}s mean, "
                        f"peak {stats['peak_memory_mb']:.0f} MB")
        if app.telemetry_path:
            app.telemetry.persist(app.telemetry_path)

    ctx.call_on_close(report)


# ---------------------------------------------------------------- sim

@cli.command()
@click.option("--preset", type=click.Choice(PRESETS), required=True)
@click.option("--seed", type=int, default=None, help="World seed (default: config seed)")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_obj
@guarded
def sim(app: AppContext, preset, seed, out):
    """Generate a synthetic multi-traversal dataset with ground truth"""
    spec = make_benchmark(preset, app.config.seed if seed is None else seed)
    output = with_telemetry("simulate", app.telemetry, count_items=lambda o: len(o.scans))(simulate)(spec)
    write_sim_output(output, out)


# ---------------------------------------------------------------- ppscore

@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Sidecar directory (default: DATA/pp)")
@click.option("--max-traversals", type=click.IntRange(min=2), default=None)
@click.pass_obj
@guarded
def ppscore(app: AppContext, data, out, max_traversals):
    """Per-point PP score sidecars for every multi-traversal scan"""
    config = app.config.with_overrides({"ephemerality.max_traversals": max_traversals})
    dataset = load_dataset(data)
    compute = with_telemetry("ppscore", app.telemetry, count_items=len)(compute_pp_fields)
    fields = compute(dataset, config.ephemerality, DenseCloudCache())
    write_pp_fields(Path(out) if out else Path(data) / "pp", fields, config.ephemerality.r)


# ---------------------------------------------------------------- seed

@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--pp", "pp_dir", type=click.Path(file_okay=False), default=None, help="PPF directory (default: DATA/pp)")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Default: DATA/seed/labels.jsonl")
@click.option("--no-pp", is_flag=True, help="Euclidean clustering without PP scores")
@click.option("--alpha", type=float, default=None)
@click.option("--gamma", type=float, default=None)
@click.option("--k", type=int, default=None)
@click.option("--rprime", type=float, default=None)
@click.option("--eps", type=float, default=None)
@click.option("--min-samples", type=int, default=None)
@click.pass_obj
@guarded
def seed(app: AppContext, data, pp_dir, out, no_pp, alpha, gamma, k, rprime, eps, min_samples):
    """Seed labels: PP graph, DBSCAN, cluster and common-sense filters"""
    config = app.config.with_overrides(
        {
            "filters.alpha": alpha,
            "filters.gamma": gamma,
            "graph.k": k,
            "graph.r_prime": rprime,
            "dbscan.eps": eps,
            "dbscan.min_samples": min_samples,
            "seed_labels.use_pp": False if no_pp else None,
        }
    )
    dataset = load_dataset(data)
    fields = {}
    if config.seed_labels.use_pp:
        fields = load_pp_fields(Path(pp_dir) if pp_dir else Path(data) / "pp", dataset)

    def label_scan(scan):
        return generate_seed_labels(scan, fields.get(scan.scan_id), config)

    start_time = time.perf_counter()
    labels = run_parallel(label_scan, dataset.scans, description="seed labels")
    app.telemetry.log_stage("seed", time.perf_counter() - start_time, items=len(labels))

    out_path = Path(out) if out else Path(data) / "seed" / "labels.jsonl"
    write_labels(out_path, labels)
    logger.info(f"✅ {sum(len(ls) for ls in labels)} seed boxes over {len(labels)} frames -> {out_path}")


# ---------------------------------------------------------------- selftrain

@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--seed-labels", "seed_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--pp", "pp_dir", type=click.Path(file_okay=False), default=None, help="PPF directory (default: DATA/pp)")
@click.option("--rounds", type=click.IntRange(min=0), default=None)
@click.option("--no-pp-filter", is_flag=True, help="Keep every detection as a pseudo-label")
@click.option("--detector", "detector_name", type=click.Choice(["baseline"]), default="baseline")
@click.option("--seed-fraction", type=click.FloatRange(0.0, 1.0), default=None)
@click.option("--truth", type=click.Path(exists=True, dir_okay=False), default=None, help="Ground truth for per-round metrics")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_obj
@guarded
def selftrain(app: AppContext, data, seed_path, pp_dir, rounds, no_pp_filter, detector_name, seed_fraction, truth, out):
    """Iterate detector training on PP-filtered pseudo-labels"""
    config = app.config.with_overrides(
        {
            "self_training.rounds": rounds,
            "self_training.pp_filter": False if no_pp_filter else None,
            "self_training.seed_fraction": seed_fraction,
            "detector.name": detector_name,
        }
    )
    dataset = load_dataset(data)
    seed_labels = read_labels(seed_path)
    fields = {}
    if config.self_training.pp_filter:
        fields = load_pp_fields(Path(pp_dir) if pp_dir else Path(data) / "pp", dataset)
    ground_truth = {ls.frame_id: ls for ls in read_labels(truth)} if truth else None

    detector = make_detector(config.detector.name, config.detector, config.ground)
    loop = with_telemetry("selftrain", app.telemetry, count_items=lambda s: s.round_index)(self_train_loop)
    state = loop(
        dataset.scans,
        seed_labels,
        detector,
        config.self_training.rounds,
        config,
        ppfields=fields,
        ground_truth=ground_truth,
        out_dir=out,
    )
    write_labels(Path(out) / "labels.jsonl", state.labels)


# ---------------------------------------------------------------- eval

@cli.command(name="eval")
@click.option("--labels", "labels_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--truth", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--mode", type=click.Choice(["bev", "3d"]), default=None)
@click.option("--iou", type=click.Choice(["0.25", "0.5"]), default=None)
@click.option("--table", "as_table", is_flag=True, help="AP for BEV/3D x IoU 0.25/0.5 x every bucket")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_obj
@guarded
def evaluate(app: AppContext, labels_path, truth, mode, iou, as_table, out):
    """Metrics JSON and PR curve for a label or detection file"""
    config = app.config.with_overrides({"eval.mode": mode, "eval.iou_threshold": float(iou) if iou else None})
    labels = read_labels(labels_path)
    truth_labels = read_labels(truth)

    report = with_telemetry("eval", app.telemetry)(evaluate_detections)(labels, truth_labels, config.eval)
    metrics = {key: report[key] for key in ("mode", "iou", "scored", "buckets")}
    if as_table:
        metrics["table"] = table(labels, truth_labels, config.eval)

    out_dir = Path(out)
    atomic_write_text(out_dir / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True))
    _write_csv(out_dir / "pr_curve.csv", report["pr_curve"])
    for name, stats in metrics["buckets"].items():
        logger.info(f"📈 {name} m: " + ", ".join(f"{k}={v:.3f}" for k, v in stats.items() if v is not None))


# ---------------------------------------------------------------- plotdata

def pp_histogram(dataset, fields) -> pd.DataFrame:
    """20-bin PP score histogram split by points inside / outside ground-truth mobile boxes"""
    inside_tau, outside_tau = [], []
    for scan in dataset.scans:
        field = fields.get(scan.scan_id)
        truth = dataset.ground_truth.get(scan.scan_id)
        if field is None or truth is None:
            continue
        inside = np.zeros(len(scan), dtype=bool)
        for box in truth.boxes:
            inside |= points_in_box(scan.xyz, box)
        inside_tau.append(field.tau[inside])
        outside_tau.append(field.tau[~inside])
    if not inside_tau:
        raise DataError("no scan has both a PP field and ground truth")

    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    inside_tau, outside_tau = np.concatenate(inside_tau), np.concatenate(outside_tau)
    inside_count, _ = np.histogram(inside_tau, bins=edges)
    outside_count, _ = np.histogram(outside_tau, bins=edges)
    width = edges[1] - edges[0]
    return pd.DataFrame(
        {
            "bin_lo": edges[:-1],
            "bin_hi": edges[1:],
            "inside_count": inside_count,
            "outside_count": outside_count,
            "inside_density": inside_count / max(inside_count.sum(), 1) / width,
            "outside_density": outside_count / max(outside_count.sum(), 1) / width,
        }
    )


def round_curves(selftrain_dir: Path) -> pd.DataFrame:
    rows = []
    round_dirs = sorted(selftrain_dir.glob("round_*"), key=lambda p: int(p.name.split("_")[1]))
    for round_dir in round_dirs:
        with open(round_dir / "metrics.json", "r") as f:
            metrics = json.load(f)
        for bucket, stats in (metrics.get("labels") or {}).items():
            unfiltered = (metrics.get("unfiltered") or {}).get(bucket, {})
            rows.append(
                {
                    "round": metrics["round"],
                    "bucket": bucket,
                    "boxes": metrics["boxes"],
                    "precision": stats["precision"],
                    "recall": stats["recall"],
                    "unfiltered_precision": unfiltered.get("precision"),
                    "unfiltered_recall": unfiltered.get("recall"),
                }
            )
    if not rows:
        raise DataError(f"{selftrain_dir}: no round metrics with ground truth")
    return pd.DataFrame(rows)


@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--pp", "pp_dir", type=click.Path(file_okay=False), default=None, help="PPF directory (default: DATA/pp)")
@click.option("--selftrain", "selftrain_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_obj
@guarded
def plotdata(app: AppContext, data, pp_dir, selftrain_dir, out):
    """CSV data for the PP histogram and per-round label quality curves"""
    dataset = load_dataset(data)
    fields = load_pp_fields(Path(pp_dir) if pp_dir else Path(data) / "pp", dataset)
    out_dir = Path(out)
    _write_csv(out_dir / "pp_histogram.csv", pp_histogram(dataset, fields))
    if selftrain_dir:
        _write_csv(out_dir / "round_curves.csv", round_curves(Path(selftrain_dir)))
    logger.info(f"✅ Plot data written to {out_dir}")


def main():
    cli(prog_name="mobile-labeler")


if __name__ == "__main__":
    main()
