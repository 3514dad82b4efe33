#!/usr/bin/env python3
"""
PP Score Performance Benchmark
Times pp_score for a 100k-point query scan against 5 dense clouds of 1M points each,
single-threaded and with 4 worker threads, and records the speedup
"""

import argparse
import json
import statistics
import time
from datetime import datetime
from pathlib import Path

import numpy as np
import psutil

from mobile_labeler.core.ephemerality import DenseCloud, pp_score
from mobile_labeler.ingest.lidar_io import Pose, Scan
from mobile_labeler.utils.atomic_write import atomic_write_text
from mobile_labeler.utils.spatial_index import build

QUERY_POINTS = 100_000
CLOUD_POINTS = 1_000_000
N_CLOUDS = 5
RADIUS = 0.3
EXTENT = (80.0, 30.0, 6.0)
TIME_LIMIT_S = 10.0
MIN_SPEEDUP = 3.0


class PPScoreBenchmark:
    def __init__(self, seed: int = 0, iterations: int = 3):
        self.rng = np.random.default_rng(seed)
        self.iterations = iterations
        self.results = []

    def get_system_info(self):
        return {
            "timestamp": datetime.now().isoformat(),
            "ram_total_gb": psutil.virtual_memory().total / (1024 ** 3),
            "ram_available_gb": psutil.virtual_memory().available / (1024 ** 3),
            "cpu_count": psutil.cpu_count(),
        }

    def _uniform(self, n: int) -> np.ndarray:
        return self.rng.uniform(0.0, 1.0, (n, 3)) * EXTENT

    def build_inputs(self):
        print(f"🏗️ Building {N_CLOUDS} dense clouds of {CLOUD_POINTS:,} points...")
        start_time = time.time()
        clouds = []
        for t in range(N_CLOUDS):
            points = self._uniform(CLOUD_POINTS)
            clouds.append(DenseCloud(f"t{t}", points, build(points, RADIUS)))
        print(f"  Built in {time.time() - start_time:.1f}s")

        points = np.hstack([self._uniform(QUERY_POINTS), np.zeros((QUERY_POINTS, 1))])
        query = Scan("bench_000", points, Pose.identity(), "t0")
        return query, clouds

    def time_pp_score(self, query, clouds, threads: int):
        print(f"🧪 pp_score with {threads} thread(s)...")
        durations = []
        for i in range(self.iterations):
            start_time = time.perf_counter()
            field = pp_score(query, clouds, RADIUS, max_workers=threads)
            duration = time.perf_counter() - start_time
            durations.append(duration)
            print(f"  Iteration {i + 1}: {duration:.2f}s, mean tau {field.tau.mean():.3f}")
        return {
            "threads": threads,
            "durations_s": durations,
            "median_s": statistics.median(durations),
            "points_per_sec": QUERY_POINTS / statistics.median(durations),
        }

    def run(self):
        print("🚀 Starting PP score benchmark")
        print("=" * 50)
        query, clouds = self.build_inputs()
        for threads in (1, 4):
            self.results.append(self.time_pp_score(query, clouds, threads))

        single, parallel = self.results[0]["median_s"], self.results[1]["median_s"]
        speedup = single / parallel if parallel > 0 else 0.0
        return {
            "system_info": self.get_system_info(),
            "query_points": QUERY_POINTS,
            "cloud_points": CLOUD_POINTS,
            "clouds": N_CLOUDS,
            "radius": RADIUS,
            "results": self.results,
            "speedup_4_threads": speedup,
            "single_thread_ok": single < TIME_LIMIT_S,
            "scaling_ok": speedup >= MIN_SPEEDUP,
        }

    def save_results(self, report, filename=None):
        if not filename:
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            filename = Path(__file__).parent / f"pp_benchmark_{timestamp}.json"
        atomic_write_text(filename, json.dumps(report, indent=2))
        print(f"💾 Results saved to: {filename}")
        return filename


def main():
    parser = argparse.ArgumentParser(description="pp_score performance floor")
    parser.add_argument("--iterations", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="JSON report path")
    args = parser.parse_args()

    benchmark = PPScoreBenchmark(seed=args.seed, iterations=args.iterations)
    report = benchmark.run()
    benchmark.save_results(report, args.out)

    print("\n📊 BENCHMARK SUMMARY")
    print("=" * 50)
    for result in report["results"]:
        print(f"{result['threads']} thread(s) | {result['median_s']:6.2f}s | {result['points_per_sec']:,.0f} pts/s")
    status = "✅" if report["single_thread_ok"] else "❌"
    print(f"{status} single thread under {TIME_LIMIT_S:.0f}s")
    status = "✅" if report["scaling_ok"] else "⚠️"
    print(f"{status} 4-thread speedup {report['speedup_4_threads']:.2f}x (target {MIN_SPEEDUP:.0f}x)")


if __name__ == "__main__":
    main()
