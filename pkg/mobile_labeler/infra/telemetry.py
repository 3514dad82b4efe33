#!/usr/bin/env python3
"""
Telemetry System for Pipeline Stages
Logs stage latency, item throughput, error counts and memory
"""
import json
import logging
import statistics
import time
from collections import defaultdict
from datetime import datetime
from functools import wraps
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import psutil

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def setup_logging(level: Union[str, int] = "INFO", log_file: Optional[Union[str, Path]] = None):
    """Configure root logging once: console always, file when requested"""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def get_memory_usage() -> float:
    """Current resident memory in MB"""
    return psutil.Process().memory_info().rss / 1024 / 1024


class TelemetryCollector:
    def __init__(self):
        self.stages: Dict[str, List[Dict[str, Any]]] = defaultdict(list)
        self.errors: Dict[str, int] = defaultdict(int)

    def log_stage(self, stage: str, latency: float, items: int = 0, error: Optional[str] = None):
        """Record one stage execution"""
        record = {
            'timestamp': datetime.now().isoformat(),
            'latency_s': latency,
            'items': items,
            'memory_mb': get_memory_usage(),
            'error': error,
        }
        self.stages[stage].append(record)

        if error:
            self.errors[stage] += 1
            logger.warning(f"❌ {stage} failed after {latency:.3f}s - {error}")
        else:
            rate = f", {items / latency:.1f} items/s" if items and latency > 0 else ""
            logger.info(f"✅ {stage} - {latency:.3f}s{rate}")

    def get_latency_stats(self, stage: str) -> Optional[Dict[str, float]]:
        latencies = sorted(r['latency_s'] for r in self.stages.get(stage, []))
        if not latencies:
            return None

        return {
            'count': len(latencies),
            'mean': statistics.mean(latencies),
            'median': statistics.median(latencies),
            'p95': latencies[min(len(latencies) - 1, int(len(latencies) * 0.95))],
            'p99': latencies[min(len(latencies) - 1, int(len(latencies) * 0.99))],
            'min': latencies[0],
            'max': latencies[-1],
        }

    def generate_report(self) -> Dict[str, Any]:
        report = {'timestamp': datetime.now().isoformat(), 'stages': {}}
        for stage, records in self.stages.items():
            report['stages'][stage] = {
                'latency_stats': self.get_latency_stats(stage),
                'items': sum(r['items'] for r in records),
                'errors': self.errors.get(stage, 0),
                'peak_memory_mb': max(r['memory_mb'] for r in records),
            }
        return report

    def persist(self, path: Union[str, Path]):
        from mobile_labeler.utils.atomic_write import atomic_write_text

        atomic_write_text(path, json.dumps(self.generate_report(), indent=2))


def with_telemetry(stage: str, collector: TelemetryCollector, count_items=None):
    """Decorator recording latency of each call; count_items(result) gives the item count"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                collector.log_stage(stage, time.perf_counter() - start_time, error=str(e))
                raise
            items = count_items(result) if count_items else 0
            collector.log_stage(stage, time.perf_counter() - start_time, items=items)
            return result

        return wrapper
    return decorator
