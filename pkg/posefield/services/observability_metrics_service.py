from __future__ import annotations

import re
from collections import defaultdict
from threading import Lock

METRIC_PREFIX = "posefield"


class ObservabilityMetricsService:
    """In-process counters and latency aggregates per (component, operation)."""

    def __init__(self) -> None:
        self._lock = Lock()
        self._counters: dict[str, int] = defaultdict(int)
        self._latency: dict[str, dict[str, float]] = {}

    @staticmethod
    def _metric_name(*parts: str) -> str:
        name = re.sub(r"\W", "_", "_".join(part for part in parts if part))
        return name if name and not name[0].isdigit() else f"m_{name}"

    def record(self, *, component: str, operation: str, success: bool, latency_ms: float, items: int = 0) -> None:
        key = f"{component}.{operation}"
        with self._lock:
            self._counters[f"{key}.total"] += 1
            self._counters[f"{key}.{'success' if success else 'failed'}"] += 1
            if items:
                self._counters[f"{key}.items"] += int(items)
            stats = self._latency.setdefault(key, {"count": 0, "sum_ms": 0.0, "max_ms": 0.0})
            stats["count"] += 1
            stats["sum_ms"] += float(latency_ms)
            stats["max_ms"] = max(stats["max_ms"], float(latency_ms))

    def increment(self, metric_name: str, value: int = 1) -> None:
        with self._lock:
            self._counters[metric_name] += int(value)

    def reset(self) -> None:
        with self._lock:
            self._counters.clear()
            self._latency.clear()

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "counters": dict(sorted(self._counters.items())),
                "latency": {
                    key: {
                        "count": int(stats["count"]),
                        "avg_ms": stats["sum_ms"] / stats["count"] if stats["count"] else 0.0,
                        "max_ms": stats["max_ms"],
                    }
                    for key, stats in sorted(self._latency.items())
                },
            }

    def to_prometheus(self) -> str:
        snapshot = self.snapshot()
        lines = [
            f"# HELP {METRIC_PREFIX}_up Metrics exporter availability",
            f"# TYPE {METRIC_PREFIX}_up gauge",
            f"{METRIC_PREFIX}_up 1",
        ]
        for name, value in snapshot["counters"].items():
            metric = self._metric_name(METRIC_PREFIX, name)
            lines.append(f"# TYPE {metric} counter")
            lines.append(f"{metric} {value}")
        for key, stats in snapshot["latency"].items():
            base = self._metric_name(METRIC_PREFIX, key, "latency_ms")
            lines.append(f"# TYPE {base}_count counter")
            lines.append(f"{base}_count {stats['count']}")
            lines.append(f"# TYPE {base}_avg gauge")
            lines.append(f"{base}_avg {stats['avg_ms']:.6f}")
            lines.append(f"# TYPE {base}_max gauge")
            lines.append(f"{base}_max {stats['max_ms']:.6f}")
        return "\n".join(lines) + "\n"


observability_metrics_service = ObservabilityMetricsService()
