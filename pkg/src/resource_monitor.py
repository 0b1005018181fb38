"""Resource monitoring for long sweeps."""
from __future__ import annotations

import csv
import json
import statistics
import threading
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from threading import Event
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import psutil

from .logger import get_logger

UpdateCallback = Callable[[float, float, float], None]
AlertCallback = Callable[[str, float], None]

METRICS = ("cpu", "ram", "rss")


def current_rss() -> int:
    """Resident set size of this process in bytes."""

    return int(psutil.Process().memory_info().rss)


class ResourceMonitor:
    """Samples process CPU, system RAM and process RSS (MiB) at a fixed interval."""

    def __init__(
        self,
        interval: float,
        stop_event: Event,
        pause_event: Optional[Event] = None,
        *,
        update_callback: Optional[UpdateCallback] = None,
        log_path: Optional[str | Path] = None,
        alert_thresholds: Optional[Dict[str, float]] = None,
        alert_callback: Optional[AlertCallback] = None,
        alert_cooldown: float = 60.0,
        summary_path: Optional[str | Path] = None,
        trend_window: float = 60.0,
    ) -> None:
        self.interval = max(0.01, float(interval))
        self.stop_event = stop_event
        self.pause_event = pause_event or Event()
        self.update_callback = update_callback
        self.log_path = Path(log_path).expanduser() if log_path else None
        self.alert_thresholds = {
            key.lower(): float(value)
            for key, value in (alert_thresholds or {}).items()
            if value is not None
        }
        self.alert_callback = alert_callback
        self.alert_cooldown = max(0.0, float(alert_cooldown))
        self._last_alerts: Dict[str, float] = {}
        self.summary_path = Path(summary_path).expanduser() if summary_path else None
        self.trend_window = max(0.01, float(trend_window))
        self.samples: List[Dict[str, float]] = []
        self.sample_times: List[float] = []
        self.summary_data: Optional[Dict[str, Dict[str, float]]] = None
        self.summary_text: Optional[str] = None
        self.alert_history: List[Tuple[str, str, float]] = []
        self._process = psutil.Process()
        self._logger = get_logger("monitor")

    def sample(self) -> Dict[str, float]:
        return {
            "cpu": float(self._process.cpu_percent(interval=None)),
            "ram": float(psutil.virtual_memory().percent),
            "rss": self._process.memory_info().rss / (1024 * 1024),
        }

    def run(self) -> None:
        csv_file = None
        writer = None
        if self.log_path is not None:
            try:
                self.log_path.parent.mkdir(parents=True, exist_ok=True)
                csv_file = self.log_path.open("w", newline="", encoding="utf-8")
                writer = csv.writer(csv_file)
                writer.writerow(["timestamp", *METRICS])
            except OSError as exc:
                self._logger.error("Cannot open resource log %s: %s", self.log_path, exc)
                csv_file = None
                writer = None

        # The first cpu_percent call of a process always reports 0.0
        self._process.cpu_percent(interval=None)

        try:
            while not self.stop_event.is_set():
                if self.pause_event.is_set():
                    time.sleep(self.interval)
                    continue

                values = self.sample()
                self.samples.append(values)
                self.sample_times.append(time.monotonic())

                if writer is not None and csv_file is not None:
                    timestamp = datetime.now(timezone.utc).isoformat()
                    writer.writerow([timestamp, *(f"{values[key]:.2f}" for key in METRICS)])
                    csv_file.flush()

                if self.update_callback is not None:
                    self.update_callback(values["cpu"], values["ram"], values["rss"])
                self._check_alerts(values)

                self.stop_event.wait(self.interval)
        finally:
            if csv_file is not None:
                csv_file.close()
            self._finalise_summary()

    def _finalise_summary(self) -> None:
        if not self.samples:
            return

        summary: Dict[str, Dict[str, float]] = {}
        trend_summary: Dict[str, float] = {}
        cutoff = self.sample_times[-1] - self.trend_window
        for metric in METRICS:
            values = [sample[metric] for sample in self.samples]
            summary[metric] = {
                "average": statistics.fmean(values),
                "maximum": max(values),
                "minimum": min(values),
            }
            window = [
                sample[metric]
                for sample, stamp in zip(self.samples, self.sample_times)
                if stamp >= cutoff
            ]
            trend_summary[metric] = window[-1] - window[0]

        self.summary_data = summary
        lines = ["Resource Summary:"]
        for metric, stats in summary.items():
            unit = " MiB" if metric == "rss" else "%"
            lines.append(
                f"- {metric.upper()}: avg {stats['average']:.1f}{unit} | "
                f"max {stats['maximum']:.1f}{unit} | min {stats['minimum']:.1f}{unit}"
            )
        if self.alert_history:
            lines.append(f"- Alerts triggered: {len(self.alert_history)}")
        else:
            lines.append("- Alerts triggered: none")
        self.summary_text = "\n".join(lines)

        if self.summary_path is not None:
            try:
                self.summary_path.parent.mkdir(parents=True, exist_ok=True)
                with self.summary_path.open("w", encoding="utf-8") as handle:
                    json.dump(
                        {
                            "generated": datetime.now(timezone.utc).isoformat(),
                            "interval": self.interval,
                            "samples": len(self.samples),
                            "metrics": summary,
                            "trend": trend_summary,
                            "alerts": [
                                {"timestamp": stamp, "metric": metric, "value": value}
                                for stamp, metric, value in self.alert_history
                            ],
                            "alerts_triggered": len(self.alert_history),
                        },
                        handle,
                        indent=2,
                    )
            except OSError as exc:  # pragma: no cover - best effort
                self._logger.error("Failed to write resource summary: %s", exc)

    def _check_alerts(self, values: Dict[str, float]) -> None:
        if not self.alert_thresholds or not self.alert_callback:
            return

        now = time.monotonic()
        for key, threshold in self.alert_thresholds.items():
            value = values.get(key)
            if value is None or value < threshold:
                continue
            last = self._last_alerts.get(key)
            if last is not None and (now - last) < self.alert_cooldown:
                continue
            self._last_alerts[key] = now
            timestamp = datetime.now(timezone.utc).isoformat()
            self.alert_history.append((timestamp, key.upper(), float(value)))
            try:
                self.alert_callback(key, value)
            except Exception:
                # Alerts should never break monitoring
                pass


@contextmanager
def monitoring(
    interval: float,
    *,
    log_path: Optional[str] = None,
    summary_path: Optional[str] = None,
    alert_thresholds: Optional[Dict[str, float]] = None,
    alert_cooldown: float = 60.0,
) -> Iterator[Optional[ResourceMonitor]]:
    """Run a :class:`ResourceMonitor` thread for the duration of the block.

    Nothing is started when neither a log nor a summary path is configured.
    """

    if log_path is None and summary_path is None:
        yield None
        return

    logger = get_logger("monitor")

    def handle_alert(metric: str, value: float) -> None:
        logger.warning("Resource alert: %s reached %.1f", metric.upper(), value)

    stop_event = Event()
    monitor = ResourceMonitor(
        interval,
        stop_event,
        log_path=log_path,
        summary_path=summary_path,
        alert_thresholds=alert_thresholds,
        alert_callback=handle_alert,
        alert_cooldown=alert_cooldown,
    )
    thread = threading.Thread(target=monitor.run, daemon=True)
    thread.start()
    try:
        yield monitor
    finally:
        stop_event.set()
        thread.join(timeout=max(2.0, 2 * monitor.interval))
        if monitor.summary_text:
            logger.info("%s", monitor.summary_text)
