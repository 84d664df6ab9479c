from __future__ import annotations

import logging
import os
from typing import Union

from prometheus_client import CollectorRegistry
from prometheus_client import Counter
from prometheus_client import Gauge
from prometheus_client import write_to_textfile

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


class TrainingTelemetry:
    """Prometheus counters and gauges of one fitting run.

    Each instance owns its registry, so concurrent runs in one process do not share
    series.
    """

    def __init__(self, namespace: str = "gsplat_fit"):
        self.registry = CollectorRegistry()
        self.iterations = Counter(
            "iterations", "Optimization iterations run", namespace=namespace, registry=self.registry
        )
        self.densify_ops = Counter(
            "densify_operations",
            "Density control operations by kind",
            ["op"],
            namespace=namespace,
            registry=self.registry,
        )
        self.loss = Gauge("loss", "Latest total loss", namespace=namespace, registry=self.registry)
        self.psnr = Gauge("psnr_db", "Latest training PSNR", namespace=namespace, registry=self.registry)
        self.gaussians = Gauge(
            "gaussians", "Current number of Gaussians", namespace=namespace, registry=self.registry
        )

    def observe_iteration(self, loss: float, psnr: float, n_gaussians: int) -> None:
        self.iterations.inc()
        self.loss.set(loss)
        self.psnr.set(psnr)
        self.gaussians.set(n_gaussians)

    def observe_densify(self, n_split: int, n_clone: int, n_prune: int, n_gds_blocked: int) -> None:
        for op, count in (
            ("split", n_split),
            ("clone", n_clone),
            ("prune", n_prune),
            ("gds_blocked", n_gds_blocked),
        ):
            self.densify_ops.labels(op=op).inc(count)

    def value(self, name: str, **labels) -> float:
        """Current sample value, e.g. ``value("gsplat_fit_densify_operations_total", op="split")``."""
        result = self.registry.get_sample_value(name, labels or None)
        return 0.0 if result is None else float(result)

    def write(self, path: PathLike) -> None:
        directory = os.path.dirname(os.fspath(path))
        if directory:
            os.makedirs(directory, exist_ok=True)
        write_to_textfile(os.fspath(path), self.registry)
        logger.info("Wrote training metrics to %s", path)
