"""GEMM latency harness for the LUT kernel."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .lut import LookupCounter, decompose_bitplanes, lut_gemm, mirror_transform, rearrange_tiles
from .quant import HlqParams, UniformQuant, uniform_as_hlq

CSV_HEADER = ["shape", "q", "format", "table_mode", "threads", "reps", "mean_s", "std_s", "lookups"]
MIN_REPS = 10


@dataclass
class BenchRow:
    shape: str
    q: int
    format: str
    table_mode: str
    threads: int
    reps: int
    mean_s: float
    std_s: float
    lookups: int

    def formatted_ms(self) -> str:
        return f"{self.mean_s * 1e3:.2f} (± {self.std_s * 1e3:.2f})"


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_HEADER)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(asdict(row))

    @classmethod
    def read_csv(cls, path) -> "BenchReport":
        with open(path, newline="") as fh:
            rows = [
                BenchRow(r["shape"], int(r["q"]), r["format"], r["table_mode"], int(r["threads"]),
                         int(r["reps"]), float(r["mean_s"]), float(r["std_s"]), int(r["lookups"]))
                for r in csv.DictReader(fh)
            ]
        return cls(rows)


def parse_shape(text: str) -> tuple[int, int]:
    """``"11008x4096"`` -> ``(n, k)`` (output channels x input channels)."""
    try:
        n, k = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"bad shape {text!r}; expected NxK") from exc
    if n < 1 or k < 1:
        raise ConfigError(f"bad shape {text!r}")
    return n, k


def random_model(n: int, k: int, q: int, g: int, fmt: str, rng: np.random.Generator):
    """Random packed weights and mirrored params in either storage format."""
    if fmt == "hlq":
        bits = rng.integers(0, 1 << q, size=(n, k), dtype=np.uint8)
        scales = np.sort(rng.uniform(0.001, 0.02, size=(n, k // g, q)), axis=-1)
        params = HlqParams(scales, rng.normal(0, 0.02, size=(n, k // g)), q, g)
    elif fmt == "uniform":
        w_int = rng.integers(0, 1 << q, size=(n, k))
        uq = UniformQuant(w_int, rng.uniform(0.001, 0.02, size=(n, k // g)).astype(np.float32),
                          rng.integers(0, 1 << q, size=(n, k // g)), q, g)
        params, bits = uniform_as_hlq(uq)
    else:
        raise ConfigError(f"unknown format {fmt!r}")
    packed = rearrange_tiles(decompose_bitplanes(bits, q), g)
    return packed, mirror_transform(params), bits, params


def bench_gemm(
    shapes,
    qs,
    table_mode: str = "float",
    threads: int = 1,
    reps: int = MIN_REPS,
    formats=("uniform", "hlq"),
    g: int = 128,
    batch: int = 1,
    seed: int = 0,
) -> BenchReport:
    if reps < MIN_REPS:
        raise ConfigError(f"reps must be >= {MIN_REPS}")
    report = BenchReport()
    for shape in shapes:
        n, k = parse_shape(shape) if isinstance(shape, str) else shape
        label = f"{n}x{k}"
        gg = min(g, k)
        for q in qs:
            for fmt in formats:
                rng = np.random.default_rng(seed)
                packed, mp, _, _ = random_model(n, k, q, gg, fmt, rng)
                x = rng.standard_normal((batch, k)).astype(np.float32)
                lut_gemm(packed, mp, x, table_mode, threads=threads)  # warm-up
                times = []
                lookups = 0
                for _ in range(reps):
                    counter = LookupCounter()
                    t0 = time.perf_counter()
                    lut_gemm(packed, mp, x, table_mode, counter=counter, threads=threads)
                    times.append(time.perf_counter() - t0)
                    lookups = counter.count
                times = np.asarray(times)
                report.rows.append(BenchRow(label, q, fmt, table_mode, threads, reps,
                                            float(times.mean()), float(times.std(ddof=1)), lookups))
    return report
