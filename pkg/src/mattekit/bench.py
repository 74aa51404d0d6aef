"""Pass-through throughput harness: timing vs refinement budget.

Times only the model forward (no disk, no encode); a guard swaps out
`builtins.open` inside the timed region so any accidental file access fails
loudly instead of polluting the numbers.  Budgets are reported with their
refined-area fraction so rows are comparable across resolutions.
"""

from __future__ import annotations

import builtins
import contextlib
import statistics
import time
from dataclasses import dataclass

import numpy as np

from mattekit.model import MattingModel

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - dependency ships with the package
    threadpool_limits = None


@contextlib.contextmanager
def forbid_file_io():
    """Make any open() inside the block raise; timing must be pure compute."""
    real_open = builtins.open

    def guarded_open(*args, **kwargs):
        raise AssertionError("file I/O inside timed benchmark region")

    builtins.open = guarded_open
    try:
        yield
    finally:
        builtins.open = real_open


@contextlib.contextmanager
def pin_threads(n: int | None):
    """Limit BLAS/OpenMP pools for stable timings; no-op when n is None."""
    if n is None or threadpool_limits is None:
        yield
        return
    with threadpool_limits(limits=n):
        yield


@dataclass(frozen=True)
class BenchRow:
    height: int
    width: int
    c: int
    k_label: str           # requested budget: a number or "full"
    k: int                 # effective cells refined
    batch: int
    ms_per_frame: float    # median over repeats
    fps: float
    refined_fraction: float

    @property
    def resolution(self) -> str:
        return f"{self.height}x{self.width}"


@dataclass
class BenchResult:
    rows: list

    def to_csv(self) -> str:
        header = ("resolution,c,k,batch,ms_per_frame,fps,refined_fraction")
        lines = [header]
        for r in self.rows:
            lines.append(
                f"{r.resolution},{r.c},{r.k_label},{r.batch},"
                f"{r.ms_per_frame:.3f},{r.fps:.3f},{r.refined_fraction:.5f}"
            )
        return "\n".join(lines) + "\n"


def _parse_budget(k, cells: int) -> tuple[str, int]:
    if isinstance(k, str):
        if k != "full":
            raise ValueError(f"budget must be an integer or 'full', got {k!r}")
        return "full", cells
    k = int(k)
    if k < 0:
        raise ValueError("budget must be >= 0")
    return str(k), min(k, cells)


def run_bench(
    model: MattingModel,
    sizes: list[tuple[int, int]],
    budgets: list,
    repeats: int = 50,
    warmup: int = 3,
    batch: int = 1,
    seed: int = 0,
) -> BenchResult:
    """Median ms/frame for each (resolution, budget) pair, eval mode only."""
    if repeats < 1 or warmup < 0 or batch < 1:
        raise ValueError("repeats >= 1, warmup >= 0, batch >= 1 required")
    g = model.granule
    rows = []
    rng = np.random.default_rng(seed)
    for h, w in sizes:
        if h % g or w % g:
            raise ValueError(f"benchmark size {h}x{w} not divisible by {g}")
        img = rng.random((batch, 3, h, w)).astype(model.dtype)
        bgr = rng.random((batch, 3, h, w)).astype(model.dtype)
        cells = (h // 4) * (w // 4)
        for budget in budgets:
            label, k_eff = _parse_budget(budget, cells)
            for _ in range(warmup):
                model.forward(img, bgr, training=False, k=k_eff)
            samples = []
            for _ in range(repeats):
                with forbid_file_io():
                    t0 = time.perf_counter()
                    model.forward(img, bgr, training=False, k=k_eff)
                    samples.append(time.perf_counter() - t0)
            ms = statistics.median(samples) * 1000.0 / batch
            rows.append(BenchRow(
                height=h, width=w, c=model.config.refine.c,
                k_label=label, k=k_eff, batch=batch,
                ms_per_frame=ms, fps=1000.0 / ms,
                refined_fraction=16.0 * k_eff / (h * w),
            ))
    rows.sort(key=lambda r: (r.height, r.width, r.k, r.k_label == "full"))
    return BenchResult(rows=rows)
