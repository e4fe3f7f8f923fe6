"""Source-only vs blend-only vs full-pipeline comparison on the synthetic vehicle -> drone task."""

from __future__ import annotations

import dataclasses
import logging
import multiprocessing as mp
import os
import statistics
import time
from dataclasses import dataclass, field

from ..train import TrainConfig, train
from .dataset import SampleSet, synth_sample_set

log = logging.getLogger(__name__)

VARIANTS = {
    "source": dict(blend=False, lam=0.0, phi1=0.0, phi2=0.0),
    "blend": dict(lam=0.0, phi1=0.0, phi2=0.0),
    "full": dict(),
}

# seed offsets keep the three sample pools disjoint
_VAL_SEED0 = 10_000_000


@dataclass
class TrendData:
    source: SampleSet
    target: SampleSet
    target_val: SampleSet


@dataclass
class TrendResult:
    miou: dict  # variant -> list of target mIoU (fractions), one per seed
    seeds: list
    seconds: float
    data_seconds: float
    runs: dict = field(default_factory=dict)  # (variant, seed) -> full train() record without state

    def median(self, variant: str) -> float:
        return statistics.median(self.miou[variant])

    @property
    def ordered(self) -> bool:
        return self.median("full") > self.median("blend") > self.median("source")

    @property
    def margin(self) -> float:
        """Full-pipeline minus source-only median, in mIoU points."""
        return 100.0 * (self.median("full") - self.median("source"))


def make_trend_data(n_train=2000, n_val=400, height=90, width=160, bins=20, duration=5_000_000, jobs=1) -> TrendData:
    kw = dict(height=height, width=width, bins=bins, duration=duration, jobs=jobs)
    return TrendData(
        source=synth_sample_set("vehicle", range(n_train), **kw),
        target=synth_sample_set("drone", range(n_train), **kw),
        target_val=synth_sample_set("drone", range(_VAL_SEED0, _VAL_SEED0 + n_val), **kw),
    )


def variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    return dataclasses.replace(base, seed=seed, **VARIANTS[variant])


_DATA: TrendData | None = None


def _worker_init():
    import torch

    torch.set_num_threads(1)


def _run_one(job):
    cfg, out_dir = job
    rec = train(cfg, _DATA.source, _DATA.target, _DATA.target_val, out_dir)
    rec.pop("state")
    return rec


def run_trend(
    data: TrendData,
    base: TrainConfig | None = None,
    seeds=(0, 1, 2, 3, 4),
    variants=("source", "blend", "full"),
    processes: int | None = None,
    out_dir=None,
) -> TrendResult:
    """Train every (variant, seed) pair and collect target-validation mIoU.

    Runs go to a fork-based process pool; each worker uses one torch thread, so
    results do not depend on the pool size.
    """
    global _DATA
    base = base or TrainConfig()
    jobs = []
    for v in variants:
        for s in seeds:
            sub = None if out_dir is None else os.path.join(out_dir, f"{v}_seed{s}")
            jobs.append(((v, s), (variant_config(base, v, s), sub)))
    processes = processes or min(len(jobs), os.cpu_count() or 1)
    t0 = time.perf_counter()
    _DATA = data
    try:
        if processes > 1:
            with mp.get_context("fork").Pool(processes, initializer=_worker_init) as pool:
                records = pool.map(_run_one, [j for _, j in jobs], chunksize=1)
        else:
            records = [_run_one(j) for _, j in jobs]
    finally:
        _DATA = None
    runs = {key: rec for (key, _), rec in zip(jobs, records)}
    miou = {v: [runs[(v, s)]["target_val"]["miou"] for s in seeds] for v in variants}
    return TrendResult(miou, list(seeds), time.perf_counter() - t0, 0.0, runs)
