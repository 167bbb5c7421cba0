# app/services/benchmark.py

import logging
import time
import tracemalloc
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from app.schemas import BenchRequest, CommandOutcome, ExitCode
from app.services.reports import report_header, write_frame, write_report
from engine.attention import (
    AttentionWeights,
    GroupingMode,
    build_grouping,
    compact_nonlocal_fast,
    compact_nonlocal_naive,
    lssg_forward,
    nonlocal_original,
)
from engine.tensor import FeatureVolume
from utils.config import get_oracle_cap

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["variant", "groups", "C", "D", "H", "W", "reps", "seconds", "peak_bytes"]
SPEEDUP_FLOOR = 10.0
FLOOR_SIZE = 4096


def measure(fn: Callable[[], object], reps: int) -> Tuple[float, int]:
    """(최소 wall-clock 초, tracemalloc peak bytes). peak 는 시간 측정과 따로 한 번 잽니다."""
    best = float("inf")
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return best, int(peak)


def _variants(x: FeatureVolume, w: AttentionWeights, groups: List[int], cap: int):
    size = x.size
    yield "nl_original", 1, lambda: nonlocal_original(x, w)
    if size <= cap:
        yield "cnl_naive", 1, lambda: compact_nonlocal_naive(x, w, cap=cap)
    else:
        logger.warning(f"⚠️ CDHW={size} > cap {cap}: cnl_naive 생략")
    yield "cnl_fast", 1, lambda: compact_nonlocal_fast(x, w)
    for mode in (GroupingMode.SHORT, GroupingMode.LONG):
        for g in groups:
            if x.depth % g != 0:
                logger.warning(f"⚠️ G={g} 가 D={x.depth} 를 나누지 않아 {mode.value} 생략")
                continue
            grouping = build_grouping(mode, x.depth, g)
            yield mode.value, g, (lambda grouping=grouping: lssg_forward(x, w, grouping))


def speedup(df: pd.DataFrame) -> Optional[float]:
    naive = df.loc[df["variant"] == "cnl_naive", "seconds"]
    fast = df.loc[df["variant"] == "cnl_fast", "seconds"]
    if naive.empty or fast.empty:
        return None
    return float(naive.iloc[0]) / max(float(fast.iloc[0]), 1e-12)


def run_bench(req: BenchRequest) -> CommandOutcome:
    cap = get_oracle_cap()
    rng = np.random.default_rng(req.seed)
    x = FeatureVolume.random(tuple(req.shape), rng)
    w = AttentionWeights.init(req.shape[0], rng)

    rows = []
    for name, g, fn in tqdm(list(_variants(x, w, req.groups, cap)), desc="bench"):
        seconds, peak = measure(fn, req.reps)
        rows.append((name, g) + tuple(req.shape) + (req.reps, seconds, peak))
    df = pd.DataFrame(rows, columns=BENCH_COLUMNS)

    ratio = speedup(df)
    gated = x.size == FLOOR_SIZE and ratio is not None
    flags = dict(shape="x".join(map(str, req.shape)), groups=",".join(map(str, req.groups)), reps=req.reps)
    body = df.to_string(index=False) + "\n"
    if ratio is not None:
        body += f"naive/fast speedup: {ratio:.1f}x" + (f" (floor {SPEEDUP_FLOOR:g}x)" if gated else "") + "\n"
    report = write_report(req.out_dir / "bench.txt", report_header("bench", req.seed, flags), body)
    data = write_frame(req.out_dir / "bench.csv", df)

    if gated and ratio < SPEEDUP_FLOOR:
        logger.error(f"❌ fast 경로가 naive 대비 {ratio:.1f}배 빠름 (기준 {SPEEDUP_FLOOR:g}배)")
        return CommandOutcome(exit_code=ExitCode.CHECK_FAILED, report_path=report, data_path=data,
                              message=f"speedup {ratio:.1f}x below {SPEEDUP_FLOOR:g}x floor")
    logger.info(f"✅ bench 완료: {len(df)} variants")
    return CommandOutcome(exit_code=ExitCode.OK, report_path=report, data_path=data,
                          message=f"{len(df)} variants measured")
