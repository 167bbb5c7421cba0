# app/services/oracle.py

import logging
from typing import Tuple

import numpy as np
import pandas as pd

from app.schemas import CommandOutcome, ExitCode, OracleRequest
from app.services.reports import report_header, write_frame, write_report
from engine.attention import AttentionWeights, compact_nonlocal_fast, compact_nonlocal_naive
from engine.tensor import FeatureVolume
from utils.config import get_oracle_cap
from utils.errors import CapacityError

logger = logging.getLogger(__name__)

ORACLE_TOLERANCE = 1e-10
TRIAL_COLUMNS = ["trial", "C", "D", "H", "W", "max_rel_error"]


def random_capped_shape(rng: np.random.Generator, cap: int) -> Tuple[int, int, int, int]:
    """CDHW ≤ cap 인 무작위 shape."""
    while True:
        dims = (int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        if int(np.prod(dims)) <= cap:
            return dims


def relative_error(fast: np.ndarray, naive: np.ndarray) -> float:
    scale = float(np.max(np.abs(naive)))
    diff = float(np.max(np.abs(fast - naive)))
    return diff / scale if scale > 0.0 else diff


def run_oracle(req: OracleRequest) -> CommandOutcome:
    cap = get_oracle_cap()
    if req.shape is not None and int(np.prod(req.shape)) > cap:
        raise CapacityError(f"--shape {req.shape} 의 CDHW={int(np.prod(req.shape))} 가 상한 {cap} 을 넘습니다.")

    rng = np.random.default_rng(req.seed)
    rows = []
    for trial in range(req.trials):
        dims = tuple(req.shape) if req.shape is not None else random_capped_shape(rng, cap)
        x = FeatureVolume.random(dims, rng)
        w = AttentionWeights.init(dims[0], rng)
        fast = compact_nonlocal_fast(x, w).values
        naive = compact_nonlocal_naive(x, w, cap=cap).values
        rows.append((trial,) + dims + (relative_error(fast, naive),))
    df = pd.DataFrame(rows, columns=TRIAL_COLUMNS)
    worst = float(df["max_rel_error"].max())

    flags = dict(trials=req.trials, cap=cap)
    if req.shape is not None:
        flags["shape"] = "x".join(map(str, req.shape))
    lines = [f"{r.trial:>4} {r.C}x{r.D}x{r.H}x{r.W} {r.max_rel_error:.3e}" for r in df.itertuples(index=False)]
    lines.append(f"max relative error: {worst:.3e} (tol {ORACLE_TOLERANCE:g})")
    report = write_report(req.out_dir / "oracle.txt", report_header("oracle", req.seed, flags), "\n".join(lines) + "\n")
    data = write_frame(req.out_dir / "oracle.csv", df)

    if worst < ORACLE_TOLERANCE:
        logger.info(f"✅ oracle 일치: {req.trials} trials, 최대 상대 오차 {worst:.3e}")
        return CommandOutcome(exit_code=ExitCode.OK, report_path=report, data_path=data,
                              message=f"max relative error {worst:.3e}")
    logger.error(f"❌ oracle 불일치: 최대 상대 오차 {worst:.3e}")
    return CommandOutcome(exit_code=ExitCode.CHECK_FAILED, report_path=report, data_path=data,
                          message=f"max relative error {worst:.3e} exceeds {ORACLE_TOLERANCE:g}")
