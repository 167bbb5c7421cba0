# app/services/gradcheck.py

import asyncio
import logging
from functools import partial
from typing import Callable, List

import pandas as pd

from app.schemas import CommandOutcome, ExitCode, GradcheckRequest
from app.services.reports import report_header, write_frame, write_report
from engine.attention import AttentionKernel, GroupingMode, build_grouping
from evaluation.gradcheck import GradcheckRecord, block_suite, group_norm_suite, lssg_suite, network_suite, summarize

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ["suite", "param", "rel_error", "tolerance", "entries", "passed"]


def _jobs(req: GradcheckRequest) -> List[Callable[[], List[GradcheckRecord]]]:
    modes = [GroupingMode.parse(m) for m in req.modes]
    kernels = [AttentionKernel.parse(k) for k in req.kernels]
    depth = req.shape[1]
    for mode in modes:
        for g in req.groups:
            build_grouping(mode, depth, g)  # 나누어 떨어지지 않으면 ConfigError

    jobs = [partial(group_norm_suite, req.shape, req.seed, req.corrupt)]
    for kernel in kernels:
        for mode in modes:
            for g in req.groups:
                jobs.append(partial(lssg_suite, req.shape, mode, g, kernel, req.seed, req.corrupt))
                jobs.append(partial(block_suite, req.shape, mode, g, kernel, req.seed, corrupt=req.corrupt))
        if req.end_to_end:
            jobs.append(partial(network_suite, req.seed, req.corrupt, kernel))
    return jobs


async def _run_all(jobs) -> List[List[GradcheckRecord]]:
    """suite 들은 서로 독립이므로 병렬로 돌리고, 결과 순서는 job 순서를 따릅니다."""
    return await asyncio.gather(*(asyncio.to_thread(job) for job in jobs))


def records_frame(records: List[GradcheckRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [(r.suite, r.param, r.rel_error, r.tolerance, r.entries, r.passed) for r in records],
        columns=RECORD_COLUMNS,
    )


def _body(df: pd.DataFrame) -> str:
    lines = []
    for suite, part in df.groupby("suite", sort=False):
        lines.append(suite)
        for row in part.itertuples(index=False):
            status = "PASS" if row.passed else "FAIL"
            lines.append(f"  {row.param:<28} {row.rel_error:.3e} (tol {row.tolerance:g}) {status}")
    worst = df.groupby("param", sort=True)["rel_error"].max()
    lines.append("max relative error per parameter group")
    lines.extend(f"  {name:<28} {value:.3e}" for name, value in worst.items())
    return "\n".join(lines) + "\n"


def run_gradcheck(req: GradcheckRequest) -> CommandOutcome:
    jobs = _jobs(req)
    logger.info(f"🚀 gradcheck 시작: shape={req.shape} suites={len(jobs)}")
    records = [r for batch in asyncio.run(_run_all(jobs)) for r in batch]
    ok, failed = summarize(records)

    df = records_frame(records)
    flags = dict(shape="x".join(map(str, req.shape)), mode=",".join(req.modes),
                 groups=",".join(map(str, req.groups)), kernel=",".join(req.kernels),
                 end_to_end=req.end_to_end)
    if req.corrupt:
        flags["corrupt"] = req.corrupt
    header = report_header("gradcheck", req.seed, flags)
    report = write_report(req.out_dir / "gradcheck.txt", header, _body(df))
    data = write_frame(req.out_dir / "gradcheck.csv", df)

    if ok:
        logger.info(f"✅ gradcheck 통과: {len(records)} 개 파라미터 묶음, 최대 {df['rel_error'].max():.3e}")
        return CommandOutcome(exit_code=ExitCode.OK, report_path=report, data_path=data,
                              message=f"gradcheck passed ({len(records)} checks)")
    names = sorted({f"{r.suite}.{r.param}" for r in failed})
    return CommandOutcome(exit_code=ExitCode.CHECK_FAILED, report_path=report, data_path=data,
                          message="gradcheck failed: " + ", ".join(names))
