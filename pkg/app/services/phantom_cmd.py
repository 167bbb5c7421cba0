# app/services/phantom_cmd.py

import logging

import pandas as pd

from app.schemas import CommandOutcome, ExitCode, PhantomRequest
from app.services.reports import report_header, write_frame, write_report
from etl.dataset_io import scan_id, write_dataset
from etl.phantom import Difficulty, generate_dataset

logger = logging.getLogger(__name__)


def manifest_frame(samples) -> pd.DataFrame:
    return pd.DataFrame(
        [
            (scan_id(i), len(s.gt_boxes), s.nodule_voxels, s.tube_voxels)
            for i, s in enumerate(samples)
        ],
        columns=["scan_id", "n_nodules", "nodule_voxels", "tube_voxels"],
    )


def run_phantom(req: PhantomRequest) -> CommandOutcome:
    difficulty = Difficulty(req.difficulty)
    samples = generate_dataset(req.n_samples, difficulty, req.seed, tuple(req.dims), progress=True)
    write_dataset(req.out_dir, samples)

    df = manifest_frame(samples)
    flags = dict(n=req.n_samples, difficulty=difficulty.value, dims="x".join(map(str, req.dims)))
    body = f"samples={len(df)} nodules={int(df['n_nodules'].sum())}\n"
    report = write_report(req.out_dir / "phantom.txt", report_header("phantom", req.seed, flags), body)
    data = write_frame(req.out_dir / "manifest.csv", df)
    return CommandOutcome(exit_code=ExitCode.OK, report_path=report, data_path=data,
                          message=f"{len(df)} phantoms written to {req.out_dir}")
