# app/services/froc_cmd.py

import logging

from app.schemas import CommandOutcome, ExitCode, FrocRequest
from app.services.reports import report_header, write_frame, write_report
from evaluation.froc import MatchCriterion, evaluate_froc, format_froc_table, summary_frame, write_curve_csv
from storage.box_csv import read_detections, read_ground_truth

logger = logging.getLogger(__name__)


def run_froc(req: FrocRequest) -> CommandOutcome:
    criterion = MatchCriterion.parse(req.criterion)
    detections = read_detections(req.detections)
    ground_truths = read_ground_truth(req.ground_truth)
    result = evaluate_froc(detections, ground_truths, criterion)

    flags = dict(detections=req.detections, gt=req.ground_truth, criterion=criterion.label, name=req.name)
    body = format_froc_table([(req.name, result)]) + f"auc(FP<=8): {result.auc:.4f}\n"
    report = write_report(req.out_dir / "froc.txt", report_header("froc", 0, flags), body)
    write_curve_csv(req.out_dir / "froc_curve.csv", result)
    data = write_frame(req.out_dir / "froc_summary.csv", summary_frame([(req.name, result)]))
    logger.info(f"📊 FROC avg={result.average * 100:.2f}% ({criterion.label})")
    return CommandOutcome(exit_code=ExitCode.OK, report_path=report, data_path=data,
                          message=f"average sensitivity {result.average * 100:.2f}%")
