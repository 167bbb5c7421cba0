# app/services/experiment.py

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from app.schemas import CommandOutcome, ExitCode, ExperimentRequest
from app.services.reports import report_header, write_frame, write_report
from detection.geometry import Detection
from detection.pipeline import DetectConfig, detect_volume
from etl.dataset_io import ground_truth_table, read_dataset
from etl.phantom import PhantomSample
from evaluation.froc import FrocResult, MatchCriterion, evaluate_froc, format_froc_table, summary_frame, write_curve_csv
from network.config import LayoutConfig, TrainConfig, load_train_config, make_layout, make_train_config, read_layout_values
from network.toynet import ToyNetParams, build_network
from network.train import save_checkpoint, train_toy
from storage.box_csv import write_detections
from utils.errors import ConfigError, InputError

logger = logging.getLogger(__name__)

TABLE_FILE = "froc_table.txt"


def resolve_layout(req: ExperimentRequest) -> LayoutConfig:
    """LayoutConfig 기본값 < --layout-config 파일 < 명시한 CLI 플래그."""
    from_file = read_layout_values(req.layout_config) if req.layout_config else {}
    flags = dict(block_sequence=req.layout, group_count=req.groups, kernel=req.kernel)
    return make_layout(**{**from_file, **{k: v for k, v in flags.items() if v is not None}})


def resolve_train_config(req: ExperimentRequest) -> TrainConfig:
    base = load_train_config(req.train_config).model_dump() if req.train_config else {}
    base["seed"] = req.seed
    overrides = dict(epochs=req.epochs, learning_rate=req.learning_rate, batch_size=req.batch_size)
    base.update({k: v for k, v in overrides.items() if v is not None})
    return make_train_config(**base)


def split_dataset(
    named: Sequence[Tuple[str, PhantomSample]], eval_fraction: float
) -> Tuple[List[Tuple[str, PhantomSample]], List[Tuple[str, PhantomSample]]]:
    """앞쪽은 학습, 뒤쪽 eval_fraction 은 평가. seed 와 무관하게 고정."""
    if len(named) < 2:
        raise InputError(f"학습/평가로 나누려면 sample 이 2 개 이상 필요합니다: {len(named)}")
    n_eval = min(len(named) - 1, max(1, round(len(named) * eval_fraction)))
    return list(named[:-n_eval]), list(named[-n_eval:])


def run_name(layout: LayoutConfig, seed: int) -> str:
    label = layout.label.replace("/", "-")
    return f"toy_{label}_G{layout.group_count}_{layout.kernel.value}_s{seed}"


def detect_all(net: ToyNetParams, named: Sequence[Tuple[str, PhantomSample]]) -> Dict[str, List[Detection]]:
    cfg = DetectConfig()
    return {sid: detect_volume(net, sample.volume.values, cfg) for sid, sample in named}


def table_row(name: str, result: FrocResult) -> str:
    return format_froc_table([(name, result)]).splitlines()[1] + "\n"


def run_experiment(req: ExperimentRequest) -> CommandOutcome:
    criterion = MatchCriterion.parse(req.criterion)
    layout = resolve_layout(req)
    train_cfg = resolve_train_config(req)
    named = read_dataset(req.dataset)
    dims = tuple(named[0][1].volume.dims[1:])
    if dims != tuple(layout.patch):
        raise ConfigError(f"dataset 볼륨 {dims} 와 layout patch {tuple(layout.patch)} 가 다릅니다.")

    name = run_name(layout, req.seed)
    run_dir = Path(req.out_dir) / name
    train_set, eval_set = split_dataset(named, req.eval_fraction)
    logger.info(f"🚀 실험 {name}: train={len(train_set)} eval={len(eval_set)}")

    net = build_network(layout, req.seed)
    result = train_toy(net, [s for _, s in train_set], train_cfg, log_path=run_dir / "train_log.csv", progress=True)
    detections = detect_all(result.params, eval_set)
    froc = evaluate_froc(detections, ground_truth_table(eval_set), criterion)

    write_detections(run_dir / "detections.csv", detections)
    write_curve_csv(run_dir / "froc_curve.csv", froc)
    data = write_frame(run_dir / "froc_summary.csv", summary_frame([(name, froc)]))
    save_checkpoint(run_dir / "checkpoint.lssp", result.params)

    flags = dict(layout=layout.label, groups=layout.group_count, kernel=layout.kernel.value,
                 criterion=criterion.label, dataset=req.dataset, epochs=train_cfg.epochs,
                 lr=train_cfg.learning_rate, batch_size=train_cfg.batch_size, fpr_epochs=train_cfg.fpr_epochs)
    header = report_header("experiment", req.seed, flags)
    table = format_froc_table([(name, froc)])
    write_report(run_dir / "report.txt", header, table + f"auc(FP<=8): {froc.auc:.4f}\n")
    # 누적 표: 실행마다 자기 header 줄 아래에 행을 붙입니다
    table_path = Path(req.out_dir) / TABLE_FILE
    body = table_row(name, froc) if table_path.exists() else table
    report = write_report(table_path, header, body, append=True)
    logger.info(f"📊 {name}: avg FROC {froc.average * 100:.2f}%")
    return CommandOutcome(exit_code=ExitCode.OK, report_path=report, data_path=data,
                          message=f"{name} average {froc.average * 100:.2f}%")
