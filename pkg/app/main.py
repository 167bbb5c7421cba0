# app/main.py

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from pydantic import ValidationError

from app.schemas import (
    BenchRequest,
    CommandOutcome,
    ExitCode,
    ExperimentRequest,
    FrocRequest,
    GradcheckRequest,
    OracleRequest,
    PhantomRequest,
    parse_int_list,
    parse_shape,
)
from app.services.benchmark import run_bench
from app.services.experiment import run_experiment
from app.services.froc_cmd import run_froc
from app.services.gradcheck import run_gradcheck
from app.services.oracle import run_oracle
from app.services.phantom_cmd import run_phantom
from utils.config import DATA_DIR, DEFAULT_SEED, REPORT_DIR
from utils.errors import CapacityError, ConfigError, InputError, ShapeError, SpecError, UndefinedSensitivityError
from utils.logging_setup import configure_logging

logger = logging.getLogger(__name__)

# 인자/입력 문제 → exit 2
USAGE_ERRORS = (
    ConfigError, ShapeError, CapacityError, InputError, SpecError, UndefinedSensitivityError, ValidationError,
)


def _csv(text: Optional[str]) -> Optional[List[str]]:
    return None if text is None else [t.strip() for t in text.split(",") if t.strip()]


def _out(args, command: str) -> Path:
    return Path(args.out) if args.out else REPORT_DIR / command


# ──────────────────────────────────────────────────────────────────────────────
# 명령별 요청 생성
# ──────────────────────────────────────────────────────────────────────────────
def _gradcheck(args) -> CommandOutcome:
    req = GradcheckRequest(
        shape=parse_shape(args.shape),
        modes=_csv(args.mode) or ["ssg", "lsg"],
        groups=parse_int_list(args.groups),
        kernels=_csv(args.kernel) or ["cnl", "nl"],
        seed=args.seed,
        end_to_end=not args.no_network,
        corrupt=args.corrupt,
        out_dir=_out(args, "gradcheck"),
    )
    return run_gradcheck(req)


def _oracle(args) -> CommandOutcome:
    shape = parse_shape(args.shape) if args.shape else None
    return run_oracle(OracleRequest(trials=args.trials, seed=args.seed, shape=shape, out_dir=_out(args, "oracle")))


def _bench(args) -> CommandOutcome:
    req = BenchRequest(shape=parse_shape(args.shape), groups=parse_int_list(args.groups),
                       reps=args.reps, seed=args.seed, out_dir=_out(args, "bench"))
    return run_bench(req)


def _phantom(args) -> CommandOutcome:
    req = PhantomRequest(n_samples=args.n, difficulty=args.difficulty, dims=parse_shape(args.dims, rank=3),
                         seed=args.seed, out_dir=Path(args.out) if args.out else DATA_DIR)
    return run_phantom(req)


def _froc(args) -> CommandOutcome:
    req = FrocRequest(detections=Path(args.detections), ground_truth=Path(args.gt), criterion=args.criterion,
                      name=args.name, out_dir=_out(args, "froc"))
    return run_froc(req)


def _experiment(args) -> CommandOutcome:
    req = ExperimentRequest(
        dataset=Path(args.dataset) if args.dataset else DATA_DIR,
        criterion=args.criterion,
        layout=args.layout,
        groups=args.groups,
        kernel=args.kernel,
        seed=args.seed,
        train_config=args.train_config,
        layout_config=args.layout_config,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        out_dir=_out(args, "experiment"),
    )
    return run_experiment(req)


COMMANDS: Dict[str, Callable[[argparse.Namespace], CommandOutcome]] = {
    "gradcheck": _gradcheck,
    "oracle": _oracle,
    "bench": _bench,
    "phantom": _phantom,
    "froc": _froc,
    "experiment": _experiment,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lssg", description="LSSG attention 검증 / 벤치마크 / toy 검출 실험")
    parser.add_argument("--log-level", default=None, help="DEBUG|INFO|WARNING (기본: LSSG_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--out", default=None, help="출력 디렉터리")
        return p

    p = common(sub.add_parser("gradcheck", help="해석적 gradient vs 중앙 차분"))
    p.add_argument("--shape", default="2x8x3x3", help="CxDxHxW")
    p.add_argument("--mode", default=None, help="ssg,lsg (쉼표 목록)")
    p.add_argument("--groups", default="1,2,4", help="G 목록 (쉼표)")
    p.add_argument("--kernel", default=None, help="cnl,nl (쉼표 목록)")
    p.add_argument("--no-network", action="store_true", help="miniature 네트워크 검사 생략")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)

    p = common(sub.add_parser("oracle", help="compact non-local fast vs naive pairwise"))
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--shape", default=None, help="고정 CxDxHxW (기본: 무작위)")

    p = common(sub.add_parser("bench", help="attention 변형별 시간 / 메모리"))
    p.add_argument("--shape", default="4x16x8x8", help="CxDxHxW")
    p.add_argument("--groups", default="2,4,8")
    p.add_argument("--reps", type=int, default=3)

    p = common(sub.add_parser("phantom", help="합성 phantom dataset 생성"))
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--difficulty", default="easy", choices=["easy", "medium", "hard"])
    p.add_argument("--dims", default="32x32x32", help="DxHxW")

    p = common(sub.add_parser("froc", help="검출 CSV 의 FROC 평가"))
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--criterion", required=True, help="center | iou:T")
    p.add_argument("--name", default="detector")

    p = common(sub.add_parser("experiment", help="toy 네트워크 학습 → 검출 → FROC"))
    p.add_argument("--dataset", default=None)
    p.add_argument("--criterion", required=True, help="center | iou:T")
    # None 이면 layout 파일, 그다음 LayoutConfig 기본값 (2/3, G=4, cnl)
    p.add_argument("--layout", default=None, help="5/0 | 3/2 | 2/3 | 0/5 | 0/0 | S,L,...")
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--kernel", default=None, choices=["cnl", "nl"])
    p.add_argument("--train-config", default=None)
    p.add_argument("--layout-config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.log_level)

    try:
        outcome = COMMANDS[args.command](args)
    except USAGE_ERRORS as exc:
        logger.error(f"❌ {args.command}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return int(ExitCode.USAGE_ERROR)
    except Exception as exc:
        logger.error(f"❌ {args.command} 실패: {exc}", exc_info=True)
        return int(ExitCode.CHECK_FAILED)

    stream = sys.stdout if outcome.ok else sys.stderr
    print(outcome.message, file=stream)
    if outcome.report_path:
        print(f"report: {outcome.report_path}", file=stream)
    return int(outcome.exit_code)


if __name__ == "__main__":
    sys.exit(main())
