import sys, pathlib
sys.path.append(pathlib.Path(__file__).resolve().parents[1].as_posix())


"""Attention 유무 ablation sweep.

seed 고정 phantom 100 개 (32³) 위에서 2/3 layout 과 0/0 (attention 없음) layout 을
학습 seed 5 개로 돌려 평균 FROC 를 비교합니다. 2/3 이 5 번 중 4 번 이상 이기면 exit 0.
CPU 로 수십 분 걸리므로 단위 테스트에는 넣지 않습니다.
"""

import argparse
import logging
from pathlib import Path

import pandas as pd

from app.schemas import ExperimentRequest, PhantomRequest
from app.services.experiment import run_experiment
from app.services.phantom_cmd import run_phantom
from app.services.reports import report_header, write_frame, write_report
from utils.config import REPORT_DIR
from utils.logging_setup import configure_logging

logger = logging.getLogger(__name__)

LAYOUTS = ("2/3", "0/0")
REQUIRED_WINS = 4


def _average(summary_csv: Path) -> float:
    return float(pd.read_csv(summary_csv)["average"].iloc[0])


def main() -> int:
    parser = argparse.ArgumentParser(description="2/3 vs 0/0 ablation sweep")
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--n", type=int, default=100)
    parser.add_argument("--data-seed", type=int, default=0)
    parser.add_argument("--criterion", default="center")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--out", default=str(REPORT_DIR / "ablation"))
    args = parser.parse_args()
    configure_logging()

    out = Path(args.out)
    dataset = out / "phantoms"
    run_phantom(PhantomRequest(n_samples=args.n, seed=args.data_seed, out_dir=dataset))

    rows = []
    for seed in range(args.seeds):
        row = {"seed": seed}
        for layout in LAYOUTS:
            outcome = run_experiment(ExperimentRequest(
                dataset=dataset, criterion=args.criterion, layout=layout, seed=seed,
                epochs=args.epochs, out_dir=out / "runs",
            ))
            row[layout] = _average(outcome.data_path)
        row["margin"] = row[LAYOUTS[0]] - row[LAYOUTS[1]]
        rows.append(row)
        logger.info(f"📊 seed={seed} {LAYOUTS[0]}={row[LAYOUTS[0]]:.4f} {LAYOUTS[1]}={row[LAYOUTS[1]]:.4f}")

    df = pd.DataFrame(rows)
    wins = int((df["margin"] > 0).sum())
    flags = dict(seeds=args.seeds, n=args.n, criterion=args.criterion, epochs=args.epochs)
    body = df.to_string(index=False) + f"\nwins: {wins}/{args.seeds} (required {REQUIRED_WINS})\n"
    write_report(out / "ablation.txt", report_header("ablation", args.data_seed, flags), body)
    write_frame(out / "ablation.csv", df)

    if wins >= min(REQUIRED_WINS, args.seeds):
        logger.info(f"✅ attention layout 이 {wins}/{args.seeds} seed 에서 우세")
        return 0
    logger.error(f"❌ attention layout 우세 seed 수 부족: {wins}/{args.seeds}")
    return 1


if __name__ == "__main__":
    sys.exit(main())
