# utils/config.py

import os
from dotenv import load_dotenv
from pathlib import Path

# .env 파일의 절대 경로를 명시적으로 지정하여 확실하게 로드합니다.
project_root = Path(__file__).resolve().parents[1]
env_path = project_root / '.env'
load_dotenv(dotenv_path=env_path)

DEFAULT_ORACLE_CAP = 4096

LOG_LEVEL = os.getenv("LSSG_LOG_LEVEL", "INFO").upper()

# ✨ 숫자 타입 변환
try:
    DEFAULT_SEED = int(os.getenv("LSSG_DEFAULT_SEED", "0"))
except (ValueError, TypeError):
    DEFAULT_SEED = 0

DATA_DIR = Path(os.getenv("LSSG_DATA_DIR", str(project_root / "data" / "phantoms")))
REPORT_DIR = Path(os.getenv("LSSG_REPORT_DIR", str(project_root / "reports")))


def get_oracle_cap() -> int:
    """naive pairwise 경로의 CDHW 상한.

    CLI 에서 `LSSG_ORACLE_CAP` 를 덮어쓸 수 있도록 호출할 때마다 다시 읽습니다.
    """
    try:
        cap = int(os.getenv("LSSG_ORACLE_CAP", str(DEFAULT_ORACLE_CAP)))
    except (ValueError, TypeError):
        return DEFAULT_ORACLE_CAP
    return cap if cap > 0 else DEFAULT_ORACLE_CAP
