"""보고서 헤더와 파일 출력 공용 함수."""
import logging
from pathlib import Path
from typing import Mapping, Union

import pandas as pd

logger = logging.getLogger(__name__)


def report_header(command: str, seed: int, flags: Mapping[str, object]) -> str:
    """재현용 도장: 명령, seed, 모든 flag 를 한 줄에. 시각은 넣지 않습니다."""
    parts = " ".join(f"--{k.replace('_', '-')}={flags[k]}" for k in sorted(flags))
    return f"# lssg {command} seed={seed} {parts}".rstrip()


def write_report(path: Union[str, Path], header: str, body: str, append: bool = False) -> Path:
    """append=True 면 기존 내용 뒤에 header 줄과 body 를 덧붙입니다."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w", encoding="utf-8") as fh:
        fh.write(f"{header}\n{body}")
    logger.info(f"📝 보고서: {path}")
    return path


def write_frame(path: Union[str, Path], df: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    return path
