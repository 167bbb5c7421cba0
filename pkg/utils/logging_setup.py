"""엔트리포인트 공용 로깅 설정."""
import logging

from utils.config import LOG_LEVEL


def configure_logging(level: str = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
    )
