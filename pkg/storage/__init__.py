"""
storage 패키지

LSSV 볼륨 / LSSP 파라미터 / CSV 계약 파일 입출력을 `from storage import ...` 로 재노출합니다.
"""

from .volume_format import read_volume, write_volume, encode_volume, decode_volume  # noqa: F401
from .param_format import (  # noqa: F401
    read_params,
    write_params,
    save_block_params,
    load_block_params,
)
from .box_csv import (  # noqa: F401
    read_detections,
    read_ground_truth,
    write_detections,
    write_ground_truth,
)
