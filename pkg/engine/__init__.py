

"""
engine 패키지

FeatureVolume 과 LSSG attention / block 연산을 `from engine import ...` 로 재노출합니다.
"""

from .tensor import FeatureVolume, FlatEmbedding  # noqa: F401
from .attention import (  # noqa: F401
    AttentionKernel,
    AttentionWeights,
    GroupingMode,
    build_grouping,
    compact_nonlocal_fast,
    compact_nonlocal_naive,
    lssg_backward,
    lssg_forward,
    nonlocal_original,
)
from .blocks import GnScope, LssgBlockParams, lssg_block_backward, lssg_block_forward  # noqa: F401
