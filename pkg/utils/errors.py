"""라이브러리 공통 예외 정의.

대부분 `ValueError` 를 함께 상속하므로 기존 `except ValueError` 코드에서도 잡힙니다.
"""


class LssgError(Exception):
    """모든 라이브러리 예외의 기반 클래스."""


class ShapeError(LssgError, ValueError):
    """텐서/볼륨 차원 불일치."""


class ConfigError(LssgError, ValueError):
    """그룹 수, 레이아웃 등 설정값 오류."""


class CapacityError(LssgError, ValueError):
    """naive oracle 의 크기 상한 초과."""


class PartitionError(LssgError, ValueError):
    """slice group 집합이 depth 를 정확히 한 번씩 덮지 않음."""


class StateError(LssgError, RuntimeError):
    """forward 캐시/레지스트리 상태 불일치."""


class SpecError(LssgError, ValueError):
    """phantom 사양 오류 (볼륨 밖 객체 등)."""


class InputError(LssgError, ValueError):
    """입력 파일/식별자 오류."""


class UndefinedSensitivityError(LssgError, ValueError):
    """GT 가 하나도 없어 sensitivity 를 정의할 수 없음."""


class TrainingDivergedError(LssgError, RuntimeError):
    """학습 중 NaN/Inf loss 발생."""

    def __init__(self, message: str, step: int, batch_indices=None):
        super().__init__(message)
        self.step = step
        self.batch_indices = list(batch_indices or [])
