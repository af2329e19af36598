import time
from collections import defaultdict
from functools import wraps
from typing import Callable, TypeVar
from src.utils.logger import StructuredLogger, get_logger

logger = get_logger(__name__)

T = TypeVar("T")


class PhaseTimer:
    """フェーズごとの経過時間を集計"""

    def __init__(self):
        self.durations: dict[str, float] = defaultdict(float)
        self.counts: dict[str, int] = defaultdict(int)

    def record(self, phase: str, seconds: float):
        self.durations[phase] += seconds
        self.counts[phase] += 1

    def summary_ms(self) -> dict[str, float]:
        """フェーズ名 → 合計ミリ秒"""
        return {name: 1000.0 * sec for name, sec in sorted(self.durations.items())}


def timed(phase: str, timer_attr: str = "timer", budget_ms: float | None = None):
    """実行時間を計測するデコレータ

    第一引数（self）が ``timer_attr`` に PhaseTimer を持っていれば記録し、
    ``budget_ms`` を超えた場合は警告を出す。

    Args:
        phase: フェーズ名
        timer_attr: PhaseTimerを保持する属性名
        budget_ms: 目標時間（ミリ秒）。超過は警告のみ

    Returns:
        デコレータ関数
    """

    def decorator(func: Callable[..., T]) -> Callable[..., T]:
        @wraps(func)
        def wrapper(*args, **kwargs) -> T:
            start = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                elapsed = time.perf_counter() - start
                timer = getattr(args[0], timer_attr, None) if args else None
                if isinstance(timer, PhaseTimer):
                    timer.record(phase, elapsed)
                StructuredLogger.log_phase(phase, 1000.0 * elapsed)
                if budget_ms is not None and 1000.0 * elapsed > budget_ms:
                    logger.warning(
                        f"{phase} took {1000.0 * elapsed:.1f} ms "
                        f"(target {budget_ms:.0f} ms)"
                    )

        return wrapper

    return decorator
