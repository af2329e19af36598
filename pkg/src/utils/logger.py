import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from src.config import settings


def get_logger(name: str) -> logging.Logger:
    """ロガーインスタンスを取得

    Args:
        name: ロガー名（通常は__name__を渡す）

    Returns:
        logging.Logger: 設定済みロガーインスタンス
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, settings.LOG_LEVEL))

    if not logger.handlers:
        # フォーマッタ
        formatter = logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        )

        # コンソールハンドラ
        ch = logging.StreamHandler()
        ch.setLevel(getattr(logging, settings.LOG_LEVEL))
        ch.setFormatter(formatter)
        logger.addHandler(ch)

        # ファイルハンドラ（LOG_FILE設定時のみ）
        if settings.LOG_FILE:
            log_path = Path(settings.LOG_FILE)
            log_path.parent.mkdir(parents=True, exist_ok=True)

            fh = logging.FileHandler(log_path, encoding="utf-8")
            fh.setLevel(logging.DEBUG)
            fh.setFormatter(formatter)
            logger.addHandler(fh)

        logger.propagate = False

    return logger


class StructuredLogger:
    """構造化ログ出力用のヘルパークラス"""

    @staticmethod
    def _emit(event: str, payload: dict, level: int = logging.INFO):
        log_entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "event": event,
            **payload,
        }
        logger = get_logger(__name__)
        logger.log(level, json.dumps(log_entry, default=float))

    @staticmethod
    def log_iteration(iteration: int, row: dict):
        """外側ループ1回分のトレースを記録

        Args:
            iteration: 反復番号
            row: コスト、ATE、マスク統計など
        """
        StructuredLogger._emit("outer_iteration", {"iteration": iteration, **row})

    @staticmethod
    def log_phase(phase: str, duration_ms: float, metadata: dict = None):
        """フェーズ実行時間を記録

        Args:
            phase: フェーズ名
            duration_ms: 実行時間（ミリ秒）
            metadata: 追加メタデータ
        """
        StructuredLogger._emit(
            "phase",
            {"phase": phase, "duration_ms": duration_ms, "metadata": metadata or {}},
            logging.DEBUG,
        )

    @staticmethod
    def log_run(name: str, success: bool, metrics: dict):
        """実験全体の完了を記録"""
        StructuredLogger._emit(
            "run", {"name": name, "success": success, "metrics": metrics}
        )
