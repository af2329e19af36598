"""全モジュール共通の例外階層

各エラーは固定の ``code`` を持ち、CLIはそれを1行（``<code>: <message>``）で出力する。
"""


class BiconError(Exception):
    """全エラーの基底クラス"""

    code = "E_RUNTIME"


class DepthBehindCamera(BiconError):
    """点がカメラの後方（z <= z_min）にある"""

    code = "E_CHEIRALITY"


class NonPositiveDepth(BiconError):
    """逆投影に0以下のデプスが渡された"""

    code = "E_DEPTH"


class EmptySystem(BiconError):
    """有効な残差が一つもない（退化したグラフ）"""

    code = "E_EMPTY_SYSTEM"


class SingularSystem(BiconError):
    """縮約後のポーズ系がダンピング後も正定値でない"""

    code = "E_SINGULAR"


class MaxDampingExceeded(BiconError):
    """Levenbergダンピングが上限を超えた

    ``state`` と ``trace`` には最後に受理された状態とそれまでの履歴が入る。
    """

    code = "E_DAMPING"

    def __init__(self, message: str, state=None, trace=None):
        self.state = state
        self.trace = trace
        super().__init__(message)


class NoNeighbors(BiconError):
    """キーフレームに隣接ノードがない"""

    code = "E_NO_NEIGHBORS"


class TooFewPairs(BiconError):
    """軌跡アライメントに必要なペア数が足りない"""

    code = "E_TOO_FEW_PAIRS"


class EmptyCloud(BiconError):
    """点群が空"""

    code = "E_EMPTY_CLOUD"


class ParseError(BiconError):
    """ファイルの解析エラー（行番号付き）"""

    code = "E_PARSE"

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class NonUnitQuaternion(BiconError):
    """クォータニオンのノルムが1から大きく外れている"""

    code = "E_QUATERNION"


class ConfigError(BiconError):
    """設定ファイルまたはCLI上書きが不正"""

    code = "E_CONFIG"


class IoError(BiconError):
    """ファイル入出力の失敗"""

    code = "E_IO"


class UsageError(BiconError):
    """コマンドライン引数が不正"""

    code = "E_USAGE"
