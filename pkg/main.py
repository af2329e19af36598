import sys

from src.cli.commands.ablate import setup_ablate_command
from src.cli.commands.evaluate import setup_eval_cloud_command, setup_eval_traj_command
from src.cli.commands.run import setup_run_command
from src.cli.commands.synth import setup_synth_command
from src.cli.parser import CliParser
from src.errors import BiconError, ConfigError, UsageError
from src.utils.logger import get_logger

logger = get_logger(__name__)

EXIT_USAGE = 1
EXIT_RUNTIME = 2


def build_parser() -> CliParser:
    parser = CliParser(prog="bicon", description="Bi-consistent dense bundle adjustment on a synthetic ground-truth world")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=CliParser)

    # コマンド登録
    setup_run_command(subparsers)  # 実験1回
    setup_ablate_command(subparsers)  # アブレーション
    setup_eval_traj_command(subparsers)  # 軌跡評価
    setup_eval_cloud_command(subparsers)  # 点群評価
    setup_synth_command(subparsers)  # GTシーン出力

    return parser


def _report_error(code: str, message: str):
    print(f"{code}: {' '.join(str(message).split())}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    """メインエントリーポイント

    Returns:
        int: 0=成功, 1=引数・設定エラー, 2=実行時エラー
    """
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except (UsageError, ConfigError) as e:
        _report_error(e.code, str(e))
        return EXIT_USAGE
    except BiconError as e:
        _report_error(e.code, str(e))
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        _report_error("E_INTERRUPTED", "interrupted")
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        _report_error("E_INTERNAL", f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
