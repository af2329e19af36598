import argparse

from src.errors import UsageError


class CliParser(argparse.ArgumentParser):
    """argparseのエラーを終了コード1のUsageErrorに変換する"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def add_config_options(parser: argparse.ArgumentParser):
    """--config / --set / --output を追加"""
    parser.add_argument("--config", "-c", metavar="PATH", help="TOML experiment config")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value, e.g. --set ba.inner_ba_steps=3 (repeatable)",
    )
    parser.add_argument("--output", "-o", metavar="DIR", help="output directory (default: $BICON_OUTPUT_DIR/<name>)")
