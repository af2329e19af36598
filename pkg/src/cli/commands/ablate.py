import argparse

from src.cli.parser import add_config_options
from src.fileio.report import ABLATION_COLUMNS, format_value
from src.pipeline.config_loader import load_config
from src.pipeline.workflow import resolve_output_dir, run_ablation


def setup_ablate_command(subparsers: argparse._SubParsersAction):
    """ablateコマンドをセットアップ"""
    parser = subparsers.add_parser("ablate", help="run the bi_ba / m_node / m_edge switch grid over several seeds")
    add_config_options(parser)
    parser.set_defaults(handler=ablate)


def ablate(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.overrides)
    rows = run_ablation(config, args.output)
    print(" ".join(ABLATION_COLUMNS))
    for row in rows:
        data = row.model_dump()
        print(" ".join(format_value(data[c]) for c in ABLATION_COLUMNS))
    print(f"output {resolve_output_dir(config, args.output) / 'ablation.csv'}")
    return 0
