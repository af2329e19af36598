import argparse

from src.cli.parser import add_config_options
from src.pipeline.config_loader import load_config
from src.pipeline.workflow import run_experiment
from src.utils.logger import get_logger

logger = get_logger(__name__)


def setup_run_command(subparsers: argparse._SubParsersAction):
    """runコマンドをセットアップ"""
    parser = subparsers.add_parser("run", help="run one synthetic experiment and write its report")
    add_config_options(parser)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.overrides)
    logger.info(f"Starting experiment '{config.name}' (seed={config.seed}, iterations={config.iterations})")
    report = run_experiment(config, args.output)
    m = report.metrics
    print(f"ate {m.ate:.6g}")
    print(f"auc {m.auc:.4g}")
    print(f"accuracy {m.accuracy:.6g}")
    print(f"completion {m.completion:.6g}")
    print(f"chamfer {m.chamfer:.6g}")
    print(f"depth_error {m.depth_error:.6g}")
    print(f"output {report.output_dir}")
    return 0
