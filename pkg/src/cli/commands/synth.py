import argparse

from src.cli.parser import add_config_options
from src.pipeline.config_loader import load_config
from src.pipeline.workflow import write_scene_artifacts


def setup_synth_command(subparsers: argparse._SubParsersAction):
    """synthコマンドをセットアップ"""
    parser = subparsers.add_parser("synth", help="write the ground-truth trajectory, depth maps and point cloud of a scene")
    add_config_options(parser)
    parser.set_defaults(handler=synth)


def synth(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.overrides)
    out = write_scene_artifacts(config, args.output)
    print(f"output {out}")
    return 0
