import argparse

from src.eval.metrics import auc, auc_thresholds, cloud_metrics, translation_errors
from src.fileio.ply import read_ply
from src.fileio.trajectory import read_trajectory


def setup_eval_traj_command(subparsers: argparse._SubParsersAction):
    """eval-trajコマンドをセットアップ"""
    parser = subparsers.add_parser("eval-traj", help="ATE RMSE and AUC of an estimated trajectory file")
    parser.add_argument("estimate", help="estimated trajectory (timestamp tx ty tz qx qy qz qw)")
    parser.add_argument("reference", help="ground-truth trajectory")
    parser.add_argument("--no-scale", action="store_true", help="rigid (SE3) instead of similarity alignment")
    parser.add_argument("--max-gap", type=float, default=0.02, help="timestamp association window in seconds")
    parser.add_argument("--auc-max", type=float, default=0.5, help="largest AUC threshold in meters")
    parser.add_argument("--auc-count", type=int, default=128, help="number of AUC thresholds")
    parser.set_defaults(handler=eval_traj)


def eval_traj(args: argparse.Namespace) -> int:
    est = read_trajectory(args.estimate)
    gt = read_trajectory(args.reference)
    errors = translation_errors(est, gt, with_scale=not args.no_scale, max_gap=args.max_gap)
    print(f"pairs {len(errors)}")
    print(f"ate {float((errors**2).mean() ** 0.5):.6g}")
    print(f"auc {auc(errors, auc_thresholds(args.auc_max, args.auc_count)):.4g}")
    return 0


def setup_eval_cloud_command(subparsers: argparse._SubParsersAction):
    """eval-cloudコマンドをセットアップ"""
    parser = subparsers.add_parser("eval-cloud", help="clipped accuracy / completion / chamfer of two PLY clouds")
    parser.add_argument("estimate", help="estimated point cloud (PLY)")
    parser.add_argument("reference", help="ground-truth point cloud (PLY)")
    parser.add_argument("--clip", type=float, default=0.5, help="distance clip in meters")
    parser.set_defaults(handler=eval_cloud)


def eval_cloud(args: argparse.Namespace) -> int:
    metrics = cloud_metrics(read_ply(args.estimate), read_ply(args.reference), args.clip)
    print(f"accuracy {metrics.accuracy:.6g}")
    print(f"completion {metrics.completion:.6g}")
    print(f"chamfer {metrics.chamfer:.6g}")
    return 0
