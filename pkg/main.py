#!/usr/bin/env python3
"""
ediv - Main Entry Point
Ensemble diversity toolkit: train a parent, derive children, compare what they learned
"""


import sys
import argparse
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from backend.diversity_metrics import MetricsError
from backend.engine.checkpoint import CheckpointError
from backend.engine.tensor import GraphError, NumericalError, ShapeError
from backend.ensembles.ensemble import EnsembleError
from backend.ensembles.masks import MaskError
from backend.ensembles.trainer import TrainingDivergedError
from backend.hashing.image_ops import HashError
from backend.hashing.perceptual_hash import ALGORITHMS
from backend.interpret.fourier import LensError
from backend.pipeline.config import ConfigError
from backend.pipeline.dataset import DatasetError
from backend.pipeline.runner import StageError
from backend.schedules import ScheduleError
from backend.thread_pool_manager import JobFailedError
from frontend.cli import dispatch

EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_FAILURE = 3

DOMAIN_ERRORS = (ShapeError, GraphError, NumericalError, CheckpointError, ScheduleError, MaskError,
                 EnsembleError, TrainingDivergedError, MetricsError, LensError, HashError,
                 JobFailedError)


def setup_logging(log_dir="logs", verbose=False):
    """Configure logging system"""
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)

    logger = logging.getLogger()
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    # Create rotating file handler (max 10MB per file, keep 5 backup files)
    file_handler = RotatingFileHandler(
        log_dir / "ediv.log",
        maxBytes=10*1024*1024,  # 10MB
        backupCount=5
    )
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    # Console goes to stderr so command output on stdout stays parseable
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    console_handler.setLevel(logging.DEBUG if verbose else logging.WARNING)
    logger.addHandler(console_handler)
    return logging.getLogger(__name__)


def build_parser():
    """Build the argument tree: ediv <group> <command> [options]"""
    parser = argparse.ArgumentParser(
        prog="ediv",
        description="ediv - ensemble diversity through interpretability"
    )
    parser.add_argument('--log-dir', default='logs', help='Log directory (default: logs)')
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging on the console')
    groups = parser.add_subparsers(dest='group', required=True)

    # forge
    forge = groups.add_parser('forge', help='Train a parent and derive children').add_subparsers(
        dest='command', required=True)
    cmd = forge.add_parser('train-parent', help='Train the parent network')
    cmd.add_argument('--config', help='Experiment YAML file')
    cmd.add_argument('--out', default='checkpoints', help='Output directory')
    for name, text in (('snapshot', 'Snapshot children by cyclic training'),
                       ('prune-tune', 'Anti-random prune-and-tune children')):
        cmd = forge.add_parser(name, help=text)
        cmd.add_argument('--config', help='Experiment YAML file')
        cmd.add_argument('--parent', required=True, help='Parent checkpoint (.ediv)')
        cmd.add_argument('--out', default=f'checkpoints/{name.replace("-", "_")}',
                         help='Output directory')
        if name == 'prune-tune':
            cmd.add_argument('--workers', type=int, help='Worker threads (default: config)')

    # schedule
    schedule = groups.add_parser('schedule', help='Learning-rate schedules').add_subparsers(
        dest='command', required=True)
    cmd = schedule.add_parser('dump', help='Write (t, lr, momentum) rows as CSV')
    cmd.add_argument('--kind', choices=['cosine', 'one-cycle', 'snapshot'], default='snapshot')
    cmd.add_argument('--config', help='Experiment YAML file')
    cmd.add_argument('--steps', type=int, help='Total iterations (default: from the config)')
    cmd.add_argument('--out', help='CSV file (default: stdout)')
    cmd.add_argument('--plot', help='Also write a PNG plot')

    # metrics
    metrics = groups.add_parser('metrics', help='Output diversity').add_subparsers(
        dest='command', required=True)
    cmd = metrics.add_parser('report', help='d_KL / d_PDR rows from prediction files')
    cmd.add_argument('predictions', nargs='+', help='EDPR or CSV prediction files, one per method')
    cmd.add_argument('--method', action='append', help='Method name per file (default: file stem)')
    cmd.add_argument('--labels', help='Labels file, one integer per line')
    cmd.add_argument('--out', help='JSON or CSV output file')

    # lens
    lens = groups.add_parser('lens', help='Feature visualisation and saliency').add_subparsers(
        dest='command', required=True)
    cmd = lens.add_parser('visualize', help='Visualise channels of a layer')
    cmd.add_argument('--checkpoint', required=True, help='Network checkpoint (.ediv)')
    cmd.add_argument('--config', help='Experiment YAML file (viz block and colour matrix)')
    cmd.add_argument('--layer', default='final', help="Layer index or 'final' (default: final)")
    cmd.add_argument('--channel', type=int, help='Channel index')
    cmd.add_argument('--grid', action='store_true', help='All channels plus a contact sheet')
    cmd.add_argument('--steps', type=int, help='Optimisation steps')
    cmd.add_argument('--seed', type=int, help='Initialisation seed')
    cmd.add_argument('--workers', type=int, help='Worker threads (default: config)')
    cmd.add_argument('--out', default='viz', help='Output directory')
    cmd = lens.add_parser('saliency', help='Saliency heatmap for one image')
    cmd.add_argument('--checkpoint', required=True, help='Network checkpoint (.ediv)')
    cmd.add_argument('--image', required=True, help='Input image file')
    cmd.add_argument('--smooth', action='store_true', help='SmoothGrad instead of vanilla')
    cmd.add_argument('--samples', type=int, default=25, help='SmoothGrad samples (default: 25)')
    cmd.add_argument('--sigma', type=float, default=0.10, help='SmoothGrad noise (default: 0.10)')
    cmd.add_argument('--seed', type=int, default=0, help='SmoothGrad seed (default: 0)')
    cmd.add_argument('--gray', action='store_true', help='Also write the grayscale map')
    cmd.add_argument('--out', default='saliency.png', help='Output PNG')

    # hash
    hashing = groups.add_parser('hash', help='Perceptual hashes').add_subparsers(
        dest='command', required=True)
    cmd = hashing.add_parser('compute', help='Print <hex> <path> per file')
    cmd.add_argument('--algo', choices=ALGORITHMS, default='ahash')
    cmd.add_argument('files', nargs='+', help='Image files')
    cmd = hashing.add_parser('dist', help='Hamming distance between two hex hashes')
    cmd.add_argument('hash_a')
    cmd.add_argument('hash_b')

    # pipeline
    pipeline = groups.add_parser('pipeline', help='End-to-end experiment').add_subparsers(
        dest='command', required=True)
    cmd = pipeline.add_parser('run', help='Run every stage of an experiment')
    cmd.add_argument('config', help='Experiment YAML file')
    cmd.add_argument('--out', help='Run directory (default: output_dir from the config)')
    cmd.add_argument('--workers', type=int, help='Worker threads (default: config / EDIV_WORKERS)')
    cmd = pipeline.add_parser('report', help='Re-render CSV and figure from report.json')
    cmd.add_argument('run_dir', help='Run directory')
    cmd.add_argument('--no-figure', action='store_true', help='Skip the bar chart')

    return parser


def parse_arguments(argv=None):
    """Parse command line arguments"""
    return build_parser().parse_args(argv)


def run_command(args, logger) -> int:
    """Dispatch to the handler and map failures onto exit codes"""
    try:
        return dispatch(args)
    except (ConfigError, DatasetError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except StageError as e:
        logger.error(f"{e}")
        if isinstance(e.cause, (ConfigError, DatasetError)):
            return EXIT_CONFIG
        return EXIT_FAILURE
    except DOMAIN_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE
    except ValueError as e:
        logger.error(f"Invalid arguments: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        return EXIT_UNEXPECTED


def main(argv=None):
    """Main entry point"""
    args = parse_arguments(argv)
    logger = setup_logging(args.log_dir, args.verbose)
    logger.debug(f"Command: {args.group} {args.command}")
    sys.exit(run_command(args, logger))


if __name__ == "__main__":
    main()
