"""
Command-line interface: gen-data, train, match, refine, eval, check.

Numbers meant for scripts go to stdout as CSV; logs and progress bars go to
stderr. Exit codes: 0 success, 1 runtime or I/O failure, 2 bad arguments.
"""
import argparse
import logging
import os
import sys
from dataclasses import asdict
from typing import Dict, List, Optional

import numpy as np

import analysis
import checks
import matcher
import refine
from config import (MODEL_PRESETS, REFINE_PRESETS, apply_model_preset, apply_refine_preset, default_config,
                    load_config, resolve_threads, run_snapshot, save_config)
from data import ShapeSpec, generate_dataset, load_dataset, load_pair
from import_export import ResultExporter
from model import LRF_MODES, EquiShapeConfig
from storage import CloudFormatError, PairMismatchError, read_gt, read_xyz
from train import CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser(cfg: Optional[Dict[str, Dict[str, object]]] = None) -> argparse.ArgumentParser:
    """Parser whose defaults come from `cfg` (the built-in defaults unless --config overlays them)."""
    cfg = cfg or default_config()
    m, loss, tr, rf, d = cfg['model'], cfg['loss'], cfg['train'], cfg['refine'], cfg['data']
    ck = cfg['check']
    fmt = argparse.ArgumentDefaultsHelpFormatter

    parser = argparse.ArgumentParser(prog='equishape', description=__doc__.strip().splitlines()[0],
                                     formatter_class=fmt)
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='warnings only, no progress bars')
    parser.add_argument('--threads', type=int, default=None,
                        help='worker threads for pair-level work (EQLF_THREADS overrides; default: all cores)')
    parser.add_argument('--config', default=None, help='JSON file overlaid on the built-in defaults')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('gen-data', help='generate synthetic articulated shape pairs', formatter_class=fmt)
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--count', type=int, default=10, help='number of pairs')
    p.add_argument('--points', type=int, default=d['points'], help='points per shape')
    p.add_argument('--segments', type=int, default=d['segment_count'], help='capsule segments per shape')
    p.add_argument('--angle-range', type=float, default=d['joint_angle_range'],
                   help='max joint rotation in radians (in-distribution setting)')
    p.add_argument('--ood', action='store_true',
                   help=f"use the out-of-distribution joint range ({d['ood_joint_angle_range']})")
    p.add_argument('--no-global-transform', action='store_true', help='skip the random rigid motion of targets')
    p.add_argument('--seed', type=int, default=d['seed'])

    p = sub.add_parser('train', help='train a model on a pair manifest', formatter_class=fmt)
    p.add_argument('--manifest', required=True)
    p.add_argument('--epochs', type=int, default=tr['epochs'])
    p.add_argument('--batch', type=int, default=tr['batch_size'], help='pairs per batch (losses summed)')
    p.add_argument('--lr', type=float, default=tr['lr'], help='Adam learning rate')
    p.add_argument('--milestones', type=_ints, default=tr['lr_milestones'],
                   help='epochs where the lr is multiplied by --lr-factor')
    p.add_argument('--lr-factor', type=float, default=tr['lr_factor'])
    p.add_argument('--k', type=int, default=m['k'], help='kNN neighbours per point')
    p.add_argument('--layers', type=int, default=m['layers'], help='Cross-GVP layers')
    p.add_argument('--dim', type=int, default=m['dim'], help='scalar channels per node')
    p.add_argument('--preset', choices=sorted(MODEL_PRESETS), default=m['preset'], help='EdgeConv widths')
    p.add_argument('--lrf-mode', choices=LRF_MODES, default=m['lrf_mode'],
                   help='learned Cross-GVP frames or covariance frames')
    p.add_argument('--no-cross-attention', action='store_true', help='disable feature exchange between shapes')
    p.add_argument('--lambda-cc', type=float, default=loss['lambda_cc'], help='cross-construction weight')
    p.add_argument('--lambda-sc', type=float, default=loss['lambda_sc'], help='self-construction weight')
    p.add_argument('--lambda-m', type=float, default=loss['lambda_m'], help='mapping regularizer weight')
    p.add_argument('--k-latent', type=int, default=loss['k_latent'], help='latent neighbours per construction')
    p.add_argument('--alpha', type=float, default=loss['alpha'], help='mapping regularizer bandwidth')
    p.add_argument('--seed', type=int, default=tr['seed'])
    p.add_argument('--out', default='model.eqlf', help='checkpoint path')
    p.add_argument('--metrics', default=None, help='metrics CSV (default: next to the checkpoint)')
    p.add_argument('--plot', default=None, help='write per-epoch loss and accuracy curves (.png)')

    p = sub.add_parser('match', help='match two clouds with a trained model', formatter_class=fmt)
    p.add_argument('--model', required=True)
    p.add_argument('--src', required=True)
    p.add_argument('--tgt', required=True)
    p.add_argument('--out', default='corr.txt')
    p.add_argument('--export-colored', metavar='PREFIX', default=None,
                   help='also write PREFIX_src.xyz and PREFIX_tgt.xyz with matching colors')

    p = sub.add_parser('refine', help='test-time refinement of one pair', formatter_class=fmt)
    p.add_argument('--model', required=True)
    p.add_argument('--src')
    p.add_argument('--tgt')
    p.add_argument('--gt', help='ground truth, used by --compare')
    p.add_argument('--manifest', help='pairs to compare (with --compare)')
    presets = ', '.join(f"{name}={values['lr']}" for name, values in REFINE_PRESETS.items())
    p.add_argument('--preset', choices=sorted(REFINE_PRESETS), default=None, help=f"lr preset ({presets})")
    p.add_argument('--steps', type=int, default=None, help=f"optimization steps (default {rf['steps']})")
    p.add_argument('--lr', type=float, default=None, help=f"residual learning rate (default {rf['lr']})")
    p.add_argument('--strategy', choices=refine.STRATEGIES, default='lrf')
    p.add_argument('--out', default='corr.txt')
    p.add_argument('--trace', default='trace.csv')
    p.add_argument('--compare', action='store_true', help='score no-refine / lrf / coord on the same pairs')
    p.add_argument('--eps', type=float, default=0.05, help='tolerance used by --compare')

    p = sub.add_parser('eval', help='score a correspondence file', formatter_class=fmt)
    p.add_argument('--pred', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--tgt', required=True)
    p.add_argument('--eps', default='0.01,0.05', help='comma-separated tolerances in [0, 1]')
    p.add_argument('--plot', default=None, help='write an accuracy curve (.png or interactive .html)')

    p = sub.add_parser('check', help='run the equivariance / gradient property suites', formatter_class=fmt)
    p.add_argument('--suite', choices=checks.SUITES, default='all')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--trials', type=int, default=None,
                   help=f"random motions per frame check (default: {ck['equivariance_trials']})")
    p.add_argument('--invariance-trials', type=int, default=None,
                   help=f"random motions for the similarity check "
                        f"(default: --trials if given, else {ck['invariance_trials']})")
    p.add_argument('--points', type=int, default=ck['points'])
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format='%(levelname)s %(name)s: %(message)s', force=True)


def _print_csv(frame) -> None:
    sys.stdout.write(frame.to_csv(index=False, lineterminator='\n'))


# -- subcommands ----------------------------------------------------------
def cmd_gen_data(args, cfg) -> int:
    section = dict(cfg['data'])
    section.update(points=args.points, segment_count=args.segments, joint_angle_range=args.angle_range,
                   global_transform=not args.no_global_transform)
    spec = ShapeSpec.from_dict(section)
    if args.ood:
        spec = spec.ood()
    manifest, _ = generate_dataset(spec, args.count, args.seed, args.out, args.threads)
    print(manifest)
    return EXIT_OK


def _model_config(args, cfg) -> EquiShapeConfig:
    section = apply_model_preset(cfg['model'], args.preset)
    section.update(k=args.k, layers=args.layers, dim=args.dim, lrf_mode=args.lrf_mode, seed=args.seed)
    if args.no_cross_attention:
        section['cross_attention'] = False
    return EquiShapeConfig.from_dict(section)


def cmd_train(args, cfg) -> int:
    pairs = load_dataset(args.manifest, args.threads)
    config = TrainConfig(
        batch_size=args.batch, epochs=args.epochs, lr=args.lr, lr_milestones=tuple(args.milestones),
        lr_factor=args.lr_factor, val_fraction=float(cfg['train']['val_fraction']), seed=args.seed,
        threads=args.threads, model=_model_config(args, cfg),
        loss=matcher.LossConfig(args.lambda_cc, args.lambda_sc, args.lambda_m, args.k_latent, args.alpha))
    result = train(pairs, config, progress=not args.quiet)
    stem = os.path.splitext(args.out)[0]
    metrics = args.metrics or stem + '_metrics.csv'
    save_checkpoint(result.model, args.out, result.optimizer)
    ResultExporter.export_metrics(result.log, metrics)
    train_section = {'batch_size': config.batch_size, 'epochs': config.epochs, 'lr': config.lr,
                     'lr_milestones': list(config.lr_milestones), 'lr_factor': config.lr_factor,
                     'val_fraction': config.val_fraction, 'seed': config.seed}
    save_config(run_snapshot(cfg, train_section, config.model.to_dict(), asdict(config.loss)), stem + '_config.json')
    logger.info("Saved %s, %s and %s", args.out, metrics, stem + '_config.json')
    frame = ResultExporter.load_metrics(metrics)
    _print_csv(frame)
    if args.plot:
        analysis.save_training_plot(frame, args.plot)
    return EXIT_OK


def cmd_match(args, cfg) -> int:
    model = load_checkpoint(args.model)
    source, target = read_xyz(args.src), read_xyz(args.tgt)
    corr = matcher.predict(model, source, target)
    ResultExporter.export_correspondence(corr.match, args.out, corr.scores)
    if args.export_colored:
        ResultExporter.export_colored(source, target, corr.match,
                                      f"{args.export_colored}_src.xyz", f"{args.export_colored}_tgt.xyz")
    print("points,mean_score")
    print(f"{len(corr.match)},{float(np.mean(corr.scores)):.6f}")
    return EXIT_OK


def _refine_config(args, cfg) -> refine.RefineConfig:
    overrides = {}
    if args.steps is not None:
        overrides['steps'] = args.steps
    if args.lr is not None:
        overrides['lr'] = args.lr
    section = dict(cfg['refine'])
    if args.preset is not None:
        section = apply_refine_preset(section, args.preset)
    section.update(overrides)
    return refine.RefineConfig.from_dict(section)


def cmd_refine(args, cfg) -> int:
    model = load_checkpoint(args.model)
    config = _refine_config(args, cfg)
    loss_config = matcher.LossConfig.from_dict(cfg['loss'])
    if args.compare:
        pairs = load_dataset(args.manifest, args.threads) if args.manifest else [load_pair(args.src, args.tgt, args.gt)]
        frame = refine.compare_refinement(model, pairs, config, loss_config, args.eps, args.threads)
        _print_csv(refine.summarize_comparison(frame))
        return EXIT_OK
    source, target = read_xyz(args.src), read_xyz(args.tgt)
    result = refine.refine_pair(model, source, target, args.strategy, config, loss_config)
    ResultExporter.export_correspondence(result.correspondence.match, args.out, result.correspondence.scores)
    ResultExporter.export_trace(result.trace, args.trace)
    for message in result.warnings:
        logger.warning(message)
    print("strategy,steps,best_step,loss_initial,loss_best")
    print(f"{result.strategy},{config.steps},{result.best_step},{result.initial_loss:.10g},{result.best_loss:.10g}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    eps_list = analysis.parse_eps_list(args.eps)
    target = read_xyz(args.tgt)
    gt = read_gt(args.gt, target.n)
    pred = ResultExporter.import_correspondence(args.pred)
    if len(pred) != len(gt):
        raise PairMismatchError(f"{args.pred} has {len(pred)} matches but {args.gt} has {len(gt)} entries")
    if pred.size and pred.max() >= target.n:
        raise ValueError(f"{args.pred} refers to target index {pred.max()} but the target has {target.n} points")
    curve = analysis.accuracy_curve(pred, gt, target, eps_list)
    _print_csv(curve)
    print(f"err,{matcher.avg_error(pred, gt, target):.8f}")
    if args.plot:
        analysis.save_accuracy_plot(analysis.accuracy_curve(pred, gt, target), args.plot)
        logger.info("Wrote accuracy curve to %s", args.plot)
    return EXIT_OK


def cmd_check(args, cfg) -> int:
    ck = cfg['check']
    trials = args.trials if args.trials is not None else int(ck['equivariance_trials'])
    invariance = args.invariance_trials
    if invariance is None:
        invariance = args.trials if args.trials is not None else int(ck['invariance_trials'])
    report = checks.run_suite(args.suite, args.seed, trials, args.points, invariance)
    _print_csv(report.to_frame())
    if report.passed:
        logger.info("All %d checks passed in %.1fs", len(report.results), report.seconds)
        return EXIT_OK
    for failure in report.failures():
        print(f"FAILED {failure.name}: max error {failure.max_error:.3e} > {failure.tol:.0e} {failure.detail}",
              file=sys.stderr)
    return EXIT_FAILURE


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'match': cmd_match,
    'refine': cmd_refine,
    'eval': cmd_eval,
    'check': cmd_check,
}


def _validate(parser: argparse.ArgumentParser, args) -> None:
    if args.command == 'refine':
        if args.compare and not (args.manifest or (args.src and args.tgt)):
            parser.error("refine --compare needs --manifest or --src/--tgt")
        if not args.compare and not (args.src and args.tgt):
            parser.error("refine needs --src and --tgt")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")


def main(argv: Optional[List[str]] = None) -> int:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument('--config', default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config and not os.path.exists(known.config):
        print(f"equishape: config file not found: {known.config}", file=sys.stderr)
        return EXIT_FAILURE
    cfg = load_config(known.config) if known.config else default_config()

    parser = build_parser(cfg)
    try:
        args = parser.parse_args(argv)
        _validate(parser, args)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    configure_logging(args.verbose, args.quiet)
    args.threads = resolve_threads(args.threads, cfg)
    try:
        return COMMANDS[args.command](args, cfg)
    except TrainingDiverged as exc:
        logger.error("Training aborted: %s", exc)
    except (OSError, CheckpointError, CloudFormatError, PairMismatchError, ValueError) as exc:
        logger.error("%s", exc)
    return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
