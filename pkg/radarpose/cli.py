"""Command-line entry point: simulate, train, infer, eval and inspect.

Exit codes: 0 success, 1 usage or configuration error, 2 data or runtime error.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
import torch

from radarpose.config import load_config, setup_environment, write_run_record
from radarpose.errors import ConfigError, RadarPoseError
from radarpose.pose_core import NUM_JOINTS
from radarpose.radar_sim import MOTION_PRESETS, SCENE_PRESETS, RadarConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common():
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--config', help='JSON run config')
    parent.add_argument('--seed', type=int, help='random seed')
    parent.add_argument('--out', help='output directory')
    parent.add_argument('--verbose', action='store_true', help='debug logging')
    return parent


def build_parser():
    common = _common()
    parser = ArgumentParser(prog='radarpose', description='Radar pose refinement by conditional diffusion')
    sub = parser.add_subparsers(dest='command', parser_class=ArgumentParser)
    sub.required = True

    p = sub.add_parser('simulate', parents=[common], help='render a synthetic radar dataset')
    p.add_argument('--preset', '--presets', dest='presets', nargs='+', default=['walk'], choices=MOTION_PRESETS)
    p.add_argument('--scenes', nargs='+', default=['basic'], choices=sorted(SCENE_PRESETS))
    p.add_argument('--frames', type=int, default=200, help='frames per training sequence')
    p.add_argument('--test-frames', type=int, help='frames per test sequence (default frames/5)')
    p.add_argument('--train-subjects', type=int, default=1)
    p.add_argument('--test-subjects', type=int, default=1)
    p.add_argument('--n-max', type=int, help='points per padded frame')
    p.add_argument('--concat-window', type=int, help='frames merged per sample')

    p = sub.add_parser('train', parents=[common], help='train phase 1 or phase 2')
    p.add_argument('--phase', type=int, choices=(1, 2), required=True)
    p.add_argument('--dataset', help='dataset directory')
    p.add_argument('--epochs', type=int, help='epochs for the chosen phase')
    p.add_argument('--batch-size', type=int)
    p.add_argument('--profile', choices=('desk', 'full'))
    p.add_argument('--phase1', help='phase-1 checkpoint directory (phase 2 only)')
    p.add_argument('--disable', nargs='*', default=[], choices=('global', 'local', 'limb', 'temporal'),
                   help='condition modules to ablate')

    p = sub.add_parser('infer', parents=[common], help='refine poses for a dataset split')
    p.add_argument('--dataset', help='dataset directory')
    p.add_argument('--phase1', required=True, help='phase-1 checkpoint directory')
    p.add_argument('--phase2', required=True, help='phase-2 checkpoint directory')
    p.add_argument('--split', default='test')
    p.add_argument('--hypotheses', type=int, help='number of averaged hypotheses M')
    p.add_argument('--seeds', type=int, nargs='+', help='one prediction directory per seed')
    p.add_argument('--sampler', choices=('x0', 'beta-step'))
    p.add_argument('--disable', nargs='*', default=[], choices=('global', 'local', 'limb', 'temporal'))
    p.add_argument('--no-ema', action='store_true', help='use raw instead of EMA weights')

    p = sub.add_parser('eval', parents=[common], help='score predictions against ground truth')
    p.add_argument('--predictions', required=True, help='predictions directory (or one with seed-* runs)')
    p.add_argument('--dataset', help='dataset directory')
    p.add_argument('--split', help='split to score (default: the predicted split)')
    p.add_argument('--seeds', type=int, nargs='+', help='only these seed-* runs')

    p = sub.add_parser('inspect', parents=[common], help='dump manifests, checkpoints or attention')
    p.add_argument('path', help='dataset, checkpoint or run directory')
    p.add_argument('--dataset', help='dataset for attention dumps')
    p.add_argument('--split', default='test')
    p.add_argument('--frame', type=int, default=0)
    p.add_argument('--attention', action='store_true', help='dump GRC attention for one frame')
    p.add_argument('--efficiency', action='store_true', help='parameter counts and forward latency')
    return parser


def _overrides(args, **extra):
    values = {'seed': args.seed, 'out': args.out}
    if getattr(args, 'dataset', None):
        values['dataset'] = args.dataset
    for name in getattr(args, 'disable', None) or ():
        values[f'use_{name}'] = False
    values.update(extra)
    return values


def cmd_simulate(args):
    from radarpose.preprocess import DatasetManifest, simulate_dataset, write_dataset

    cfg = load_config(args.config, _overrides(args, n_max=args.n_max, concat_window=args.concat_window))
    out = args.out or cfg.out
    test_frames = args.test_frames or max(args.frames // 5, 2)
    base = cfg.seed * 100
    plan = {'train': [], 'test': []}
    for i in range(args.train_subjects):
        plan['train'] += [(p, s, base + i, args.frames) for p in args.presets for s in args.scenes]
    for i in range(args.test_subjects):
        plan['test'] += [(p, s, base + 50 + i, test_frames) for p in args.presets for s in args.scenes]

    manifest = DatasetManifest(n_max=cfg.n_max, concat_window=cfg.concat_window,
                               crop_half_extent=cfg.crop_half_extent, subsample_seed=cfg.seed)
    write_dataset(simulate_dataset(plan, manifest, RadarConfig()), manifest, out)
    write_run_record(out, 'simulate', cfg, [args.config],
                     {'presets': args.presets, 'scenes': args.scenes, 'frames': args.frames,
                      'test_frames': test_frames})
    return {'dataset': out, 'splits': {k: v['frames'] for k, v in manifest.splits.items()}}


def cmd_train(args):
    from radarpose.training import PHASE1_DIR, train_phase1, train_phase2

    epochs_key = f'epochs_phase{args.phase}'
    cfg = load_config(args.config, _overrides(args, profile=args.profile, batch_size=args.batch_size,
                                              **{epochs_key: args.epochs}))
    out = args.out or cfg.out
    if args.phase == 1:
        _, rows = train_phase1(cfg, out)
        inputs = [args.config, cfg.dataset]
    else:
        phase1 = args.phase1 or os.path.join(out, PHASE1_DIR)
        _, _, rows = train_phase2(cfg, phase1, out)
        inputs = [args.config, cfg.dataset, phase1]
    write_run_record(out, f'train --phase {args.phase}', cfg, inputs)
    return {'phase': args.phase, 'epochs': len(rows), 'final_loss': rows[-1]['loss'] if rows else None}


def cmd_infer(args):
    from radarpose.inference import infer

    cfg = load_config(args.config, _overrides(args, sampler=args.sampler, hypotheses=args.hypotheses))
    out = args.out or os.path.join(cfg.out, 'predictions')
    inputs = [args.config, cfg.dataset, args.phase1, args.phase2]
    if not args.seeds:
        index = infer(cfg, args.phase1, args.phase2, out, args.split, use_ema=not args.no_ema)
        write_run_record(out, 'infer', cfg, inputs)
        return {'predictions': out, 'frames': index['frames']}
    runs = {}
    for seed in args.seeds:
        run_dir = os.path.join(out, f'seed-{seed}')
        index = infer(cfg, args.phase1, args.phase2, run_dir, args.split, seed=seed, use_ema=not args.no_ema)
        write_run_record(run_dir, 'infer', cfg, inputs, {'seed': seed})
        runs[seed] = run_dir
    return {'predictions': runs, 'frames': index['frames']}


def _seed_runs(directory, seeds=None):
    if os.path.exists(os.path.join(directory, 'predictions.json')):
        return [directory]
    runs = sorted(d for d in os.listdir(directory) if d.startswith('seed-')) if os.path.isdir(directory) else []
    if seeds:
        runs = [d for d in runs if int(d.split('-', 1)[1]) in seeds]
    if not runs:
        raise ConfigError(f"{directory} holds no predictions")
    return [os.path.join(directory, d) for d in runs]


def cmd_eval(args):
    from radarpose.evaluation import evaluate, summarize_seeds, write_report

    cfg = load_config(args.config, _overrides(args))
    cfg.require_dataset()
    runs = _seed_runs(args.predictions, args.seeds)
    out = args.out or os.path.join(cfg.out, 'eval')
    reports = []
    for run in runs:
        report = evaluate(run, cfg.dataset, args.split)
        target = out if len(runs) == 1 else os.path.join(out, os.path.basename(run))
        write_report(report, target)
        reports.append(report)
    result = {'aggregate': reports[0].aggregate} if len(reports) == 1 else summarize_seeds(reports)
    if len(reports) > 1:
        with open(os.path.join(out, 'seeds.json'), 'w', encoding='utf-8') as f:
            json.dump(result, f, indent=2)
    write_run_record(out, 'eval', cfg, [args.config, cfg.dataset, *runs])
    return result


def parameter_counts(module):
    counts = {name: sum(p.numel() for p in child.parameters()) for name, child in module.named_children()}
    counts['total'] = sum(p.numel() for p in module.parameters())
    return counts


def _latency(fn, repeats=5):
    fn()
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats * 1000.0


@torch.no_grad()
def efficiency_report(path, n_points=256):
    """Parameter counts per submodule and mean forward latency (ms) on one random frame."""
    from radarpose.conditioning import GLOBAL_COND_DIM
    from radarpose.diffusion import FrameContext, make_schedule
    from radarpose.nn_core import load_checkpoint
    from radarpose.training import load_phase1, load_phase2

    _, _, manifest = load_checkpoint(path)
    torch.manual_seed(0)
    points = torch.randn(1, n_points, 6) * 0.3 + torch.tensor([0.0, 3.0, 0.0, 0.0, 0.0, 0.0])
    points[..., 4:] = points[..., 4:].abs()
    mask = torch.ones(1, n_points, dtype=torch.bool)
    center = torch.tensor([[0.0, 3.0, 0.0]])
    if manifest['kind'] == 'phase1':
        model, _ = load_phase1(path)
        return {'kind': 'phase1', 'parameters': parameter_counts(model),
                'latency_ms': {'encode': _latency(lambda: model.encoder(points, mask, center)),
                               'forward': _latency(lambda: model(points, mask, center))}}
    model, cfg = load_phase2(path)
    ctx = FrameContext(coarse=torch.zeros(1, NUM_JOINTS, 3),
                       joint_features=torch.zeros(1, NUM_JOINTS, cfg.joint_dim),
                       c_glo=torch.zeros(1, NUM_JOINTS, GLOBAL_COND_DIM),
                       history=torch.zeros(1, cfg.history, NUM_JOINTS, 3),
                       points=points, mask=mask, center=center)
    sched = make_schedule(cfg.diffusion_steps, cfg.schedule, cfg.beta_lo, cfg.beta_hi)
    denoise = model.make_denoise_fn(ctx)
    return {'kind': 'phase2', 'parameters': parameter_counts(model),
            'latency_ms': {'denoise_step': _latency(lambda: denoise(ctx.coarse, 1)),
                           'refine_frame': _latency(lambda: model.refine(ctx, sched, 1), repeats=2)}}


@torch.no_grad()
def attention_dump(path, dataset, split, frame):
    from radarpose.training import load_phase1, load_split

    model, _ = load_phase1(path)
    data = load_split(dataset, split)
    if not 0 <= frame < len(data):
        raise ConfigError(f"frame {frame} outside split '{split}' of {len(data)} frames")
    idx = torch.tensor([frame])
    _, _, _, attention = model(data.points[idx], data.mask[idx], data.centers[idx], return_attention=True)
    return {'frame': frame, 'split': split,
            'layers': [w[0].numpy().round(6).tolist() for w in attention]}


def cmd_inspect(args):
    from radarpose.nn_core import load_checkpoint
    from radarpose.preprocess import read_manifest

    path = args.path
    manifest_path = os.path.join(path, 'manifest.json')
    if not os.path.exists(manifest_path):
        raise ConfigError(f"{path} has no manifest.json")
    with open(manifest_path, 'r', encoding='utf-8') as f:
        raw = json.load(f)

    if 'tensors' in raw:
        state, ema, manifest = load_checkpoint(path)
        result = {'kind': manifest['kind'], 'step': manifest['step'], 'ema': ema is not None,
                  'tensors': {name: list(t.shape) for name, t in state.items()},
                  'parameters': int(sum(t.numel() for t in state.values()))}
        if args.efficiency:
            result['efficiency'] = efficiency_report(path)
        if args.attention:
            if not args.dataset:
                raise ConfigError("--attention needs --dataset")
            result['attention'] = attention_dump(path, args.dataset, args.split, args.frame)
    else:
        manifest = read_manifest(path)
        result = manifest.to_dict()

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, 'inspect.json'), 'w', encoding='utf-8') as f:
            json.dump(result, f, indent=2)
        write_run_record(args.out, 'inspect', None, [path])
    return result


COMMANDS = {
    'simulate': cmd_simulate,
    'train': cmd_train,
    'infer': cmd_infer,
    'eval': cmd_eval,
    'inspect': cmd_inspect,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    setup_environment(args.verbose)
    try:
        result = COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        return EXIT_USAGE
    except RadarPoseError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_DATA
    print(json.dumps(result, indent=2, default=_json_default))
    return EXIT_OK


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")
