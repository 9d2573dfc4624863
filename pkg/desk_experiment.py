"""End-to-end desk experiment: simulate, train both phases for three seeds, refine and score.

    python desk_experiment.py --out runs/desk [--epochs 30]

Records per-seed refined vs coarse MPJPE, limb-length spread and AKV in
``<out>/desk_experiment.json`` and exits non-zero when a check fails.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from radarpose.config import load_config, setup_environment, write_run_record
from radarpose.evaluation import evaluate, summarize_seeds, write_report
from radarpose.inference import infer
from radarpose.pose_core import NUM_LIMBS
from radarpose.preprocess import DatasetManifest, simulate_dataset, write_dataset
from radarpose.training import PHASE1_DIR, PHASE2_DIR, train_phase1, train_phase2

logger = logging.getLogger(__name__)

PRESETS = ('walk', 'raise-hand', 'kick')
TRAIN_FRAMES = 1500
TEST_FRAMES = 300
SEEDS = (0, 1, 2)
MIN_TIGHTER_LIMBS = 12


def build_dataset(cfg, out):
    per_train = TRAIN_FRAMES // len(PRESETS)
    per_test = TEST_FRAMES // len(PRESETS)
    plan = {
        'train': [(preset, 'basic', i, per_train) for i, preset in enumerate(PRESETS)],
        'test': [(preset, 'basic', 50 + i, per_test) for i, preset in enumerate(PRESETS)],
    }
    manifest = DatasetManifest(n_max=cfg.n_max, concat_window=cfg.concat_window,
                               crop_half_extent=cfg.crop_half_extent)
    write_dataset(simulate_dataset(plan, manifest), manifest, out)
    return out


def run_seed(seed, dataset, out, epochs=None):
    overrides = {'dataset': dataset, 'seed': seed, 'profile': 'desk'}
    if epochs:
        overrides.update(epochs_phase1=epochs, epochs_phase2=epochs)
    cfg = load_config(overrides=overrides)
    run_dir = os.path.join(out, f'seed-{seed}')

    start = time.perf_counter()
    train_phase1(cfg, run_dir)
    train_phase2(cfg, os.path.join(run_dir, PHASE1_DIR), run_dir)
    predictions = os.path.join(run_dir, 'predictions')
    infer(cfg, os.path.join(run_dir, PHASE1_DIR), os.path.join(run_dir, PHASE2_DIR), predictions)
    report = evaluate(predictions, dataset)
    write_report(report, os.path.join(run_dir, 'eval'))
    write_run_record(run_dir, 'desk_experiment', cfg, [dataset])
    logger.info(f"seed {seed} finished in {time.perf_counter() - start:.0f} s")
    return report


def seed_summary(report):
    agg = report.aggregate
    spread = {name: np.array([limb['std'] for limb in report.limbs[name]]) for name in ('refined', 'coarse')}
    return {
        'mpjpe': agg['mpjpe'],
        'coarse_mpjpe': agg['coarse_mpjpe'],
        'pa_mpjpe': agg['pa_mpjpe'],
        'coarse_pa_mpjpe': agg['coarse_pa_mpjpe'],
        'akv': agg['akv'],
        'coarse_akv': agg['coarse_akv'],
        'limbs_tighter': int(np.sum(spread['refined'] <= spread['coarse'])),
        'refines_mpjpe': agg['mpjpe'] < agg['coarse_mpjpe'],
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description='Desk-scale refinement experiment')
    parser.add_argument('--out', default=os.path.join('runs', 'desk'))
    parser.add_argument('--epochs', type=int, help='epochs per phase (default: desk profile)')
    parser.add_argument('--verbose', action='store_true')
    args = parser.parse_args(argv)
    setup_environment(args.verbose)

    dataset = os.path.join(args.out, 'data')
    if not os.path.exists(os.path.join(dataset, 'manifest.json')):
        build_dataset(load_config(overrides={'profile': 'desk'}), dataset)
    else:
        logger.info(f"reusing dataset {dataset}")

    reports = [run_seed(seed, dataset, args.out, args.epochs) for seed in SEEDS]
    seeds = {seed: seed_summary(r) for seed, r in zip(SEEDS, reports)}
    summary = summarize_seeds(reports)
    checks = {
        'refined_mpjpe_below_coarse_every_seed': all(s['refines_mpjpe'] for s in seeds.values()),
        'limbs_tighter': summary['limbs_tighter'],
        'limbs_tighter_at_least': MIN_TIGHTER_LIMBS,
        'refined_akv_not_above_coarse': summary['akv']['mean'] <= summary['coarse_akv']['mean'],
    }
    passed = (checks['refined_mpjpe_below_coarse_every_seed']
              and checks['limbs_tighter'] >= MIN_TIGHTER_LIMBS
              and checks['refined_akv_not_above_coarse'])

    result = {'seeds': seeds, 'summary': summary, 'checks': checks, 'passed': passed}
    with open(os.path.join(args.out, 'desk_experiment.json'), 'w', encoding='utf-8') as f:
        json.dump(result, f, indent=2)

    for seed, s in seeds.items():
        print(f"seed {seed}: MPJPE {s['mpjpe']:.2f} mm (coarse {s['coarse_mpjpe']:.2f}), "
              f"AKV {s['akv']:.6f} (coarse {s['coarse_akv']:.6f}), "
              f"limbs tighter {s['limbs_tighter']}/{NUM_LIMBS}")
    print(f"{'PASSED' if passed else 'FAILED'}: {json.dumps(checks)}")
    return 0 if passed else 1


if __name__ == '__main__':
    sys.exit(main())
