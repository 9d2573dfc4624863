"""Evaluation reports: MPJPE, PA-MPJPE, AKV and limb-length statistics per scene."""

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from radarpose.errors import EvaluationError
from radarpose.inference import read_predictions
from radarpose.pose_core import H36M_TOPOLOGY, NUM_LIMBS, akv, limb_lengths_array, mpjpe, pa_mpjpe
from radarpose.preprocess import read_manifest, read_split

logger = logging.getLogger(__name__)

FRAME_METRICS = ('mpjpe', 'pa_mpjpe', 'coarse_mpjpe', 'coarse_pa_mpjpe')
HISTOGRAM_BINS = 20


@dataclass
class EvalReport:
    scenes: dict
    aggregate: dict
    limbs: dict
    frames: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {'metadata': self.metadata, 'aggregate': self.aggregate,
                'scenes': self.scenes, 'limbs': self.limbs}


def limb_statistics(poses, topo=H36M_TOPOLOGY, bins=HISTOGRAM_BINS, upper=None):
    """Per-limb mean, std and histogram of the limb lengths of (F, 17, 3) poses."""
    lengths = limb_lengths_array(poses, topo)
    upper = upper or float(lengths.max()) or 1.0
    stats = []
    for e in range(NUM_LIMBS):
        counts, edges = np.histogram(lengths[:, e], bins=bins, range=(0.0, upper))
        stats.append({
            'limb': topo.limb_name(e),
            'mean': float(lengths[:, e].mean()),
            'std': float(lengths[:, e].std()),
            'histogram': {'counts': counts.tolist(), 'edges': edges.tolist()},
        })
    return stats


def _sequence_akv(poses, sequences):
    """Sum of squared steps and number of steps over sequences with at least two frames."""
    total, steps = 0.0, 0
    for seq in sequences:
        chunk = poses[seq['start']:seq['start'] + seq['frames']]
        if len(chunk) < 2:
            continue
        total += akv(chunk) * (len(chunk) - 1)
        steps += len(chunk) - 1
    return total, steps


def _weighted(values, weights):
    weights = np.asarray(weights, dtype=np.float64)
    return float(np.dot(values, weights) / weights.sum()) if weights.sum() else float('nan')


def evaluate_arrays(refined, coarse, gt, sequences, metadata=None):
    """Build a report from prediction and ground-truth arrays.

    ``sequences`` lists ``{name, scene, frames}`` in frame order.
    """
    if len(refined) != len(gt) or len(coarse) != len(gt):
        raise EvaluationError(f"prediction frame count {len(refined)} does not match ground truth count {len(gt)}")
    start = 0
    for seq in sequences:
        seq['start'] = start
        start += seq['frames']
    if start != len(gt):
        raise EvaluationError(f"sequence frames sum to {start} but the split has {len(gt)} frames")

    frames = []
    for seq in sequences:
        for t in range(seq['frames']):
            g = seq['start'] + t
            frames.append({
                'frame': g, 'sequence': seq['name'], 'scene': seq['scene'],
                'mpjpe': mpjpe(refined[g], gt[g]),
                'pa_mpjpe': pa_mpjpe(refined[g], gt[g]),
                'coarse_mpjpe': mpjpe(coarse[g], gt[g]),
                'coarse_pa_mpjpe': pa_mpjpe(coarse[g], gt[g]),
            })

    scenes = {}
    for scene in sorted({s['scene'] for s in sequences}):
        members = [s for s in sequences if s['scene'] == scene]
        rows = [r for r in frames if r['scene'] == scene]
        summary = {'frames': len(rows)}
        for metric in FRAME_METRICS:
            summary[metric] = float(np.mean([r[metric] for r in rows]))
        for name, poses in (('akv', refined), ('coarse_akv', coarse)):
            total, steps = _sequence_akv(poses, members)
            summary[name] = total / steps if steps else float('nan')
        scenes[scene] = summary

    weights = [s['frames'] for s in scenes.values()]
    aggregate = {'frames': len(frames)}
    for metric in FRAME_METRICS + ('akv', 'coarse_akv'):
        aggregate[metric] = _weighted([s[metric] for s in scenes.values()], weights)

    upper = float(max(limb_lengths_array(a).max() for a in (refined, coarse, gt))) or 1.0
    limbs = {name: limb_statistics(poses, upper=upper)
             for name, poses in (('refined', refined), ('coarse', coarse), ('ground_truth', gt))}
    return EvalReport(scenes, aggregate, limbs, frames, metadata or {})


def evaluate(predictions_dir, dataset_dir, split=None):
    index, refined, coarse = read_predictions(predictions_dir)
    split = split or index['split']
    manifest = read_manifest(dataset_dir)
    sequences = read_split(dataset_dir, split, manifest)
    if not sequences:
        raise EvaluationError(f"split '{split}' of {dataset_dir} is empty")
    gt = np.concatenate([s.poses for s in sequences])
    if index['frames'] != len(gt):
        raise EvaluationError(f"predictions in {predictions_dir} hold {index['frames']} frames "
                              f"but split '{split}' of {dataset_dir} holds {len(gt)}")
    info = [{'name': s.name, 'scene': s.scene, 'frames': len(s)} for s in sequences]
    metadata = {'predictions': predictions_dir, 'dataset': dataset_dir, 'split': split,
                'seed': index.get('seed'), 'hypotheses': index.get('hypotheses'),
                'sampler': index.get('sampler'), 'ablation': index.get('ablation')}
    report = evaluate_arrays(refined.astype(np.float64), coarse.astype(np.float64),
                             gt.astype(np.float64), info, metadata)
    logger.info(f"split '{split}': MPJPE {report.aggregate['mpjpe']:.2f} mm "
                f"(coarse {report.aggregate['coarse_mpjpe']:.2f} mm), "
                f"PA-MPJPE {report.aggregate['pa_mpjpe']:.2f} mm")
    return report


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, 'report.json'), 'w', encoding='utf-8') as f:
        json.dump(report.to_dict(), f, indent=2)
    with open(os.path.join(out_dir, 'frames.csv'), 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=['frame', 'sequence', 'scene', *FRAME_METRICS])
        writer.writeheader()
        writer.writerows(report.frames)
    logger.info(f"wrote evaluation report to {out_dir}")


def summarize_seeds(reports):
    """Mean and standard deviation of the aggregate metrics across seeded runs."""
    if not reports:
        raise EvaluationError("no reports to summarize")
    summary = {'seeds': [r.metadata.get('seed') for r in reports]}
    for metric in FRAME_METRICS + ('akv', 'coarse_akv'):
        values = np.array([r.aggregate[metric] for r in reports])
        summary[metric] = {'mean': float(values.mean()), 'std': float(values.std())}
    std = {name: np.mean([[l['std'] for l in r.limbs[name]] for r in reports], axis=0)
           for name in ('refined', 'coarse')}
    summary['limbs_tighter'] = int(np.sum(std['refined'] <= std['coarse']))
    return summary
