from flask import Flask, request, jsonify
from flask_cors import CORS
import os
import sys
import threading
import traceback
import logging
from dotenv import load_dotenv
from werkzeug.exceptions import HTTPException

import numpy as np
import torch

# Load environment variables
load_dotenv()

# Configure logging
logging.basicConfig(
    level=getattr(logging, os.getenv('RADARPOSE_LOG_LEVEL', 'INFO').upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

# Ensure the repository root is in Python path
root_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if root_dir not in sys.path:
    sys.path.insert(0, root_dir)
    logger.info(f"Added {root_dir} to Python path")

from radarpose import __version__
from radarpose.diffusion import FrameContext, make_schedule
from radarpose.errors import ConfigError, InvalidPoseError, RadarPoseError
from radarpose.pose_core import H36M_TOPOLOGY, NUM_JOINTS, Pose, limb_lengths, mpjpe, pa_mpjpe
from radarpose.preprocess import pad_to
from radarpose.radar_sim import PointCloudFrame
from radarpose.training import load_phase1, load_phase2

app = Flask(__name__)
CORS(app)

_models = {}
_models_lock = threading.Lock()


def get_models():
    """Load both checkpoints named in the environment once per process."""
    with _models_lock:
        if not _models:
            phase1_dir = os.getenv('RADARPOSE_PHASE1_CHECKPOINT')
            phase2_dir = os.getenv('RADARPOSE_PHASE2_CHECKPOINT')
            if not phase1_dir or not phase2_dir:
                return None
            phase1, phase1_cfg = load_phase1(phase1_dir)
            phase2, phase2_cfg = load_phase2(phase2_dir)
            _models.update(phase1=phase1, phase1_cfg=phase1_cfg, phase2=phase2, phase2_cfg=phase2_cfg,
                           sched=make_schedule(phase2_cfg.diffusion_steps, phase2_cfg.schedule,
                                               phase2_cfg.beta_lo, phase2_cfg.beta_hi))
            logger.info(f"Loaded checkpoints {phase1_dir} and {phase2_dir}")
        return _models


def _pose(data, key):
    if key not in data:
        raise InvalidPoseError(f"missing '{key}'")
    return Pose(np.asarray(data[key], dtype=np.float64))


@app.errorhandler(404)
def not_found(e):
    return jsonify({'error': 'Not found'}), 404


@app.errorhandler(RadarPoseError)
def handle_radarpose_error(e):
    logger.warning(f"Rejected request: {e}")
    return jsonify({'error': str(e)}), 400


@app.errorhandler(Exception)
def handle_unexpected(e):
    if isinstance(e, HTTPException):
        return jsonify({'error': e.description}), e.code
    logger.error(f"Unexpected error: {e}")
    logger.error(traceback.format_exc())
    return jsonify({'error': 'Internal server error'}), 500


@app.route('/api/health', methods=['GET'])
def health():
    return jsonify({
        'status': 'ok',
        'version': __version__,
        'checkpoints_configured': bool(os.getenv('RADARPOSE_PHASE1_CHECKPOINT') and os.getenv('RADARPOSE_PHASE2_CHECKPOINT')),
    })


@app.route('/api/metrics', methods=['POST'])
def metrics():
    data = request.get_json(silent=True)
    if not data or 'pred' not in data or 'gt' not in data:
        return jsonify({'error': 'Both pred and gt poses are required'}), 400

    pred = _pose(data, 'pred')
    gt = _pose(data, 'gt')
    return jsonify({
        'mpjpe': mpjpe(pred, gt),
        'pa_mpjpe': pa_mpjpe(pred, gt),
        'limbs': [H36M_TOPOLOGY.limb_name(e) for e in range(len(H36M_TOPOLOGY.edges))],
        'limb_lengths': {
            'pred': limb_lengths(pred).lengths.tolist(),
            'gt': limb_lengths(gt).lengths.tolist(),
        },
    })


@app.route('/api/refine', methods=['POST'])
def refine():
    data = request.get_json(silent=True)
    if not data or 'points' not in data or 'center' not in data:
        return jsonify({'error': 'points and center are required'}), 400

    models = get_models()
    if models is None:
        return jsonify({'error': 'Refinement checkpoints not configured'}), 500

    cfg = models['phase1_cfg']
    frame = PointCloudFrame(np.asarray(data['points'], dtype=np.float64))
    padded = pad_to(frame, cfg.n_max, seed=int(data.get('seed', 0)))
    center = np.asarray(data['center'], dtype=np.float64)
    if center.shape != (3,):
        raise ConfigError(f"center must be a 3-vector, got shape {center.shape}")

    points = torch.tensor(padded.points, dtype=torch.float32)[None]
    mask = torch.tensor(padded.valid_mask)[None]
    center_t = torch.tensor(center, dtype=torch.float32)[None]
    with torch.no_grad():
        coarse, joint_features, c_glo = models['phase1'](points, mask, center_t)

    history = data.get('history') or []
    history = [Pose(np.asarray(h, dtype=np.float64)).joints for h in history] or [coarse[0].numpy()]
    ctx = FrameContext(coarse=coarse, joint_features=joint_features, c_glo=c_glo,
                       history=torch.tensor(np.stack(history), dtype=torch.float32)[None],
                       points=points, mask=mask, center=center_t)
    phase2 = models['phase2']
    hypotheses = int(data.get('hypotheses', models['phase2_cfg'].hypotheses))
    _, refined = phase2.refine(ctx, models['sched'], hypotheses, seed=int(data.get('seed', 0)),
                               mode=models['phase2_cfg'].sampler)
    refined = refined - refined[:, :1]
    return jsonify({
        'coarse': coarse[0].tolist(),
        'refined': refined[0].tolist(),
        'joints': NUM_JOINTS,
        'n_valid': padded.n_valid,
    })


if __name__ == '__main__':
    app.run(debug=False, port=int(os.getenv('PORT', '5000')))
