"""
SigTraj - Gradient Check Suite
Finite-difference checks for every primitive, layer, graph block and the miniature end-to-end model
"""

import logging
import time
from dataclasses import replace

import numpy as np

from bdg import (
    LIGHT_FEATURES, BehaviorBlock, BehaviorHistory, LightSequenceFeature, encode_lights,
    encode_lights_lstm, fuse, temporal_update,
)
from data_model import LightState, Maneuver, window_from_arrays
from nn_layers import AttentionHead, LinearLayer, LstmCell, MlpEncoder
from predictor import HyperParams, TrajectoryModel, bce_with_logits, noise_for, variety_loss
from sdg import build_adjacency, spatial_aggregate
from tensor_core import (
    Tensor, concat, embed, expand, get_default_dtype, grad_check_tensors, l2norm, leaky_relu,
    matmul, mul, reduce_mean, reduce_sum, reshape, set_default_dtype, sigmoid, softmax, softplus,
    take_slice, tanh, transpose,
)
from trainer import generator_objective

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4

MINIATURE = HyperParams(
    embed_dim=4, hidden_dim=8, input_dim=8, attn_dim=8, obs_len=3, pred_len=2, k_window=2,
    noise_dim=2, K=2, batch=1, seed=3,
)


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _scalarize(y, rng):
    """Random linear functional so every output entry carries a distinct weight"""
    return reduce_sum(mul(y, Tensor(rng.normal(size=y.shape))))


def miniature_window(rng, obs_len=3, pred_len=2):
    """Two same-direction agents a few pixels apart with mixed light context"""
    start = np.array([[100.0, 200.0], [112.0, 230.0]])
    step = np.array([[0.0, -9.0], [1.0, -7.0]])
    frames = np.arange(obs_len + pred_len)[None, :, None]
    track = start[:, None, :] + frames * step[:, None, :] + rng.integers(-2, 3, size=(2, obs_len + pred_len, 2))
    states = [LightState.RED, LightState.YELLOW, LightState.GREEN]
    contexts = [
        [
            {
                "in_influence_area": bool(t % 2), "head_of_queue": bool(t % 2 and i == 0),
                "maneuver": Maneuver.LEFT if i else Maneuver.STRAIGHT,
                "light_state": states[(t + i) % 3], "light_remaining": float(5 + 3 * t + i),
            }
            for t in range(obs_len)
        ]
        for i in range(2)
    ]
    return window_from_arrays(track[:, :obs_len], track[:, obs_len:], lane_ids=[3, 4], contexts=contexts)


MAX_DIM = 16


def _dims(rng, count, low=1):
    """Random sizes in [low, MAX_DIM], drawn from the suite rng"""
    return [int(d) for d in rng.integers(low, MAX_DIM + 1, size=count)]


def _row_mask(rng, rows, cols):
    """Random boolean mask with at least one open entry per row"""
    mask = rng.random((rows, cols)) < 0.6
    mask[np.arange(rows), rng.integers(0, cols, size=rows)] = True
    return mask


def primitive_checks(rng):
    r, c, q, n = _dims(rng, 4)
    a, b = _param(rng, r, c), _param(rng, c, q)
    v = _param(rng, n)
    table = _param(rng, *_dims(rng, 2))
    indices = [int(i) for i in rng.integers(0, table.shape[0], size=_dims(rng, 1)[0])]
    mask = _row_mask(rng, r, c)
    width = r + q
    cols = _dims(rng, 1)[0]
    return [
        ("matmul", lambda: _scalarize(matmul(a, b), rng_fixed(1)), [a, b]),
        ("softmax.masked", lambda: _scalarize(softmax(a, mask=mask), rng_fixed(2)), [a]),
        ("leaky_relu", lambda: _scalarize(leaky_relu(a, 0.2), rng_fixed(3)), [a]),
        ("sigmoid+tanh", lambda: _scalarize(mul(sigmoid(a), tanh(a)), rng_fixed(4)), [a]),
        ("softplus", lambda: reduce_mean(softplus(v)), [v]),
        ("l2norm", lambda: _scalarize(l2norm(a), rng_fixed(5)), [a]),
        ("concat+slice", lambda: _scalarize(take_slice(concat([transpose(a), b]), width // 3, width), rng_fixed(6)), [a, b]),
        ("embed", lambda: _scalarize(embed(table, indices), rng_fixed(7)), [table]),
        ("reshape+expand", lambda: _scalarize(expand(reshape(v, (n, 1)), (n, cols)), rng_fixed(8)), [v]),
    ]


def rng_fixed(seed):
    return np.random.default_rng(1000 + seed)


def layer_checks(rng):
    rows, d_in, d_out, hidden, attn, m, d_mid = _dims(rng, 7)
    lin = LinearLayer(d_in, d_out, rng)
    cell = LstmCell(d_in, hidden, rng)
    head = AttentionHead(hidden, attn, rng)
    mlp = MlpEncoder([d_in, d_mid, d_out], rng)
    x = Tensor(rng.normal(size=(rows, d_in)))
    h0, c0 = Tensor(rng.normal(size=(rows, hidden))), Tensor(rng.normal(size=(rows, hidden)))
    keys = Tensor(rng.normal(size=(m, hidden)))
    mask = _row_mask(rng, rows, m)

    def lstm_two_steps():
        h, c = cell.step(h0, c0, x)
        h, c = cell.step(h, c, x)
        return _scalarize(concat([h, c]), rng_fixed(11))

    return [
        ("LinearLayer", lambda: _scalarize(lin(x), rng_fixed(10)), lin.parameters()),
        ("LstmCell", lstm_two_steps, cell.parameters()),
        ("AttentionHead.attend", lambda: _scalarize(head.attend(h0, keys, mask), rng_fixed(12)), head.parameters()),
        ("MlpEncoder", lambda: _scalarize(mlp(x), rng_fixed(13)), mlp.parameters()),
    ]


def graph_checks(rng, window):
    hidden = 6
    head = AttentionHead(hidden, 5, rng)
    h = Tensor(rng.normal(size=(2, hidden)), requires_grad=True)
    mask = build_adjacency(window.frame_records(window.obs_len - 1), [[0.0, -1.0], [0.0, -1.0]])

    block = BehaviorBlock(4, 5, rng)
    fuse_layer = LinearLayer(8, 4, rng)
    hs_seq = [Tensor(rng.normal(size=(2, 4))) for _ in range(3)]
    lh_seq = [Tensor(rng.normal(size=(2, 4))) for _ in range(3)]

    def behavior_window():
        history = BehaviorHistory(2)
        out = None
        for hs, lh in zip(hs_seq, lh_seq):
            out = temporal_update(fuse(hs, lh, fuse_layer), history, block)
        return _scalarize(out, rng_fixed(21))

    seq = LightSequenceFeature(rng.normal(size=(2, 3, LIGHT_FEATURES)))
    enc = MlpEncoder([3 * LIGHT_FEATURES, 6, 4], rng)
    light_cell = LstmCell(LIGHT_FEATURES, 4, rng)

    return [
        ("spatial_aggregate", lambda: _scalarize(spatial_aggregate(h, mask, head), rng_fixed(20)), [h] + head.parameters()),
        ("temporal_update", behavior_window, block.parameters() + fuse_layer.parameters()),
        ("encode_lights", lambda: _scalarize(encode_lights(seq.upto(1), enc), rng_fixed(22)), enc.parameters()),
        ("encode_lights_lstm", lambda: _scalarize(encode_lights_lstm(seq, light_cell), rng_fixed(23)), light_cell.parameters()),
    ]


def loss_checks(rng):
    preds = Tensor(rng.normal(size=(3, 2, 2, 2)) * 4.0, requires_grad=True)
    gt = rng.normal(size=(2, 2, 2)) * 4.0
    logits = Tensor(rng.normal(size=(5,)), requires_grad=True)
    return [
        ("variety_loss.norm", lambda: variety_loss(gt, preds, "norm"), [preds]),
        ("variety_loss.stepsum", lambda: variety_loss(gt, preds, "stepsum"), [preds]),
        ("bce", lambda: bce_with_logits(logits, 1) + bce_with_logits(logits, 0) * 0.5, [logits]),
    ]


def model_checks(window):
    checks = []
    for label, hp in (("generator.full", MINIATURE),
                      ("generator.ablated", replace(MINIATURE, spatial="gat", behavior="lstm", light_enc="lstm"))):
        model = TrajectoryModel(hp)
        noise = noise_for(window.num_agents, hp.K, hp.noise_dim, hp.seed)
        checks.append((label, lambda m=model, z=noise: generator_objective(m, window, z)[0], _model_params(model)))
    return checks


def _model_params(model):
    return list(model.named_parameters().values())


def run_suite(max_probes=16, seed=0, tolerance=TOLERANCE):
    """Run every check in float64; returns a list of GradReport"""
    previous = get_default_dtype()
    set_default_dtype("float64")
    started = time.time()
    try:
        rng = np.random.default_rng(seed)
        window = miniature_window(rng)
        checks = primitive_checks(rng) + layer_checks(rng) + graph_checks(rng, window)
        checks += loss_checks(rng) + model_checks(window)
        reports = []
        for label, f, tensors in checks:
            report = grad_check_tensors(f, tensors, tolerance=tolerance, max_probes=max_probes, seed=seed, label=label)
            status = "✅" if report.ok else "❌"
            logger.info(f"{status} gradcheck {label}: max rel err {report.max_rel_err:.2e} over {report.checked} probes")
            reports.append(report)
    finally:
        set_default_dtype(np.dtype(previous).name)
    logger.info(f"⏱️  gradcheck suite finished in {time.time() - started:.1f}s")
    return reports
