"""
SigTraj - Behavior Dependency Graph
Windowed temporal attention over each agent's own past states, traffic-light encoding and fusion
"""

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from data_model import LightState, Maneuver
from nn_layers import AttentionHead, Layer, LinearLayer
from tensor_core import (
    Tensor, TensorError, add, concat, expand, leaky_relu, mul,
    softmax, stack_cols, take_slice,
)

logger = logging.getLogger(__name__)

LIGHT_FEATURES = 9
LT_SCALE = 0.1

_LIGHT_ORDER = (LightState.RED, LightState.GREEN, LightState.YELLOW)
_MANEUVER_ORDER = (Maneuver.STRAIGHT, Maneuver.LEFT, Maneuver.RIGHT)


def record_light_vector(record):
    """one-hot(ls) + lt/10 + pa + f + one-hot(mb)"""
    vec = np.zeros(LIGHT_FEATURES)
    vec[_LIGHT_ORDER.index(record.light_state)] = 1.0
    vec[3] = record.light_remaining * LT_SCALE
    vec[4] = float(record.in_influence_area)
    vec[5] = float(record.head_of_queue)
    vec[6 + _MANEUVER_ORDER.index(record.maneuver)] = 1.0
    return vec


@dataclass(eq=False)
class LightSequenceFeature:
    """(N, obs_len, 9) light context per agent per observed frame"""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != LIGHT_FEATURES:
            raise TensorError(f"light sequence must be (N, T, {LIGHT_FEATURES}), got {self.values.shape}")

    @property
    def num_agents(self):
        return self.values.shape[0]

    @property
    def steps(self):
        return self.values.shape[1]

    def upto(self, t):
        """Copy with frames after t zeroed"""
        masked = self.values.copy()
        masked[:, t + 1:] = 0.0
        return LightSequenceFeature(masked)

    def flat(self):
        return self.values.reshape(self.num_agents, -1)


def light_features(window, causal_upto=None):
    """Serialize the light context of every observed frame of a window"""
    values = np.array([[record_light_vector(r) for r in seq] for seq in window.obs])
    feature = LightSequenceFeature(values)
    return feature if causal_upto is None else feature.upto(causal_upto)


def _as_input(seq):
    if isinstance(seq, LightSequenceFeature):
        return Tensor(seq.flat())
    return seq if isinstance(seq, Tensor) else Tensor(seq)


def encode_lights(seq, enc):
    """lh = MLP(LS, W_M); no recurrence across frames"""
    x = _as_input(seq)
    if x.shape[-1] != enc.in_dim:
        raise TensorError(f"encode_lights: feature length {x.shape[-1]} vs encoder input {enc.in_dim}")
    return enc(x)


def encode_lights_lstm(seq, cell):
    """LSTM light encoder: consumes the 9 features frame by frame, returns the last hidden state"""
    if not isinstance(seq, LightSequenceFeature):
        raise TensorError("encode_lights_lstm: expects a LightSequenceFeature")
    if cell.in_dim != LIGHT_FEATURES:
        raise TensorError(f"encode_lights_lstm: cell input {cell.in_dim} vs {LIGHT_FEATURES} features")
    h, c = cell.zero_state(seq.num_agents)
    for t in range(seq.steps):
        h, c = cell.step(h, c, Tensor(seq.values[:, t, :]))
    return h


def fuse(hs, lh, layer):
    """H~L = W_l (hs || lh) + b"""
    if hs.shape[:-1] != lh.shape[:-1]:
        raise TensorError(f"fuse: hs {hs.shape} and lh {lh.shape} disagree on leading dims")
    return layer(concat([hs, lh]))


# === TEMPORAL ATTENTION ===

class BehaviorHistory:
    """Ring buffer of the last k post-update states, oldest first"""

    def __init__(self, k):
        if k < 1:
            raise TensorError(f"history capacity k must be >= 1, got {k}")
        self.k = k
        self.t = 0
        self._entries = deque(maxlen=k)

    def __len__(self):
        return len(self._entries)

    def entries(self):
        """States t' with t - k <= t' < t and t' >= 0"""
        return [(tp, s) for tp, s in self._entries if self.t - self.k <= tp < self.t]

    def push(self, state):
        self._entries.append((self.t, state))
        self.t += 1


class BehaviorBlock(Layer):
    """Scoring head W/beta plus the value map over [entry || current]"""

    _children = ("head", "value")

    def __init__(self, dim, attn_dim, rng):
        self.dim = dim
        self.head = AttentionHead(dim, attn_dim, rng)
        self.value = LinearLayer(2 * dim, dim, rng)


def temporal_weights(current, keys, head):
    """(N, M) softmax over keys of LeakyReLU(beta_q . W current + beta_k . W key_m)"""
    n = current.shape[0]
    q = head.query_scores(current)
    cols = [head.key_scores(k) for k in keys]
    logits = leaky_relu(add(stack_cols([q] * len(keys)), stack_cols(cols)), head.leaky_slope)
    weights = softmax(logits)
    if weights.shape != (n, len(keys)):
        raise TensorError(f"temporal_weights: got {weights.shape}")
    return weights


def temporal_update(current, history, block):
    """hb_t = sum_m a_m * value(key_m || current) over the k-window plus the current state.

    `current` is (N, D); the output is pushed onto `history`.
    """
    if current.ndim != 2 or current.shape[1] != block.dim:
        raise TensorError(f"temporal_update: current {current.shape}, expected (N, {block.dim})")
    keys = [state for _, state in history.entries()] + [current]
    for key in keys:
        if key.shape != current.shape:
            raise TensorError(f"temporal_update: history entry {key.shape} vs current {current.shape}")
    weights = temporal_weights(current, keys, block.head)
    n, d = current.shape
    out = None
    for m, key in enumerate(keys):
        w = expand(take_slice(weights, m, m + 1, axis=1), (n, d))
        term = mul(w, block.value(concat([key, current])))
        out = term if out is None else add(out, term)
    history.push(out)
    return out


def chain_update(current, state, cell):
    """LSTM-chain behavior path: state is (h, c); returns (h_new, (h_new, c_new))"""
    h, c = state
    h, c = cell.step(h, c, current)
    return h, (h, c)

