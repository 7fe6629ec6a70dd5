"""
SigTraj - Predictor
Model assembly: per-frame encoding, spatial/behavior graphs, light fusion, decoder, discriminator, losses
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from bdg import (
    LIGHT_FEATURES, BehaviorBlock, BehaviorHistory, LightSequenceFeature, chain_update,
    encode_lights, encode_lights_lstm, fuse, light_features, temporal_update,
)
from data_model import to_relative
from nn_layers import (
    AttentionHead, Layer, LinearLayer, LstmCell, MlpEncoder, assign_parameters,
    embed_position, load_parameters, save_parameters,
)
from sdg import SdgParams, build_adjacency, headings_from_positions, spatial_aggregate
from settings import ConfigError, canonical_json, config_hash
from tensor_core import (
    Tensor, TensorError, add, as_tensor, concat, l2norm, matmul, mul, no_grad,
    reduce_mean, reduce_sum, reshape, scalar_mul, sigmoid, softplus, sub, transpose,
)

logger = logging.getLogger(__name__)

SPATIAL_MODES = ("sdg", "gat")
BEHAVIOR_MODES = ("bdg", "lstm")
LIGHT_ENCODERS = ("mlp", "lstm")
VARIETY_MODES = ("norm", "stepsum")

ABLATIONS = {
    "Sg+Bl+TLm+D": {"spatial": "gat", "behavior": "lstm", "light_enc": "mlp", "discriminator": True},
    "Sg+Bb+TLm+D": {"spatial": "gat", "behavior": "bdg", "light_enc": "mlp", "discriminator": True},
    "Ss+Bl+TLm+D": {"spatial": "sdg", "behavior": "lstm", "light_enc": "mlp", "discriminator": True},
    "Ss+Bb+TLl+D": {"spatial": "sdg", "behavior": "bdg", "light_enc": "lstm", "discriminator": True},
    "Ss+Bb+TLm": {"spatial": "sdg", "behavior": "bdg", "light_enc": "mlp", "discriminator": False},
    "Ss+Bb+TLm+D": {"spatial": "sdg", "behavior": "bdg", "light_enc": "mlp", "discriminator": True},
}
FULL_CONFIG = "Ss+Bb+TLm+D"

CHECKPOINT_FILES = ("params.bin", "manifest.json", "hparams.json")


@dataclass
class HyperParams:
    embed_dim: int = 16
    hidden_dim: int = 32
    input_dim: int = 64
    attn_dim: int = 64
    lr: float = 0.01
    batch: int = 64
    K: int = 20
    obs_len: int = 8
    pred_len: int = 12
    k_window: int = 6
    noise_dim: int = 8
    epochs: int = 50
    spatial: str = "sdg"
    behavior: str = "bdg"
    light_enc: str = "mlp"
    discriminator: bool = True
    lights: bool = True
    lambda_adv: float = 1.0
    variety_mode: str = "norm"
    train_k: int = None
    dtype: str = "float64"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "input_dim", "attn_dim", "batch", "K",
                     "obs_len", "pred_len", "k_window", "noise_dim", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not self.lambda_adv >= 0:
            raise ConfigError(f"lambda_adv must be >= 0, got {self.lambda_adv}")
        if self.train_k is not None and self.train_k < 1:
            raise ConfigError(f"train_k must be >= 1, got {self.train_k}")
        for name, allowed in (("spatial", SPATIAL_MODES), ("behavior", BEHAVIOR_MODES),
                              ("light_enc", LIGHT_ENCODERS), ("variety_mode", VARIETY_MODES),
                              ("dtype", ("float64", "float32"))):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def rollouts(self):
        """Samples per window during training"""
        return self.train_k or self.K

    @property
    def behavior_dim(self):
        return self.input_dim if self.lights else self.hidden_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**data)


def apply_ablation(hp, label):
    if label not in ABLATIONS:
        raise ConfigError(f"unknown ablation {label!r}, expected one of {list(ABLATIONS)}")
    return replace(hp, **ABLATIONS[label])


def ablation_label(hp):
    parts = ["Ss" if hp.spatial == "sdg" else "Sg", "Bb" if hp.behavior == "bdg" else "Bl"]
    if hp.lights:
        parts.append("TLm" if hp.light_enc == "mlp" else "TLl")
    if hp.discriminator:
        parts.append("D")
    return "+".join(parts)


# === LAYERS ===

class DecoderLayers(Layer):
    """Displacement embedding + decoder LSTM over [embed(prev) || HLb || h || noise]"""

    _children = ("embed", "cell")

    def __init__(self, hp, rng):
        self.embed = LinearLayer(2, hp.embed_dim, rng)
        self.cell = LstmCell(hp.embed_dim + hp.behavior_dim + hp.hidden_dim + hp.noise_dim, hp.hidden_dim, rng)


class Discriminator(Layer):
    """LSTM over the full displacement sequence, MLP over the light sequence, linear head"""

    def __init__(self, hp, rng):
        self.traj_len = hp.obs_len + hp.pred_len
        self.light_dim = hp.obs_len * LIGHT_FEATURES
        self.embed = LinearLayer(2, hp.embed_dim, rng)
        self.encoder = LstmCell(hp.embed_dim, hp.hidden_dim, rng)
        self.lights = MlpEncoder([self.light_dim, hp.hidden_dim, hp.hidden_dim], rng) if hp.lights else None
        self.head = LinearLayer(2 * hp.hidden_dim if hp.lights else hp.hidden_dim, 1, rng)
        self._children = ("embed", "encoder", "lights", "head") if hp.lights else ("embed", "encoder", "head")

    def logits(self, steps, light_flat=None):
        """steps: traj_len tensors/arrays of shape (R, 2) -> (R,) raw scores"""
        if len(steps) != self.traj_len:
            raise TensorError(f"discriminate: trajectory of {len(steps)} steps, expected {self.traj_len}")
        steps = [as_tensor(s) for s in steps]
        rows = steps[0].shape[0]
        h, c = self.encoder.zero_state(rows)
        for s in steps:
            h, c = self.encoder.step(h, c, self.embed(s))
        features = h
        if self.lights is not None:
            if light_flat is None:
                raise TensorError("discriminate: light sequence required")
            features = concat([h, self.lights(as_tensor(light_flat))])
        return reshape(self.head(features), (rows,))


def discriminate(traj, light_flat, disc):
    """Real/fake probability per row; traj is (R, T, 2) or a list of T (R, 2) steps"""
    if not isinstance(traj, (list, tuple)):
        arr = np.asarray(traj, dtype=np.float64)
        if arr.ndim != 3:
            raise TensorError(f"discriminate: trajectory must be (R, T, 2), got {arr.shape}")
        traj = [arr[:, t, :] for t in range(arr.shape[1])]
    return sigmoid(disc.logits(traj, light_flat))


@dataclass(eq=False)
class EncodedWindow:
    hidden: Tensor
    context: Tensor
    last_disp: np.ndarray
    last_obs: np.ndarray
    obs_rel: np.ndarray
    light_flat: np.ndarray = None


class TrajectoryModel(Layer):
    """Every learnable weight of the generator and, when enabled, the discriminator.

    Attribute names double as parameter-name prefixes in checkpoints, so an ablation is
    visible as the presence or absence of a prefix.
    """

    def __init__(self, hp=None, sdg_params=None):
        self.hp = hp or HyperParams()
        self.sdg_params = sdg_params or SdgParams()
        hp = self.hp
        rng = np.random.default_rng(hp.seed)

        self.W_p = LinearLayer(2, hp.embed_dim, rng)
        self.W_l = LstmCell(hp.embed_dim, hp.hidden_dim, rng)
        children = ["W_p", "W_l"]
        if hp.spatial == "sdg":
            self.sdg_head = AttentionHead(hp.hidden_dim, hp.attn_dim, rng)
            children.append("sdg_head")
        else:
            self.gat_head = AttentionHead(hp.hidden_dim, hp.attn_dim, rng)
            children.append("gat_head")
        if hp.lights:
            if hp.light_enc == "mlp":
                self.W_M = MlpEncoder([hp.obs_len * LIGHT_FEATURES, hp.input_dim, hp.hidden_dim], rng)
                children.append("W_M")
            else:
                self.light_lstm = LstmCell(LIGHT_FEATURES, hp.hidden_dim, rng)
                children.append("light_lstm")
            self.W_fuse = LinearLayer(2 * hp.hidden_dim, hp.input_dim, rng)
            children.append("W_fuse")
        if hp.behavior == "bdg":
            self.W_theta = BehaviorBlock(hp.behavior_dim, hp.attn_dim, rng)
            children.append("W_theta")
        else:
            self.behavior_lstm = LstmCell(hp.behavior_dim, hp.behavior_dim, rng)
            children.append("behavior_lstm")
        self.W_d = DecoderLayers(hp, rng)
        self.sigma = LinearLayer(hp.hidden_dim, 2, rng)
        children += ["W_d", "sigma"]
        self.D = Discriminator(hp, rng) if hp.discriminator else None
        if self.D is not None:
            children.append("D")
        self._children = tuple(children)

    def generator_parameters(self):
        return {k: v for k, v in self.named_parameters().items() if not k.startswith("D.")}

    def discriminator_parameters(self):
        return {k: v for k, v in self.named_parameters().items() if k.startswith("D.")}

    @property
    def fingerprint(self):
        return config_hash({"hparams": self.hp.to_dict(), "sdg": self.sdg_params.to_dict()})

    # --- encoder ---

    def frame_mask(self, window, t):
        """Adjacency of observed step t built from that frame's geometry only"""
        return build_adjacency(
            window.frame_records(t),
            headings_from_positions(window.obs_xy, t),
            self.sdg_params,
            window.in_intersection[:, t],
        )

    def _spatial(self, window, h, t):
        if self.hp.spatial == "sdg":
            return spatial_aggregate(h, self.frame_mask(window, t), self.sdg_head)
        return matmul(self.gat_head.attend(h, h), h)

    def _light_state(self, hs, lights, t):
        if self.hp.light_enc == "mlp":
            lh = encode_lights(lights.upto(t), self.W_M)
        else:
            lh = encode_lights_lstm(LightSequenceFeature(lights.values[:, :t + 1]), self.light_lstm)
        return fuse(hs, lh, self.W_fuse)

    def encode(self, window):
        """Run the observed frames once; the result is shared by every decoder rollout"""
        hp = self.hp
        if window.obs_len != hp.obs_len:
            raise TensorError(f"window has {window.obs_len} observed frames, model expects {hp.obs_len}")
        n = window.num_agents
        rel = to_relative(window)
        lights = light_features(window) if hp.lights else None

        h, c = self.W_l.zero_state(n)
        history = BehaviorHistory(hp.k_window)
        chain = self.behavior_lstm.zero_state(n) if hp.behavior == "lstm" else None
        hb = None
        for t in range(hp.obs_len):
            e = embed_position(rel.obs_rel[:, t], self.W_p)
            h, c = self.W_l.step(h, c, e)
            state = self._spatial(window, h, t)
            if lights is not None:
                state = self._light_state(state, lights, t)
            if hp.behavior == "bdg":
                hb = temporal_update(state, history, self.W_theta)
            else:
                hb, chain = chain_update(state, chain, self.behavior_lstm)
        return EncodedWindow(
            hidden=h,
            context=hb,
            last_disp=rel.obs_rel[:, -1].copy(),
            last_obs=window.obs_xy[:, -1].copy(),
            obs_rel=rel.obs_rel,
            light_flat=lights.flat() if lights is not None else None,
        )

    # --- decoder ---

    def decode(self, enc, noise):
        """noise (K, N, noise_dim) -> pred_len displacement tensors of shape (K*N, 2)"""
        hp = self.hp
        noise = np.asarray(noise, dtype=np.float64)
        k, n = noise.shape[0], enc.hidden.shape[0]
        if noise.shape != (k, n, hp.noise_dim):
            raise TensorError(f"decode: noise {noise.shape}, expected (K, {n}, {hp.noise_dim})")
        tile = Tensor(np.tile(np.eye(n), (k, 1)))
        context = concat([matmul(tile, enc.context), matmul(tile, enc.hidden)])
        z = Tensor(noise.reshape(k * n, hp.noise_dim))
        prev = Tensor(np.tile(enc.last_disp, (k, 1)))
        h, c = self.W_d.cell.zero_state(k * n)
        disps = []
        for _ in range(hp.pred_len):
            step_in = concat([embed_position(prev, self.W_d.embed), context, z])
            h, c = self.W_d.cell.step(h, c, step_in)
            prev = self.sigma(h)
            disps.append(prev)
        return disps


def cumulative_offsets(disps):
    """Displacement steps -> (R, 2T) offsets from the last observed position"""
    offsets = [disps[0]]
    for d in disps[1:]:
        offsets.append(add(offsets[-1], d))
    return concat(offsets)


def noise_for(n, k, noise_dim, seed):
    """K sequential draws of (N, noise_dim); a larger K extends a smaller one"""
    if k < 1:
        raise TensorError(f"need K >= 1 samples, got {k}")
    rng = np.random.default_rng(seed)
    return np.stack([rng.standard_normal((n, noise_dim)) for _ in range(k)])


def forward_rollout(window, model, noise):
    """One sample: noise is (noise_dim,) shared by all agents or (N, noise_dim). Returns (N, T, 2)"""
    hp = model.hp
    noise = np.asarray(noise, dtype=np.float64)
    n = window.num_agents
    if noise.shape == (hp.noise_dim,):
        noise = np.tile(noise, (n, 1))
    if noise.shape != (n, hp.noise_dim):
        raise TensorError(f"forward_rollout: noise {noise.shape}, expected ({hp.noise_dim},) or ({n}, {hp.noise_dim})")
    with no_grad():
        enc = model.encode(window)
        offsets = cumulative_offsets(model.decode(enc, noise[None]))
    positions = enc.last_obs[:, None, :] + offsets.data.reshape(n, hp.pred_len, 2)
    if not np.isfinite(positions).all():
        raise TensorError("forward_rollout: non-finite prediction")
    return positions


def predict_offsets(window, model, k=None, seed=None):
    """(K, N, T, 2) offsets from the last observed position plus that position (N, 2)"""
    hp = model.hp
    k = hp.K if k is None else k
    n = window.num_agents
    noise = noise_for(n, k, hp.noise_dim, hp.seed if seed is None else seed)
    with no_grad():
        enc = model.encode(window)
        offsets = cumulative_offsets(model.decode(enc, noise))
    return offsets.data.reshape(k, n, hp.pred_len, 2), enc.last_obs


def predict_k(window, model, k=None, seed=None):
    """K trajectories per agent as absolute positions, shape (K, N, T, 2)"""
    offsets, last_obs = predict_offsets(window, model, k, seed)
    return last_obs[None, :, None, :] + offsets


# === LOSSES ===

def variety_loss(gt, preds, mode="norm"):
    """Best-of-K distance averaged over agents.

    gt: (N, T, 2) array; preds: (K, N, T, 2) tensor or array. In `norm` mode the distance is
    the L2 norm of the concatenated T-step error, in `stepsum` mode the sum of per-step norms.
    """
    preds = as_tensor(preds)
    gt = np.asarray(gt, dtype=np.float64)
    if preds.ndim != 4 or preds.shape[0] == 0:
        raise TensorError(f"variety_loss: need K >= 1 predictions shaped (K, N, T, 2), got {preds.shape}")
    k, n, steps, _ = preds.shape
    if gt.shape != (n, steps, 2):
        raise TensorError(f"variety_loss: gt {gt.shape} vs predictions {preds.shape}")
    if mode not in VARIETY_MODES:
        raise ConfigError(f"variety_mode must be one of {VARIETY_MODES}, got {mode!r}")
    diff = sub(reshape(preds, (k * n, steps * 2)), Tensor(np.tile(gt.reshape(n, steps * 2), (k, 1))))
    if mode == "norm":
        dist = l2norm(diff)
    else:
        dist = reduce_sum(reshape(l2norm(reshape(diff, (k * n * steps, 2))), (k * n, steps)), axis=-1)
    dist = reshape(dist, (k, n))
    best = np.argmin(dist.data, axis=0)
    select = np.zeros((k, n))
    select[best, np.arange(n)] = 1.0
    chosen = reduce_sum(transpose(mul(dist, Tensor(select))), axis=-1)
    return reduce_mean(chosen)


def bce_with_logits(logits, target):
    """mean(softplus(z) - y z) for a constant label y in {0, 1}"""
    if target not in (0, 1):
        raise TensorError(f"bce target must be 0 or 1, got {target}")
    z = as_tensor(logits)
    return reduce_mean(sub(softplus(z), scalar_mul(z, float(target))))


def window_masks(window, model):
    return [model.frame_mask(window, t) for t in range(window.obs_len)]


# === CHECKPOINTS ===

def save_checkpoint(model, directory):
    os.makedirs(directory, exist_ok=True)
    blob, manifest, hparams = (os.path.join(directory, name) for name in CHECKPOINT_FILES)
    save_parameters(model.named_parameters(), blob, manifest)
    with open(hparams, "w", encoding="utf-8", newline="\n") as f:
        f.write(canonical_json({"hparams": model.hp.to_dict(), "sdg": model.sdg_params.to_dict()}))
    return [blob, manifest, hparams]


def load_checkpoint(directory):
    blob, manifest, hparams = (os.path.join(directory, name) for name in CHECKPOINT_FILES)
    try:
        with open(hparams, encoding="utf-8") as f:
            config = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"unreadable checkpoint {directory}: {e}") from e
    model = TrajectoryModel(HyperParams.from_dict(config["hparams"]), SdgParams.from_dict(config["sdg"]))
    assign_parameters(model.named_parameters(), load_parameters(blob, manifest))
    logger.info(f"📦 Loaded checkpoint {directory} ({ablation_label(model.hp)})")
    return model
