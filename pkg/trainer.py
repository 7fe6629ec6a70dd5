"""
SigTraj - Trainer
Adam optimizer, adversarial minibatch loop with worker-pool rollouts, loss curves
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime

import numpy as np
import pandas as pd

from data_model import to_relative
from predictor import (
    TrajectoryModel, bce_with_logits, cumulative_offsets, noise_for, variety_loss,
)
from settings import ConfigError, RUN_ROOT
from tensor_core import NonFiniteError, Tape, add, reshape, scalar_mul, set_default_dtype

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["epoch", "gen_loss", "disc_loss", "train_ade"]


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf; dump_path points to the JSON dump of the offending batch"""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


# === ADAM ===

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class Adam:
    """m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2; p <- p - lr m_hat / (sqrt(v_hat) + eps)"""

    def __init__(self, named, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(
            m={k: np.zeros_like(p.data) for k, p in self.params.items()},
            v={k: np.zeros_like(p.data) for k, p in self.params.items()},
        )

    def step(self, grads):
        """grads: {name: array}; names without a gradient are left untouched"""
        self.state.step += 1
        t = self.state.step
        for name, g in grads.items():
            p = self.params[name]
            m = self.state.m[name] = self.beta1 * self.state.m[name] + (1 - self.beta1) * g
            v = self.state.v[name] = self.beta2 * self.state.v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if not np.isfinite(p.data).all():
                raise NonFiniteError(f"parameter {name} became non-finite after Adam step {t}")


# === ROLLOUT PASSES ===

@dataclass
class GeneratorResult:
    grads: list
    loss: float
    variety: float
    train_ade: float
    fake_steps: np.ndarray
    obs_rel: np.ndarray
    target_rel: np.ndarray
    light_flat: np.ndarray
    k: int


@dataclass
class EpochRecord:
    epoch: int
    gen_loss: float
    disc_loss: float
    train_ade: float


def generator_objective(model, window, noise):
    """Records the generator loss on the active tape.

    Returns (loss, variety, preds (K, N, T, 2), displacement steps, encoded window).
    """
    hp = model.hp
    k, n = noise.shape[0], window.num_agents
    gt = window.target_xy - window.obs_xy[:, -1:, :]
    enc = model.encode(window)
    disps = model.decode(enc, noise)
    preds = reshape(cumulative_offsets(disps), (k, n, hp.pred_len, 2))
    variety = variety_loss(gt, preds, hp.variety_mode)
    loss = variety
    if model.D is not None and hp.lambda_adv > 0:
        obs_steps = [np.tile(enc.obs_rel[:, t], (k, 1)) for t in range(hp.obs_len)]
        lights = np.tile(enc.light_flat, (k, 1)) if enc.light_flat is not None else None
        adv = bce_with_logits(model.D.logits(obs_steps + disps, lights), 1)
        loss = add(variety, scalar_mul(adv, hp.lambda_adv))
    return loss, variety, preds, disps, enc


def _best_ade(offsets, gt):
    """mean over agents of min over K of the per-step Euclidean error"""
    err = np.sqrt(((offsets - gt[None]) ** 2).sum(axis=-1)).mean(axis=-1)
    return float(err.min(axis=0).mean())


class Trainer:
    def __init__(self, model, run_dir=None, store=None, run_id=None):
        self.model = model
        self.hp = model.hp
        self.run_dir = run_dir
        self.store = store
        self.run_id = run_id
        self.gen_names = list(model.generator_parameters())
        self.disc_names = list(model.discriminator_parameters())
        self.gen_opt = Adam(model.generator_parameters(), lr=self.hp.lr)
        self.disc_opt = Adam(model.discriminator_parameters(), lr=self.hp.lr) if model.D is not None else None
        self.curve = []

        # Statistics
        self.stats = {
            'epochs_completed': 0,
            'generator_steps': 0,
            'discriminator_steps': 0,
            'windows_seen': 0,
            'last_epoch': None,
        }

    def generator_pass(self, window, noise):
        """Variety loss (+ adversarial term) and its gradients for one window; thread-safe"""
        model, hp = self.model, self.hp
        k = noise.shape[0]
        rel = to_relative(window)
        gt = window.target_xy - window.obs_xy[:, -1:, :]
        params = model.generator_parameters()
        with Tape() as tape:
            loss, variety, preds, disps, enc = generator_objective(model, window, noise)
            grads = tape.gradients(loss, [params[name] for name in self.gen_names])
        return GeneratorResult(
            grads=grads,
            loss=loss.item(),
            variety=variety.item(),
            train_ade=_best_ade(preds.data, gt),
            fake_steps=np.stack([d.data for d in disps], axis=1),
            obs_rel=rel.obs_rel,
            target_rel=rel.target_rel,
            light_flat=enc.light_flat,
            k=k,
        )

    def discriminator_pass(self, result):
        """BCE(real -> 1) + BCE(fake -> 0); fakes are the generator's values, held constant"""
        model, hp = self.model, self.hp
        k = result.k
        params = model.discriminator_parameters()
        real_steps = [result.obs_rel[:, t] for t in range(hp.obs_len)]
        real_steps += [result.target_rel[:, t] for t in range(hp.pred_len)]
        fake_steps = [np.tile(result.obs_rel[:, t], (k, 1)) for t in range(hp.obs_len)]
        fake_steps += [result.fake_steps[:, t] for t in range(hp.pred_len)]
        fake_lights = np.tile(result.light_flat, (k, 1)) if result.light_flat is not None else None
        with Tape() as tape:
            real = bce_with_logits(model.D.logits(real_steps, result.light_flat), 1)
            fake = bce_with_logits(model.D.logits(fake_steps, fake_lights), 0)
            loss = add(real, fake)
            grads = tape.gradients(loss, [params[name] for name in self.disc_names])
        return grads, loss.item()

    @staticmethod
    def _mean_grads(names, grad_lists):
        """Reduce per-window gradients in batch order"""
        total = [np.zeros_like(g) for g in grad_lists[0]]
        for grads in grad_lists:
            for acc, g in zip(total, grads):
                acc += g
        return {name: acc / len(grad_lists) for name, acc in zip(names, total)}

    def _dump_batch(self, epoch, batch, windows, error):
        directory = self.run_dir or RUN_ROOT
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"diverged_epoch{epoch}.json")
        dump = {
            "epoch": epoch,
            "error": str(error),
            "batch": [int(i) for i in batch],
            "windows": [
                {
                    "start_frame": windows[i].start_frame,
                    "agent_ids": list(windows[i].agent_ids),
                    "obs_xy": windows[i].obs_xy.tolist(),
                    "target_xy": windows[i].target_xy.tolist(),
                }
                for i in batch
            ],
            "timestamp": datetime.now().isoformat(),
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(dump, f, indent=2)
        return path

    def train(self, windows, epochs=None):
        """Generator step then discriminator step per minibatch; returns the loss curve"""
        hp = self.hp
        if not windows:
            raise ConfigError("training set is empty")
        epochs = hp.epochs if epochs is None else epochs
        with ThreadPoolExecutor(max_workers=hp.workers) as pool:
            for epoch in range(1, epochs + 1):
                record = self._run_epoch(pool, windows, epoch)
                self.curve.append(record)
                self.stats['epochs_completed'] += 1
                self.stats['last_epoch'] = datetime.now().isoformat()
                if self.store is not None and self.run_id is not None:
                    self.store.log_epoch(self.run_id, record.epoch, record.gen_loss, record.disc_loss, record.train_ade)
                logger.info(
                    f"📈 Epoch {epoch}/{epochs}: gen={record.gen_loss:.4f} "
                    f"disc={record.disc_loss:.4f} ade={record.train_ade:.3f}"
                )
        return self.curve

    def _run_epoch(self, pool, windows, epoch):
        hp = self.hp
        order = np.random.default_rng([hp.seed, epoch]).permutation(len(windows))
        gen_losses, disc_losses, ades = [], [], []
        for start in range(0, len(order), hp.batch):
            batch = order[start:start + hp.batch]
            batch_windows = [windows[i] for i in batch]
            noises = [
                noise_for(windows[i].num_agents, hp.rollouts, hp.noise_dim, [hp.seed, epoch, int(i)])
                for i in batch
            ]
            try:
                results = list(pool.map(self.generator_pass, batch_windows, noises))
                losses = [r.loss for r in results]
                if not all(math.isfinite(v) for v in losses):
                    raise NonFiniteError(f"generator loss {losses}")
                self.gen_opt.step(self._mean_grads(self.gen_names, [r.grads for r in results]))
                self.stats['generator_steps'] += 1
                if self.disc_opt is not None:
                    disc = list(pool.map(self.discriminator_pass, results))
                    if not all(math.isfinite(loss) for _, loss in disc):
                        raise NonFiniteError(f"discriminator loss {[loss for _, loss in disc]}")
                    self.disc_opt.step(self._mean_grads(self.disc_names, [g for g, _ in disc]))
                    self.stats['discriminator_steps'] += 1
                    disc_losses.extend(loss for _, loss in disc)
            except NonFiniteError as e:
                path = self._dump_batch(epoch, batch, windows, e)
                logger.error(f"💥 Training diverged at epoch {epoch}: {e} (dump: {path})")
                raise TrainingDiverged(f"training diverged at epoch {epoch}: {e}", path) from e
            gen_losses.extend(losses)
            ades.extend(r.train_ade for r in results)
            self.stats['windows_seen'] += len(batch)
        return EpochRecord(
            epoch=epoch,
            gen_loss=float(np.mean(gen_losses)),
            disc_loss=float(np.mean(disc_losses)) if disc_losses else 0.0,
            train_ade=float(np.mean(ades)),
        )

    def get_stats(self):
        """Get training statistics"""
        return self.stats


def train(windows, hp, sdg_params=None, run_dir=None, store=None, run_id=None):
    """Build a model from hp (seeded) and train it; returns (model, loss curve)"""
    set_default_dtype(hp.dtype)
    model = TrajectoryModel(hp, sdg_params)
    trainer = Trainer(model, run_dir=run_dir, store=store, run_id=run_id)
    curve = trainer.train(windows)
    return model, curve


def write_loss_curve(curve, path):
    df = pd.DataFrame([asdict(r) for r in curve], columns=LOSS_COLUMNS)
    df.to_csv(path, index=False, lineterminator="\n")
    return path
