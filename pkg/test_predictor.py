"""
SigTraj - Predictor tests
Hyperparameters, ablation wiring, rollouts, losses, checkpoints
"""

import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import constant_velocity_window
from data_model import window_from_arrays
from predictor import (
    ABLATIONS, FULL_CONFIG, Discriminator, HyperParams, TrajectoryModel, ablation_label,
    apply_ablation, bce_with_logits, discriminate, forward_rollout, load_checkpoint, noise_for, predict_k,
    predict_offsets, save_checkpoint, variety_loss, window_masks,
)
from settings import ConfigError
from tensor_core import Tensor, TensorError


class TestHyperParams:
    def test_defaults(self):
        hp = HyperParams()
        assert (hp.embed_dim, hp.hidden_dim, hp.input_dim) == (16, 32, 64)
        assert (hp.lr, hp.batch, hp.K) == (0.01, 64, 20)
        assert (hp.obs_len, hp.pred_len) == (8, 12)
        assert hp.rollouts == 20
        assert ablation_label(hp) == FULL_CONFIG

    @pytest.mark.parametrize("kwargs", [
        {"hidden_dim": 0}, {"K": 0}, {"lr": -1.0}, {"spatial": "cnn"}, {"variety_mode": "l1"},
        {"train_k": 0}, {"dtype": "float16"}, {"epochs": -1},
    ])
    def test_invalid_values(self, kwargs):
        with pytest.raises(ConfigError):
            HyperParams(**kwargs)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError, match="unknown"):
            HyperParams.from_dict({"hidden": 3})
        assert HyperParams.from_dict(HyperParams(K=4).to_dict()) == HyperParams(K=4)

    def test_train_k_overrides_rollouts(self):
        assert HyperParams(train_k=5).rollouts == 5

    @pytest.mark.parametrize("label", list(ABLATIONS))
    def test_ablation_labels_roundtrip(self, label):
        assert ablation_label(apply_ablation(HyperParams(), label)) == label

    def test_unknown_ablation(self):
        with pytest.raises(ConfigError):
            apply_ablation(HyperParams(), "Sx+Bb")


class TestModelStructure:
    def _prefixes(self, hp):
        return {name.split(".")[0] for name in TrajectoryModel(hp).named_parameters()}

    def test_full_model(self, tiny_hp):
        assert self._prefixes(tiny_hp) == {"W_p", "W_l", "sdg_head", "W_M", "W_fuse", "W_theta", "W_d", "sigma", "D"}

    def test_ablations_swap_blocks(self, tiny_hp):
        prefixes = self._prefixes(apply_ablation(tiny_hp, "Sg+Bl+TLm+D"))
        assert {"gat_head", "behavior_lstm"} <= prefixes
        assert not {"sdg_head", "W_theta"} & prefixes
        assert "light_lstm" in self._prefixes(apply_ablation(tiny_hp, "Ss+Bb+TLl+D"))
        assert "D" not in self._prefixes(apply_ablation(tiny_hp, "Ss+Bb+TLm"))

    def test_lights_off_removes_light_encoder(self, tiny_hp):
        prefixes = self._prefixes(replace(tiny_hp, lights=False))
        assert not {"W_M", "W_fuse", "light_lstm"} & prefixes

    def test_seeded_initialization(self, tiny_hp):
        a, b = TrajectoryModel(tiny_hp), TrajectoryModel(tiny_hp)
        for (name, p), q in zip(a.named_parameters().items(), b.parameters()):
            np.testing.assert_array_equal(p.data, q.data, err_msg=name)

    def test_generator_and_discriminator_split(self, tiny_hp):
        model = TrajectoryModel(tiny_hp)
        gen, disc = model.generator_parameters(), model.discriminator_parameters()
        assert set(gen) | set(disc) == set(model.named_parameters())
        assert all(name.startswith("D.") for name in disc)

    def test_fingerprint_tracks_config(self, tiny_hp):
        assert TrajectoryModel(tiny_hp).fingerprint == TrajectoryModel(tiny_hp).fingerprint
        assert TrajectoryModel(tiny_hp).fingerprint != TrajectoryModel(replace(tiny_hp, K=4)).fingerprint


class TestRollouts:
    def test_predict_k_shape_and_determinism(self, tiny_hp, cv_window):
        model = TrajectoryModel(tiny_hp)
        a = predict_k(cv_window, model, k=4, seed=11)
        b = predict_k(cv_window, model, k=4, seed=11)
        assert a.shape == (4, 2, 2, 2)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, predict_k(cv_window, model, k=4, seed=12))

    def test_best_of_twenty_beats_average(self, tiny_hp):
        model = TrajectoryModel(tiny_hp)
        window = constant_velocity_window(n=3, step=(4.0, -6.0), start_frame=30)
        samples = predict_k(window, model, k=20, seed=4)
        per_sample = np.linalg.norm(samples - window.target_xy[None], axis=-1).mean(axis=-1)
        assert samples.shape[0] == 20
        assert np.all(per_sample.min(axis=0) <= per_sample.mean(axis=0))
        assert np.any(per_sample.min(axis=0) < per_sample.mean(axis=0))

    def test_larger_k_extends_smaller_k(self, tiny_hp, cv_window):
        model = TrajectoryModel(tiny_hp)
        small = predict_k(cv_window, model, k=2, seed=3)
        large = predict_k(cv_window, model, k=5, seed=3)
        np.testing.assert_allclose(large[:2], small, rtol=0, atol=1e-12)

    def test_single_rollout_matches_k1(self, tiny_hp, cv_window):
        model = TrajectoryModel(tiny_hp)
        noise = noise_for(cv_window.num_agents, 1, tiny_hp.noise_dim, 8)
        single = forward_rollout(cv_window, model, noise[0])
        np.testing.assert_allclose(single, predict_k(cv_window, model, k=1, seed=8)[0], rtol=0, atol=1e-12)

    def test_shared_noise_vector(self, tiny_hp, cv_window):
        model = TrajectoryModel(tiny_hp)
        out = forward_rollout(cv_window, model, np.zeros(tiny_hp.noise_dim))
        assert out.shape == (2, 2, 2)
        with pytest.raises(TensorError):
            forward_rollout(cv_window, model, np.zeros(tiny_hp.noise_dim + 1))

    def test_translation_leaves_offsets_unchanged(self, tiny_hp):
        model = TrajectoryModel(tiny_hp)
        base = constant_velocity_window()
        shifted = window_from_arrays(base.obs_xy + np.array([128.5, -64.0]), base.target_xy + np.array([128.5, -64.0]))
        a, _ = predict_offsets(base, model, k=3, seed=2)
        b, _ = predict_offsets(shifted, model, k=3, seed=2)
        np.testing.assert_array_equal(a, b)

    def test_obs_len_mismatch(self, tiny_hp):
        window = constant_velocity_window(obs_len=4)
        with pytest.raises(TensorError, match="observed frames"):
            predict_k(window, TrajectoryModel(tiny_hp))

    def test_noise_validation(self, tiny_hp, cv_window):
        model = TrajectoryModel(tiny_hp)
        with pytest.raises(TensorError):
            noise_for(2, 0, 2, 0)
        with pytest.raises(TensorError, match="decode"):
            model.decode(model.encode(cv_window), np.zeros((2, 3, tiny_hp.noise_dim)))

    def test_every_ablation_runs(self, tiny_hp, cv_window):
        for label in ABLATIONS:
            out = predict_k(cv_window, TrajectoryModel(apply_ablation(tiny_hp, label)), k=2, seed=0)
            assert np.isfinite(out).all()
        out = predict_k(cv_window, TrajectoryModel(replace(tiny_hp, lights=False)), k=2, seed=0)
        assert np.isfinite(out).all()

    def test_window_masks_one_per_observed_frame(self, tiny_hp, cv_window):
        masks = window_masks(cv_window, TrajectoryModel(tiny_hp))
        assert len(masks) == tiny_hp.obs_len
        assert [m.frame_id for m in masks] == list(cv_window.frame_ids)


def _variety_oracle(gt, preds, mode):
    k, n, steps, _ = preds.shape
    total = 0.0
    for i in range(n):
        best = None
        for s in range(k):
            if mode == "norm":
                d = sum((preds[s, i, t, c] - gt[i, t, c]) ** 2 for t in range(steps) for c in range(2)) ** 0.5
            else:
                d = sum(((preds[s, i, t, 0] - gt[i, t, 0]) ** 2 + (preds[s, i, t, 1] - gt[i, t, 1]) ** 2) ** 0.5
                        for t in range(steps))
            best = d if best is None else min(best, d)
        total += best
    return total / n


class TestLosses:
    @pytest.mark.parametrize("mode", ["norm", "stepsum"])
    def test_variety_loss_matches_oracle(self, rng, mode):
        for _ in range(100):
            k, n, steps = (int(v) for v in rng.integers(1, 5, size=3))
            preds = rng.normal(size=(k, n, steps, 2)) * 5
            gt = rng.normal(size=(n, steps, 2)) * 5
            value = variety_loss(gt, preds, mode).item()
            assert value == pytest.approx(_variety_oracle(gt, preds, mode), rel=1e-12)

    def test_variety_loss_ignores_non_best_samples(self, rng):
        gt = rng.normal(size=(2, 3, 2))
        preds = Tensor(np.stack([gt + 0.1, gt + 5.0]), requires_grad=True)
        assert variety_loss(gt, preds).item() == pytest.approx(np.sqrt(6 * 0.01))

    def test_variety_loss_errors(self):
        with pytest.raises(TensorError):
            variety_loss(np.zeros((1, 2, 2)), np.zeros((0, 1, 2, 2)))
        with pytest.raises(TensorError):
            variety_loss(np.zeros((2, 2, 2)), np.zeros((1, 1, 2, 2)))

    def test_bce_with_logits(self):
        assert bce_with_logits(Tensor([0.0, 0.0]), 1).item() == pytest.approx(np.log(2))
        assert bce_with_logits(Tensor([30.0]), 1).item() < 1e-12
        assert bce_with_logits(Tensor([-1000.0]), 0).item() == 0.0
        with pytest.raises(TensorError):
            bce_with_logits(Tensor([0.0]), 0.5)

    def test_discriminate_probabilities(self, tiny_hp, rng):
        model = TrajectoryModel(tiny_hp)
        traj = rng.normal(size=(3, tiny_hp.obs_len + tiny_hp.pred_len, 2))
        lights = rng.normal(size=(3, tiny_hp.obs_len * 9))
        p = discriminate(traj, lights, model.D).data
        assert p.shape == (3,)
        assert np.all((p > 0) & (p < 1))
        with pytest.raises(TensorError, match="steps"):
            discriminate(traj[:, :3], lights, model.D)
        with pytest.raises(TensorError, match="light sequence"):
            discriminate(traj, None, model.D)


    def test_zero_discriminator_is_undecided(self, tiny_hp, rng):
        model = TrajectoryModel(tiny_hp)
        for p in model.D.parameters():
            p.data[...] = 0.0
        traj = rng.normal(size=(4, tiny_hp.obs_len + tiny_hp.pred_len, 2)) * 20.0
        lights = rng.normal(size=(4, tiny_hp.obs_len * 9))
        np.testing.assert_array_equal(discriminate(traj, lights, model.D).data, np.full(4, 0.5))

    def test_discriminate_two_step_hand_value(self, rng):
        disc = Discriminator(SimpleNamespace(obs_len=1, pred_len=1, embed_dim=1, hidden_dim=1, lights=False), rng)
        for p in disc.parameters():
            p.data[...] = 0.0
        disc.embed.W.data[...] = [[1.0, 0.0]]
        disc.encoder.W_g.data[...] = [[1.0, 0.0]]
        disc.head.W.data[...] = [[2.0]]
        disc.head.b.data[...] = [-0.1]

        # every sigmoid gate sits at 0.5, the candidate is tanh of the x step
        c1 = 0.5 * math.tanh(0.4)
        c2 = 0.5 * c1 + 0.5 * math.tanh(-0.2)
        h2 = 0.5 * math.tanh(c2)
        expected = 1.0 / (1.0 + math.exp(-(2.0 * h2 - 0.1)))

        p = discriminate(np.array([[[0.4, 9.0], [-0.2, 3.0]]]), None, disc).data
        assert p[0] == pytest.approx(expected, rel=1e-12)


class TestCheckpoint:
    def test_roundtrip_reproduces_predictions(self, tmp_path, tiny_hp, cv_window):
        model = TrajectoryModel(tiny_hp)
        model.W_p.W.data += 0.25
        paths = save_checkpoint(model, tmp_path / "ckpt")
        assert [p.rsplit("/", 1)[-1] for p in map(str, paths)] == ["params.bin", "manifest.json", "hparams.json"]
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.hp == model.hp
        np.testing.assert_array_equal(predict_k(cv_window, loaded, 3, 1), predict_k(cv_window, model, 3, 1))

    def test_save_is_byte_stable(self, tmp_path, tiny_hp):
        save_checkpoint(TrajectoryModel(tiny_hp), tmp_path / "a")
        save_checkpoint(TrajectoryModel(tiny_hp), tmp_path / "b")
        for name in ("params.bin", "manifest.json", "hparams.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "nope")
