"""
SigTraj - Trainer tests
"""

import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from conftest import constant_velocity_window
from predictor import TrajectoryModel, noise_for
from run_store import RunStore
from settings import ConfigError
from tensor_core import NonFiniteError, Tensor
from trainer import (
    LOSS_COLUMNS, Adam, Trainer, TrainingDiverged, generator_objective, train, write_loss_curve,
)


def _windows():
    return [
        constant_velocity_window(step=(0.0, -10.0)),
        constant_velocity_window(step=(5.0, -5.0), spacing=40.0),
        constant_velocity_window(n=3, step=(-8.0, 0.0)),
    ]


def _params(model):
    return {name: p.data.copy() for name, p in model.named_parameters().items()}


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        opt.step({"p": np.array([3.0, -0.2, 1e-3])})
        np.testing.assert_allclose(p.data, [0.9, -1.9, 0.4], atol=1e-5)
        assert opt.state.step == 1

    def test_two_steps_on_quadratic_match_hand_recurrence(self):
        # f(p) = p^2 / 2, so the gradient is p itself
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=lr, beta1=b1, beta2=b2, eps=eps)

        m, v, expected = 0.0, 0.0, 1.0
        for t in (1, 2):
            g = expected
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            expected -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            opt.step({"p": p.data.copy()})
            assert p.data[0] == pytest.approx(expected, rel=1e-12)
        assert opt.state.step == 2

    def test_names_without_gradient_untouched(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        Adam({"a": a, "b": b}, lr=0.5).step({"a": np.ones(2)})
        np.testing.assert_array_equal(b.data, np.ones(2))
        assert not np.array_equal(a.data, np.ones(2))

    def test_non_finite_parameter(self):
        p = Tensor(np.ones(1), requires_grad=True)
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
            Adam({"p": p}).step({"p": np.array([np.inf])})


class TestGeneratorObjective:
    def test_without_discriminator_loss_is_variety(self, tiny_hp, cv_window):
        model = TrajectoryModel(replace(tiny_hp, discriminator=False))
        noise = noise_for(cv_window.num_agents, 3, tiny_hp.noise_dim, 0)
        loss, variety, preds, disps, _ = generator_objective(model, cv_window, noise)
        assert loss is variety
        assert preds.shape == (3, 2, tiny_hp.pred_len, 2)
        assert len(disps) == tiny_hp.pred_len

    def test_adversarial_term_adds(self, tiny_hp, cv_window):
        model = TrajectoryModel(tiny_hp)
        noise = noise_for(cv_window.num_agents, 3, tiny_hp.noise_dim, 0)
        loss, variety, *_ = generator_objective(model, cv_window, noise)
        assert loss.item() > variety.item()


class TestTrainer:
    def test_curve_and_stats(self, tiny_hp):
        model = TrajectoryModel(replace(tiny_hp, epochs=2))
        trainer = Trainer(model)
        curve = trainer.train(_windows())
        assert [r.epoch for r in curve] == [1, 2]
        stats = trainer.get_stats()
        assert stats['epochs_completed'] == 2
        assert stats['windows_seen'] == 6
        assert stats['generator_steps'] == stats['discriminator_steps'] == 4

    def test_zero_epochs_keeps_initialization(self, tiny_hp):
        model, curve = train(_windows(), replace(tiny_hp, epochs=0))
        assert curve == []
        fresh = TrajectoryModel(tiny_hp)
        for name, value in _params(fresh).items():
            np.testing.assert_array_equal(model.named_parameters()[name].data, value)

    def test_training_is_deterministic(self, tiny_hp):
        a, curve_a = train(_windows(), tiny_hp)
        b, curve_b = train(_windows(), tiny_hp)
        assert curve_a == curve_b
        for name, value in _params(a).items():
            np.testing.assert_array_equal(b.named_parameters()[name].data, value, err_msg=name)

    def test_worker_count_does_not_change_result(self, tiny_hp):
        a, _ = train(_windows(), tiny_hp)
        b, _ = train(_windows(), replace(tiny_hp, workers=3))
        for name, value in _params(a).items():
            np.testing.assert_array_equal(b.named_parameters()[name].data, value, err_msg=name)

    def test_zero_learning_rate_keeps_parameters(self, tiny_hp):
        model, curve = train(_windows(), replace(tiny_hp, lr=0.0))
        assert len(curve) == 1
        for name, value in _params(TrajectoryModel(tiny_hp)).items():
            np.testing.assert_array_equal(model.named_parameters()[name].data, value, err_msg=name)

    def test_training_changes_parameters(self, tiny_hp):
        model, _ = train(_windows(), tiny_hp)
        fresh = _params(TrajectoryModel(tiny_hp))
        assert any(not np.array_equal(model.named_parameters()[k].data, v) for k, v in fresh.items())

    def test_empty_training_set(self, tiny_hp):
        with pytest.raises(ConfigError):
            Trainer(TrajectoryModel(tiny_hp)).train([])

    def test_divergence_dumps_batch(self, tiny_hp, tmp_path):
        trainer = Trainer(TrajectoryModel(tiny_hp), run_dir=str(tmp_path))
        real_pass = trainer.generator_pass
        trainer.generator_pass = lambda w, n: replace(real_pass(w, n), loss=float("nan"))
        with pytest.raises(TrainingDiverged) as info:
            trainer.train(_windows())
        assert info.value.dump_path.endswith("diverged_epoch1.json")
        assert (tmp_path / "diverged_epoch1.json").exists()

    def test_epochs_logged_to_store(self, tiny_hp, tmp_path):
        store = RunStore(str(tmp_path / "runs.db"))
        store.register_run("train-abc", "train", "{}", str(tmp_path))
        Trainer(TrajectoryModel(replace(tiny_hp, epochs=2)), store=store, run_id="train-abc").train(_windows())
        assert [e['epoch'] for e in store.get_run("train-abc")['epochs']] == [1, 2]


def test_write_loss_curve(tiny_hp, tmp_path):
    _, curve = train(_windows(), replace(tiny_hp, epochs=2))
    path = write_loss_curve(curve, tmp_path / "loss.csv")
    df = pd.read_csv(path)
    assert list(df.columns) == LOSS_COLUMNS
    assert df['epoch'].tolist() == [1, 2]
    assert np.isfinite(df[['gen_loss', 'disc_loss', 'train_ade']].to_numpy()).all()


@pytest.mark.slow
def test_overfits_single_window(tiny_hp):
    hp = replace(tiny_hp, epochs=2000, discriminator=False, K=1, batch=1, lr=0.01)
    _, curve = train([constant_velocity_window()], hp)
    assert len(curve) == 2000
    assert curve[-1].train_ade < 0.5
