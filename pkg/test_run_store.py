"""
SigTraj - Run registry tests
"""

import pytest

from metrics_eval import EvalReport
from run_store import RunStore


@pytest.fixture
def store(tmp_path):
    return RunStore(str(tmp_path / "nested" / "sigtraj.db"))


def _report(ade):
    return EvalReport(ade=ade, fde=2 * ade, min_fde=ade, k=20, fingerprint="f", n_agents=3, n_windows=1)


def test_register_and_finish(store, tmp_path):
    store.register_run("train-1", "train", '{"seed":0}', str(tmp_path))
    run = store.get_run("train-1")
    assert run['status'] == 'running' and run['finished_at'] is None
    store.finish_run("train-1", "diverged")
    assert store.get_run("train-1")['status'] == 'diverged'


def test_unknown_run(store):
    assert store.get_run("nope") is None


def test_epochs_evaluations_artifacts(store, tmp_path):
    store.register_run("train-1", "train", "{}", str(tmp_path))
    store.log_epoch("train-1", 2, 1.0, 0.5, 3.0)
    store.log_epoch("train-1", 1, 2.0, 0.7, 4.0)
    store.log_evaluation("train-1", "test", _report(1.5))
    artifact = tmp_path / "loss.csv"
    artifact.write_text("epoch\n1\n", encoding="utf-8")
    checksum = store.add_artifact("train-1", "loss_curve", str(artifact))
    assert len(checksum) == 64
    assert store.add_artifact("train-1", "missing", str(tmp_path / "gone")) is None

    run = store.get_run("train-1")
    assert [e['epoch'] for e in run['epochs']] == [1, 2]
    assert run['evaluations'][0]['ade'] == 1.5
    assert [a['kind'] for a in run['artifacts']] == ["loss_curve", "missing"]


def test_reregister_clears_previous_rows(store, tmp_path):
    store.register_run("train-1", "train", "{}", str(tmp_path))
    store.log_epoch("train-1", 1, 1.0, 0.5, 3.0)
    store.finish_run("train-1")
    store.register_run("train-1", "train", "{}", str(tmp_path))
    run = store.get_run("train-1")
    assert run['epochs'] == [] and run['status'] == 'running'


def test_list_and_stats(store, tmp_path):
    store.register_run("train-1", "train", "{}", str(tmp_path))
    store.register_run("eval-1", "eval", "{}", str(tmp_path))
    store.register_run("eval-2", "eval", "{}", str(tmp_path))
    store.finish_run("eval-1")
    store.log_evaluation("eval-1", "test", _report(2.0))
    store.log_evaluation("eval-2", "test", _report(1.25))
    store.log_evaluation("eval-2", "val", _report(0.5))

    assert {r['run_id'] for r in store.list_runs(command="eval")} == {"eval-1", "eval-2"}
    assert len(store.list_runs(limit=1)) == 1
    stats = store.get_stats()
    assert stats['total_runs'] == 3
    assert stats['runs_by_status'] == {'completed': 1, 'running': 2}
    assert stats['best_test_ade'] == 1.25
