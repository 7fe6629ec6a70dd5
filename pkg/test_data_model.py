"""
SigTraj - Data model tests
CSV ingestion guards, windowing, displacement encoding, dataset statistics
"""

import json

import numpy as np
import pytest

from data_model import (
    CSV_COLUMNS, AgentRecord, LightState, Maneuver, RecordError, Scene, dataset_stats,
    from_relative, parse_dataset, serialize_scene, snap, to_relative, window_from_arrays,
    window_scene,
)

HEADER = ",".join(CSV_COLUMNS)


def _row(fid, aid, x, y, lane=13, pa=0, f=0, mb="S", lid=3, ls="G", lt=10.0):
    return f"{fid},{aid},{x},{y},{lane},{pa},{f},{mb},{lid},{ls},{lt}"


def _write(tmp_path, rows, name="data.csv"):
    path = tmp_path / name
    path.write_text("\n".join([HEADER] + rows) + "\n", encoding="utf-8")
    return path


def _record(fid, aid, x, y, **kw):
    fields = dict(lane_id=13, in_influence_area=False, head_of_queue=False, maneuver=Maneuver.STRAIGHT,
                  light_id=3, light_state=LightState.GREEN, light_remaining=10.0)
    fields.update(kw)
    return AgentRecord(fid, aid, x, y, **fields)


def _column_scene(frames, agents=2, skip=()):
    records = [
        _record(f, a, 100.0 + 20 * a, 500.0 - 10 * f)
        for f in range(frames) for a in range(1, agents + 1) if (f, a) not in skip
    ]
    return Scene.from_records(records)


class TestParse:
    def test_parses_and_snaps(self, tmp_path):
        path = _write(tmp_path, [_row(0, 1, 10.0001, 20.5, pa=1, f=1, mb="L", ls="R", lt=4.5),
                                 _row(1, 1, 11.0, 20.0)])
        scene = parse_dataset(path)
        first = scene.frames[0][0]
        assert first.x == float(snap(10.0001))
        assert first.maneuver is Maneuver.LEFT
        assert first.light_state is LightState.RED
        assert first.head_of_queue and first.in_influence_area
        assert scene.frame_ids == [0, 1]

    def test_bad_flag_reports_line(self, tmp_path):
        path = _write(tmp_path, [_row(0, 1, 1, 1), _row(0, 2, 1, 1, pa=2)])
        with pytest.raises(RecordError, match="line 3"):
            parse_dataset(path)

    def test_unknown_maneuver(self, tmp_path):
        path = _write(tmp_path, [_row(0, 1, 1, 1, mb="U")])
        with pytest.raises(RecordError, match="line 2"):
            parse_dataset(path)

    def test_head_of_queue_outside_influence_area(self, tmp_path):
        path = _write(tmp_path, [_row(0, 1, 1, 1, pa=0, f=1)])
        with pytest.raises(RecordError, match="line 2.*head_of_queue"):
            parse_dataset(path)

    def test_negative_light_remaining(self, tmp_path):
        path = _write(tmp_path, [_row(0, 1, 1, 1, lt=-1)])
        with pytest.raises(RecordError, match="light_remaining"):
            parse_dataset(path)

    def test_non_monotone_frames(self, tmp_path):
        path = _write(tmp_path, [_row(1, 1, 1, 1), _row(0, 1, 1, 1)])
        with pytest.raises(RecordError, match="non-monotone"):
            parse_dataset(path)

    def test_duplicate_frame_agent(self, tmp_path):
        path = _write(tmp_path, [_row(0, 1, 1, 1), _row(0, 1, 2, 2)])
        with pytest.raises(RecordError, match="duplicate"):
            parse_dataset(path)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("Fid,Aid,x,y\n0,1,1,1\n", encoding="utf-8")
        with pytest.raises(RecordError, match="missing columns"):
            parse_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(RecordError, match="empty"):
            parse_dataset(path)

    def test_serialize_then_parse_keeps_records(self, tmp_path):
        scene = _column_scene(4)
        path = serialize_scene(scene, tmp_path / "scene.csv")
        again = parse_dataset(path)
        assert list(again.records()) == list(scene.records())
        assert path.read_bytes().count(b"\r") == 0

    def test_map_sidecar_is_attached(self, tmp_path):
        path = _write(tmp_path, [_row(0, 1, 1, 1)])
        meta_path = tmp_path / "map.json"
        meta_path.write_text(json.dumps({"lights": [{"id": 3, "cycle": [{"state": "G", "dur": 10}]}]}))
        scene = parse_dataset(path, meta_path)
        assert scene.map_meta["lanes"] == []
        assert dataset_stats(scene)["cycle_lengths"] == {"3": 10}


class TestWindows:
    def test_count_for_contiguous_scene(self):
        windows = window_scene(_column_scene(25))
        assert len(windows) == 6
        assert [w.start_frame for w in windows] == list(range(6))
        assert windows[0].obs_xy.shape == (2, 8, 2)
        assert windows[0].target_xy.shape == (2, 12, 2)

    def test_agent_missing_a_frame_is_excluded(self):
        windows = window_scene(_column_scene(20, skip={(15, 2)}))
        assert len(windows) == 1
        assert windows[0].agent_ids == (1,)

    def test_frame_gap_breaks_windows(self):
        scene = _column_scene(25, skip={(10, 1), (10, 2)})
        assert window_scene(scene) == []

    def test_stride(self):
        assert len(window_scene(_column_scene(25), stride=2)) == 3

    def test_too_short(self):
        assert window_scene(_column_scene(19)) == []

    def test_intersection_flags_from_map(self):
        scene = _column_scene(20)
        scene.map_meta = {"intersections": [{"polygon": [[0, 400], [1000, 400], [1000, 600], [0, 600]]}]}
        w = window_scene(scene)[0]
        # y = 500 - 10 f, inside the box while y >= 400
        np.testing.assert_array_equal(w.in_intersection[0], [True] * 8)

    def test_window_from_arrays_contexts(self):
        obs = np.zeros((1, 2, 2))
        w = window_from_arrays(obs, np.zeros((1, 1, 2)),
                               contexts=[[{"light_state": LightState.RED}, {"maneuver": Maneuver.RIGHT}]])
        assert w.obs[0][0].light_state is LightState.RED
        assert w.obs[0][1].maneuver is Maneuver.RIGHT
        assert w.frame_ids == (0, 1)

    def test_target_shape_checked(self):
        with pytest.raises(RecordError):
            window_from_arrays(np.zeros((2, 3, 2)), np.zeros((1, 2, 2)))


class TestRelative:
    def test_first_displacement_is_zero_and_inverse_is_exact(self, rng):
        obs = snap(rng.uniform(0, 800, size=(3, 8, 2)))
        target = snap(rng.uniform(0, 800, size=(3, 12, 2)))
        w = window_from_arrays(obs, target)
        rel = to_relative(w)
        np.testing.assert_array_equal(rel.obs_rel[:, 0], 0.0)
        back_obs, back_target = from_relative(rel)
        np.testing.assert_array_equal(back_obs, w.obs_xy)
        np.testing.assert_array_equal(back_target, w.target_xy)

    def test_translation_leaves_displacements_unchanged(self, rng):
        obs = snap(rng.uniform(0, 500, size=(2, 8, 2)))
        target = snap(rng.uniform(0, 500, size=(2, 12, 2)))
        shift = np.array([64.25, -17.5])
        a = to_relative(window_from_arrays(obs, target))
        b = to_relative(window_from_arrays(obs + shift, target + shift))
        np.testing.assert_array_equal(a.obs_rel, b.obs_rel)
        np.testing.assert_array_equal(a.target_rel, b.target_rel)


def test_dataset_stats_counts():
    records = [
        _record(0, 1, 0, 0, maneuver=Maneuver.LEFT, in_influence_area=True),
        _record(0, 2, 5, 0),
        _record(1, 1, 0, 1, maneuver=Maneuver.LEFT),
    ]
    stats = dataset_stats(Scene.from_records(records))
    assert stats["vehicles"] == 2
    assert stats["maneuvers"] == {"left": 1, "straight": 1}
    assert stats["agents_per_frame"] == {"min": 1, "mean": 1.5, "max": 2}
    assert stats["light_constrained_share"] == 0.5


def test_scene_rejects_duplicate_agents():
    with pytest.raises(RecordError):
        Scene({0: [_record(0, 1, 0, 0), _record(0, 1, 1, 1)]})
