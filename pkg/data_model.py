"""
SigTraj - Data Model
Agent-frame records, scenes, observation/prediction windows, and CSV ingestion
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from sdg import zones_for

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["Fid", "Aid", "x", "y", "Lid", "pa", "f", "mb", "lid", "ls", "lt"]
FRAME_PERIOD = 1.0 / 3.0
PIXEL_GRID = 1024.0


class RecordError(ValueError):
    """Invalid dataset row or file; message carries the line number when known"""


class Maneuver(str, Enum):
    STRAIGHT = "S"
    LEFT = "L"
    RIGHT = "R"


class LightState(str, Enum):
    RED = "R"
    GREEN = "G"
    YELLOW = "Y"


def snap(value):
    """Snap pixel coordinates to the 1/1024 px grid (exact float arithmetic on differences)"""
    return np.round(np.asarray(value, dtype=np.float64) * PIXEL_GRID) / PIXEL_GRID


@dataclass(frozen=True)
class AgentRecord:
    frame_id: int
    agent_id: int
    x: float
    y: float
    lane_id: int
    in_influence_area: bool
    head_of_queue: bool
    maneuver: Maneuver
    light_id: int
    light_state: LightState
    light_remaining: float

    def __post_init__(self):
        if self.frame_id < 0:
            raise RecordError(f"frame_id must be >= 0, got {self.frame_id}")
        if not self.light_remaining >= 0:
            raise RecordError(f"light_remaining must be >= 0, got {self.light_remaining}")
        if self.head_of_queue and not self.in_influence_area:
            raise RecordError(f"agent {self.agent_id} frame {self.frame_id}: head_of_queue outside influence area")
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise RecordError(f"agent {self.agent_id} frame {self.frame_id}: non-finite position")

    @property
    def position(self):
        return np.array([self.x, self.y])

    def to_row(self):
        return {
            "Fid": self.frame_id, "Aid": self.agent_id, "x": self.x, "y": self.y,
            "Lid": self.lane_id, "pa": int(self.in_influence_area), "f": int(self.head_of_queue),
            "mb": self.maneuver.value, "lid": self.light_id, "ls": self.light_state.value,
            "lt": self.light_remaining,
        }


@dataclass
class Scene:
    """Records grouped by frame; immutable once built"""
    frames: dict
    frame_period: float = FRAME_PERIOD
    map_meta: dict = None

    def __post_init__(self):
        ordered = {}
        for fid in sorted(self.frames):
            ids = [r.agent_id for r in self.frames[fid]]
            if len(ids) != len(set(ids)):
                raise RecordError(f"frame {fid}: duplicate agent ids")
            ordered[fid] = tuple(sorted(self.frames[fid], key=lambda r: r.agent_id))
        self.frames = ordered

    @classmethod
    def from_records(cls, records, frame_period=FRAME_PERIOD, map_meta=None):
        frames = {}
        for r in records:
            frames.setdefault(r.frame_id, []).append(r)
        return cls(frames, frame_period, map_meta)

    @property
    def frame_ids(self):
        return list(self.frames)

    @property
    def num_records(self):
        return sum(len(v) for v in self.frames.values())

    def records(self):
        for fid in self.frames:
            yield from self.frames[fid]

    def agent_ids(self):
        return sorted({r.agent_id for r in self.records()})


# === CSV / SIDECAR I/O ===

def _parse_flag(value, column, line):
    if value not in ("0", "1"):
        raise RecordError(f"line {line}: column {column} must be 0 or 1, got {value!r}")
    return value == "1"


def _parse_row(row, line):
    try:
        return AgentRecord(
            frame_id=int(row["Fid"]),
            agent_id=int(row["Aid"]),
            x=float(snap(float(row["x"]))),
            y=float(snap(float(row["y"]))),
            lane_id=int(row["Lid"]),
            in_influence_area=_parse_flag(row["pa"], "pa", line),
            head_of_queue=_parse_flag(row["f"], "f", line),
            maneuver=Maneuver(row["mb"]),
            light_id=int(row["lid"]),
            light_state=LightState(row["ls"]),
            light_remaining=float(row["lt"]),
        )
    except RecordError as e:
        if str(e).startswith("line "):
            raise
        raise RecordError(f"line {line}: {e}") from e
    except ValueError as e:
        raise RecordError(f"line {line}: {e}") from e


def parse_dataset(path, map_path=None):
    """Baca CSV dataset (header Fid,Aid,x,y,Lid,pa,f,mb,lid,ls,lt) menjadi Scene"""
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise RecordError(f"{path}: empty file, header required") from e
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise RecordError(f"{path}: missing columns {missing}")

    records = []
    seen = set()
    last_frame = -1
    for idx, row in enumerate(df.to_dict("records")):
        line = idx + 2
        rec = _parse_row(row, line)
        if rec.frame_id < last_frame:
            raise RecordError(f"line {line}: frame {rec.frame_id} after frame {last_frame} (non-monotone)")
        key = (rec.frame_id, rec.agent_id)
        if key in seen:
            raise RecordError(f"line {line}: duplicate (Fid, Aid) = {key}")
        seen.add(key)
        last_frame = rec.frame_id
        records.append(rec)

    map_meta = load_map_sidecar(map_path) if map_path else None
    scene = Scene.from_records(records, map_meta=map_meta)
    logger.info(f"📄 Parsed {len(records)} records over {len(scene.frames)} frames from {path}")
    return scene


def serialize_scene(scene, path):
    """Tulis Scene ke CSV (UTF-8, LF)"""
    rows = [r.to_row() for r in scene.records()]
    df = pd.DataFrame(rows, columns=CSV_COLUMNS)
    df.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return path


def load_map_sidecar(path):
    with open(path, encoding="utf-8") as f:
        meta = json.load(f)
    for key in ("lights", "lanes", "influence_areas"):
        meta.setdefault(key, [])
    return meta


def write_map_sidecar(meta, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return path


# === WINDOWS ===

@dataclass(frozen=True, eq=False)
class TrajectoryWindow:
    """8 observed frames + 12 target frames for agents present throughout"""
    start_frame: int
    agent_ids: tuple
    obs: tuple
    target_xy: np.ndarray
    in_intersection: np.ndarray = None
    frame_ids: tuple = field(default=())
    obs_xy: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.agent_ids)
        if n == 0:
            raise RecordError("window without agents")
        if len(self.obs) != n or any(len(seq) != len(self.obs[0]) for seq in self.obs):
            raise RecordError("obs must hold one equal-length record sequence per agent")
        target = snap(self.target_xy)
        if target.ndim != 3 or target.shape[0] != n or target.shape[2] != 2:
            raise RecordError(f"target must be (N, pred_len, 2), got {target.shape}")
        object.__setattr__(self, "target_xy", target)
        frames = tuple(r.frame_id for r in self.obs[0])
        for seq in self.obs:
            if tuple(r.frame_id for r in seq) != frames:
                raise RecordError("obs frames differ between agents")
        if any(b - a != 1 for a, b in zip(frames[:-1], frames[1:])):
            raise RecordError(f"obs frames not contiguous: {frames}")
        if self.in_intersection is None:
            object.__setattr__(self, "in_intersection", np.zeros((n, len(frames)), dtype=bool))
        object.__setattr__(self, "frame_ids", frames)
        object.__setattr__(self, "obs_xy", snap([[[r.x, r.y] for r in seq] for seq in self.obs]))

    @property
    def num_agents(self):
        return len(self.agent_ids)

    @property
    def obs_len(self):
        return len(self.obs[0])

    @property
    def pred_len(self):
        return self.target_xy.shape[1]

    def frame_records(self, t):
        """Records of every agent at observed step t"""
        return [seq[t] for seq in self.obs]


def window_scene(scene, obs_len=8, pred_len=12, stride=1):
    """Potong scene menjadi window obs_len + pred_len frame yang kontigu"""
    span = obs_len + pred_len
    fids = scene.frame_ids
    by_frame = {fid: {r.agent_id: r for r in scene.frames[fid]} for fid in fids}
    zones = _zone_lookup(scene)
    windows = []
    for start in range(0, len(fids) - span + 1, stride):
        frames = fids[start:start + span]
        if frames[-1] - frames[0] != span - 1:
            continue
        present = set(by_frame[frames[0]])
        for fid in frames[1:]:
            present &= set(by_frame[fid])
        if not present:
            continue
        agents = tuple(sorted(present))
        obs = tuple(tuple(by_frame[fid][a] for fid in frames[:obs_len]) for a in agents)
        target = np.array([[[by_frame[fid][a].x, by_frame[fid][a].y] for fid in frames[obs_len:]] for a in agents])
        inter = np.array([[zones(r) for r in seq] for seq in obs], dtype=bool)
        windows.append(TrajectoryWindow(frames[0], agents, obs, target, inter))
    logger.info(f"🪟 {len(windows)} windows from {len(fids)} frames (obs {obs_len}, pred {pred_len})")
    return windows


def window_from_arrays(obs_xy, target_xy, lane_ids=None, start_frame=0, contexts=None):
    """Build a window straight from coordinates (synthetic fixtures, gradient checks).

    contexts: optional (N, obs_len) nested list of dicts overriding AgentRecord fields.
    """
    obs_xy = snap(obs_xy)
    n, obs_len = obs_xy.shape[:2]
    lane_ids = [1] * n if lane_ids is None else list(lane_ids)
    obs = []
    for i in range(n):
        seq = []
        for t in range(obs_len):
            fields_ = {
                "lane_id": lane_ids[i], "in_influence_area": False, "head_of_queue": False,
                "maneuver": Maneuver.STRAIGHT, "light_id": 1, "light_state": LightState.GREEN,
                "light_remaining": 10.0,
            }
            if contexts is not None:
                fields_.update(contexts[i][t])
            seq.append(AgentRecord(start_frame + t, i + 1, float(obs_xy[i, t, 0]), float(obs_xy[i, t, 1]), **fields_))
        obs.append(tuple(seq))
    return TrajectoryWindow(start_frame, tuple(range(1, n + 1)), tuple(obs), np.asarray(target_xy, dtype=np.float64))


def _zone_lookup(scene):
    meta = scene.map_meta
    if not meta or not meta.get("intersections"):
        return lambda record: False
    return lambda record: bool(zones_for(np.array([[record.x, record.y]]), meta)[0])


@dataclass(frozen=True, eq=False)
class RelativeWindow:
    """Displacement encoding: origin = first observed position per agent"""
    origin: np.ndarray
    obs_rel: np.ndarray
    target_rel: np.ndarray


def to_relative(window):
    obs = window.obs_xy
    origin = obs[:, 0, :].copy()
    obs_rel = np.zeros_like(obs)
    obs_rel[:, 1:] = obs[:, 1:] - obs[:, :-1]
    target_rel = np.empty_like(window.target_xy)
    target_rel[:, 0] = window.target_xy[:, 0] - obs[:, -1]
    target_rel[:, 1:] = window.target_xy[:, 1:] - window.target_xy[:, :-1]
    return RelativeWindow(origin, obs_rel, target_rel)


def from_relative(rel):
    """Inverse of to_relative -> (obs_xy, target_xy)"""
    obs = np.empty_like(rel.obs_rel)
    obs[:, 0] = rel.origin
    for t in range(1, obs.shape[1]):
        obs[:, t] = obs[:, t - 1] + rel.obs_rel[:, t]
    target = np.empty_like(rel.target_rel)
    prev = obs[:, -1]
    for t in range(target.shape[1]):
        target[:, t] = prev + rel.target_rel[:, t]
        prev = target[:, t]
    return obs, target


# === STATISTICS ===

def dataset_stats(scene):
    """Statistik dataset: manuver, agen per frame, porsi kendaraan terkendala lampu"""
    maneuvers = {}
    constrained = set()
    agents = set()
    for r in scene.records():
        if r.agent_id not in agents:
            agents.add(r.agent_id)
            maneuvers[r.maneuver.name.lower()] = maneuvers.get(r.maneuver.name.lower(), 0) + 1
        if r.in_influence_area:
            constrained.add(r.agent_id)
    per_frame = [len(v) for v in scene.frames.values()]
    cycles = {}
    for light in (scene.map_meta or {}).get("lights", []):
        cycles[str(light["id"])] = sum(p["dur"] for p in light.get("cycle", []))
    return {
        "frames": len(scene.frames),
        "records": scene.num_records,
        "vehicles": len(agents),
        "maneuvers": maneuvers,
        "agents_per_frame": {
            "min": min(per_frame) if per_frame else 0,
            "mean": float(np.mean(per_frame)) if per_frame else 0.0,
            "max": max(per_frame) if per_frame else 0,
        },
        "light_constrained_share": len(constrained) / len(agents) if agents else 0.0,
        "cycle_lengths": cycles,
    }
