"""
SigTraj - Intersection Simulator
Deterministic rule-based scene generator: signal cycles, influence areas, car-following, queuing, turning
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from data_model import (
    FRAME_PERIOD, AgentRecord, LightState, Maneuver, Scene, serialize_scene, snap,
    window_scene, write_map_sidecar,
)
from settings import ConfigError

logger = logging.getLogger(__name__)

LAYOUTS = ("crossroad", "tjunction", "roundabout")
LAYOUT_ARMS = {
    "crossroad": ("N", "E", "S", "W"),
    "tjunction": ("E", "S", "W"),
    "roundabout": ("N", "E", "S", "W"),
}
LAYOUT_GREEN = {"crossroad": 20.0, "tjunction": 15.0, "roundabout": 12.0}
YELLOW_TIME = 3.0
ALL_RED_TIME = 2.0
TRAFFIC_PROFILES = {"off_peak": 1.0, "rush": 2.0, "evening": 1.4}
MANEUVER_WEIGHTS = {Maneuver.STRAIGHT: 0.5, Maneuver.LEFT: 0.25, Maneuver.RIGHT: 0.25}

ARM_DIRS = {"N": (0.0, -1.0), "E": (1.0, 0.0), "S": (0.0, 1.0), "W": (-1.0, 0.0)}
ARM_IDS = {"N": 1, "E": 2, "S": 3, "W": 4}
CENTER = np.array([300.0, 300.0])
VEHICLE_SPACING = 14.0
SPAWN_CLEARANCE = 24.0


# === SIGNALS ===

@dataclass
class SignalCycle:
    """Ordered (state, seconds) phases repeated forever, shifted by offset"""
    phases: tuple
    offset: float = 0.0

    def __post_init__(self):
        self.phases = tuple((LightState(state), float(dur)) for state, dur in self.phases)
        if not self.phases:
            raise ConfigError("signal cycle needs at least one phase")
        for state, dur in self.phases:
            if not dur > 0:
                raise ConfigError(f"phase {state.value} duration must be > 0, got {dur}")

    @property
    def total(self):
        return sum(dur for _, dur in self.phases)

    def to_dict(self):
        return {"cycle": [{"state": s.value, "dur": d} for s, d in self.phases], "offset": self.offset}


def light_state_at(t, cycle):
    """(state, seconds until the next phase boundary) at time t"""
    if t < 0:
        raise ValueError(f"light_state_at: t must be >= 0, got {t}")
    tt = (t + cycle.offset) % cycle.total
    acc = 0.0
    for state, dur in cycle.phases:
        if tt < acc + dur:
            return state, acc + dur - tt
        acc += dur
    state, dur = cycle.phases[-1]
    return state, 0.0


def default_cycle(arm, green):
    """Two-phase plan: N/S arms first, E/W arms second, all-red clearance after each yellow"""
    half = green + YELLOW_TIME + ALL_RED_TIME
    if arm in ("N", "S"):
        return SignalCycle(((LightState.GREEN, green), (LightState.YELLOW, YELLOW_TIME),
                            (LightState.RED, 2 * half - green - YELLOW_TIME)))
    return SignalCycle(((LightState.RED, half), (LightState.GREEN, green),
                        (LightState.YELLOW, YELLOW_TIME), (LightState.RED, ALL_RED_TIME)))


# === SCENARIO ===

@dataclass
class ScenarioConfig:
    layout: str = "crossroad"
    lanes_per_arm: int = 2
    spawn_rate: float = 0.15
    speed_limit: float = 30.0
    turn_speed: float = 18.0
    influence_depth: float = 120.0
    right_turn_on_red: bool = True
    seed: int = 0
    traffic_profile: str = "off_peak"
    green_time: float = None
    arm_length: float = 300.0
    lane_width: float = 12.0
    accel: float = 10.0
    decel: float = 20.0
    cycles: dict = field(default_factory=dict)
    scripted: list = field(default_factory=list)

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ConfigError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.lanes_per_arm < 1:
            raise ConfigError(f"lanes_per_arm must be >= 1, got {self.lanes_per_arm}")
        if self.spawn_rate < 0:
            raise ConfigError(f"spawn_rate must be >= 0, got {self.spawn_rate}")
        if self.traffic_profile not in TRAFFIC_PROFILES:
            raise ConfigError(f"traffic_profile must be one of {sorted(TRAFFIC_PROFILES)}")
        for name in ("speed_limit", "turn_speed", "influence_depth", "arm_length", "lane_width", "accel", "decel"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.influence_depth > self.arm_length - self.box_half:
            raise ConfigError(f"influence_depth {self.influence_depth} exceeds the approach length")
        for arm in self.cycles:
            if arm not in self.arms:
                raise ConfigError(f"cycle override for arm {arm!r} not in layout {self.layout}")
        for spawn in self.scripted:
            if spawn.get("arm") not in self.arms:
                raise ConfigError(f"scripted spawn on unknown arm {spawn.get('arm')!r}")

    @property
    def arms(self):
        return LAYOUT_ARMS[self.layout]

    @property
    def box_half(self):
        extra = 30.0 if self.layout == "roundabout" else 6.0
        return self.lanes_per_arm * self.lane_width + extra

    def cycle_for(self, arm):
        override = self.cycles.get(arm)
        if override is None:
            return default_cycle(arm, self.green_time or LAYOUT_GREEN[self.layout])
        if isinstance(override, SignalCycle):
            return override
        if isinstance(override, dict):
            return SignalCycle(tuple(override["phases"]), float(override.get("offset", 0.0)))
        return SignalCycle(tuple(override))

    def to_dict(self):
        data = asdict(self)
        data["cycles"] = {arm: self.cycle_for(arm).to_dict() for arm in sorted(self.cycles)}
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        cycles = {}
        for arm, spec in data.pop("cycles", {}).items():
            if isinstance(spec, dict) and "cycle" in spec:
                cycles[arm] = {"phases": [(p["state"], p["dur"]) for p in spec["cycle"]], "offset": spec.get("offset", 0.0)}
            else:
                cycles[arm] = spec
        return cls(cycles=cycles, **data)


# === GEOMETRY ===

def _right_of(u):
    return np.array([-u[1], u[0]])


def _direction_sign(u):
    """+ for southbound/eastbound travel, - for northbound/westbound"""
    return 1 if u[0] + u[1] > 0 else -1


def exit_arm(arm, maneuver):
    u_in = -np.array(ARM_DIRS[arm])
    if maneuver == Maneuver.STRAIGHT:
        target = u_in
    elif maneuver == Maneuver.RIGHT:
        target = _right_of(u_in)
    else:
        target = -_right_of(u_in)
    for name, d in ARM_DIRS.items():
        if np.allclose(d, target):
            return name
    raise ConfigError(f"no exit for {arm} {maneuver}")


class Route:
    """Polyline for one (arm, maneuver, lane); arc length s runs from the arm end"""

    def __init__(self, config, arm, maneuver, lane):
        self.arm = arm
        self.maneuver = maneuver
        self.lane = lane
        self.exit = exit_arm(arm, maneuver)
        self.light_id = ARM_IDS[arm]
        u_in = -np.array(ARM_DIRS[arm])
        u_out = np.array(ARM_DIRS[self.exit])
        lat = config.lane_width * (lane - 0.5)
        h = config.box_half

        start = CENTER + np.array(ARM_DIRS[arm]) * config.arm_length + _right_of(u_in) * lat
        entry = CENTER + np.array(ARM_DIRS[arm]) * h + _right_of(u_in) * lat
        leave = CENTER + u_out * h + _right_of(u_out) * lat
        end = CENTER + u_out * config.arm_length + _right_of(u_out) * lat
        points = [start, entry] + self._middle(config, entry, leave, u_in) + [leave, end]

        cleaned = [points[0]]
        for p in points[1:]:
            if np.hypot(*(p - cleaned[-1])) > 1e-9:
                cleaned.append(p)
        self.points = np.array(cleaned)
        seg = np.diff(self.points, axis=0)
        self.lengths = np.hypot(seg[:, 0], seg[:, 1])
        self.units = seg / self.lengths[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(self.lengths)])
        self.length = float(self.cum[-1])
        self.s_stop = config.arm_length - h
        self.s_exit = float(self.cum[np.argmin(np.hypot(*(self.points - leave).T))])
        self.in_lane = _direction_sign(u_in) * (10 * ARM_IDS[arm] + lane)
        self.out_lane = _direction_sign(u_out) * (100 + 10 * ARM_IDS[self.exit] + lane)

    def _middle(self, config, entry, leave, u_in):
        if config.layout == "roundabout":
            radius = config.box_half - 8.0
            a_in = math.atan2(*(entry - CENTER)[::-1])
            a_out = math.atan2(*(leave - CENTER)[::-1])
            sweep = (a_in - a_out) % (2 * math.pi)
            return [CENTER + radius * np.array([math.cos(a), math.sin(a)])
                    for a in (a_in - sweep * i / 12 for i in range(13))]
        if self.maneuver == Maneuver.STRAIGHT:
            return []
        control = entry + u_in * float(np.dot(leave - entry, u_in))
        return [(1 - tau) ** 2 * entry + 2 * (1 - tau) * tau * control + tau ** 2 * leave
                for tau in np.linspace(0.0, 1.0, 9)[1:-1]]

    def position(self, s):
        k = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.lengths) - 1))
        return self.points[k] + self.units[k] * (s - self.cum[k])

    def lane_id(self, s):
        return self.in_lane if s < self.s_exit else self.out_lane


@dataclass
class Vehicle:
    agent_id: int
    route: Route
    s: float
    v: float

    @property
    def maneuver(self):
        return self.route.maneuver


class IntersectionSimulator:
    """Steps vehicles at the frame period; record at frame f, then move to f+1"""

    def __init__(self, config):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.cycles = {arm: config.cycle_for(arm) for arm in config.arms}
        self.routes = {}
        self.vehicles = []
        self.next_id = 1
        self.dt = FRAME_PERIOD

        # Statistics
        self.stats = {
            'spawned': 0,
            'spawns_blocked': 0,
            'exited': 0,
            'records': 0,
        }

    def route(self, arm, maneuver, lane):
        key = (arm, maneuver, lane)
        if key not in self.routes:
            self.routes[key] = Route(self.config, arm, maneuver, lane)
        return self.routes[key]

    def allowed_maneuvers(self, arm):
        return [m for m in MANEUVER_WEIGHTS if exit_arm(arm, m) in self.config.arms]

    def _pick_maneuver(self, arm, u):
        options = self.allowed_maneuvers(arm)
        weights = np.array([MANEUVER_WEIGHTS[m] for m in options])
        cdf = np.cumsum(weights / weights.sum())
        return options[min(int(np.searchsorted(cdf, u, side="right")), len(options) - 1)]

    def _spawn(self, arm, maneuver, lane, speed=None):
        route = self.route(arm, maneuver, lane)
        for other in self.vehicles:
            if other.route.arm == arm and other.route.lane == lane and other.s < SPAWN_CLEARANCE:
                self.stats['spawns_blocked'] += 1
                return None
        vehicle = Vehicle(self.next_id, route, 0.0, self.config.speed_limit if speed is None else float(speed))
        self.next_id += 1
        self.vehicles.append(vehicle)
        self.stats['spawned'] += 1
        return vehicle

    def spawn_step(self, frame):
        cfg = self.config
        for spawn in cfg.scripted:
            if int(spawn["frame"]) == frame:
                maneuver = Maneuver(spawn.get("maneuver", "S"))
                if maneuver not in self.allowed_maneuvers(spawn["arm"]):
                    raise ConfigError(f"scripted maneuver {maneuver.value} impossible from arm {spawn['arm']}")
                self._spawn(spawn["arm"], maneuver, int(spawn.get("lane", 1)), spawn.get("speed"))
        p = cfg.spawn_rate * TRAFFIC_PROFILES[cfg.traffic_profile] * self.dt
        for arm in cfg.arms:
            u_spawn, u_lane, u_man = self.rng.random(3)
            if u_spawn < p:
                lane = 1 + min(int(u_lane * cfg.lanes_per_arm), cfg.lanes_per_arm - 1)
                self._spawn(arm, self._pick_maneuver(arm, u_man), lane)

    def records_at(self, frame):
        cfg = self.config
        t = frame * self.dt
        flags = {}
        for veh in self.vehicles:
            r = veh.route
            flags[veh.agent_id] = r.s_stop - cfg.influence_depth <= veh.s <= r.s_stop
        heads = {}
        for veh in self.vehicles:
            if flags[veh.agent_id]:
                best = heads.get(veh.route.light_id)
                if best is None or veh.s > best.s:
                    heads[veh.route.light_id] = veh
        head_ids = {veh.agent_id for veh in heads.values()}
        records = []
        for veh in sorted(self.vehicles, key=lambda v: v.agent_id):
            x, y = snap(veh.route.position(veh.s))
            state, remaining = light_state_at(t, self.cycles[veh.route.arm])
            records.append(AgentRecord(
                frame_id=frame,
                agent_id=veh.agent_id,
                x=float(x),
                y=float(y),
                lane_id=veh.route.lane_id(veh.s),
                in_influence_area=flags[veh.agent_id],
                head_of_queue=veh.agent_id in head_ids,
                maneuver=veh.maneuver,
                light_id=veh.route.light_id,
                light_state=state,
                light_remaining=float(remaining),
            ))
        self.stats['records'] += len(records)
        return records

    def _must_stop(self, veh, frame):
        """Red now or at the next frame stops the vehicle; Yellow stops it unless the line is reachable in time"""
        cfg = self.config
        if veh.maneuver == Maneuver.RIGHT and cfg.right_turn_on_red:
            return False
        cycle = self.cycles[veh.route.arm]
        # same frame * dt stamps records_at uses
        now, remaining = light_state_at(frame * self.dt, cycle)
        nxt, _ = light_state_at((frame + 1) * self.dt, cycle)
        if now == LightState.RED or nxt == LightState.RED:
            return True
        if now == LightState.YELLOW:
            return veh.route.s_stop - veh.s > veh.v * remaining
        return False

    def _leader_gap(self, veh):
        r = veh.route
        on_exit = veh.s >= r.s_exit
        gap = math.inf
        for other in self.vehicles:
            if other is veh:
                continue
            o = other.route
            if on_exit:
                if other.s < o.s_exit or o.exit != r.exit or o.lane != r.lane:
                    continue
                delta = (other.s - o.s_exit) - (veh.s - r.s_exit)
            else:
                if other.s >= o.s_exit or o.arm != r.arm or o.lane != r.lane:
                    continue
                delta = other.s - veh.s
            if delta > 0 or (delta == 0 and other.agent_id < veh.agent_id):
                gap = min(gap, delta - VEHICLE_SPACING)
        return max(gap, 0.0)

    def move_step(self, frame):
        cfg = self.config
        updates = []
        for veh in self.vehicles:
            r = veh.route
            turning = r.maneuver != Maneuver.STRAIGHT or cfg.layout == "roundabout"
            slow_zone = turning and r.s_stop - 30.0 <= veh.s < r.s_exit
            target = cfg.turn_speed if slow_zone else cfg.speed_limit
            if veh.v > target:
                v = max(target, veh.v - cfg.decel * self.dt)
            else:
                v = min(target, veh.v + cfg.accel * self.dt)
            gap = self._leader_gap(veh)
            if gap < math.inf:
                v = min(v, gap / self.dt, math.sqrt(2 * cfg.decel * gap))
            stop = veh.s <= r.s_stop and self._must_stop(veh, frame)
            if stop:
                dist = r.s_stop - veh.s
                v = min(v, dist / self.dt, math.sqrt(2 * cfg.decel * dist))
            v = max(v, 0.0)
            s_new = veh.s + v * self.dt
            if stop:
                s_new = min(s_new, r.s_stop)
            updates.append((veh, s_new, (s_new - veh.s) / self.dt))
        for veh, s_new, v in updates:
            veh.s, veh.v = s_new, v
        before = len(self.vehicles)
        self.vehicles = [veh for veh in self.vehicles if veh.s < veh.route.length]
        self.stats['exited'] += before - len(self.vehicles)

    def run(self, frames):
        records = []
        for frame in range(frames):
            self.spawn_step(frame)
            records.extend(self.records_at(frame))
            self.move_step(frame)
        return records

    def map_meta(self):
        cfg = self.config
        h = cfg.box_half
        lights, lanes, areas = [], [], []
        for arm in cfg.arms:
            d = np.array(ARM_DIRS[arm])
            u_in = -d
            side = _right_of(u_in) * cfg.lanes_per_arm * cfg.lane_width
            near, far = CENTER + d * h, CENTER + d * (h + cfg.influence_depth)
            lights.append({"id": ARM_IDS[arm], "arm": arm, **self.cycles[arm].to_dict()})
            areas.append({"light_id": ARM_IDS[arm], "polygon": [list(p) for p in (near, near + side, far + side, far)]})
            for lane in range(1, cfg.lanes_per_arm + 1):
                lanes.append({"id": _direction_sign(u_in) * (10 * ARM_IDS[arm] + lane), "arm": arm, "role": "approach"})
                lanes.append({"id": _direction_sign(d) * (100 + 10 * ARM_IDS[arm] + lane), "arm": arm, "role": "exit"})
        box = [list(CENTER + np.array(c) * h) for c in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
        return {
            "layout": cfg.layout,
            "center": list(CENTER),
            "stop_line_offset": h,
            "lights": lights,
            "lanes": lanes,
            "influence_areas": areas,
            "intersections": [{"id": 1, "polygon": box}],
        }

    def get_stats(self):
        return self.stats


def generate_scene(config, frames, obs_len=8, pred_len=12):
    """Run the simulator for `frames` frames (3 fps) and return the recorded Scene"""
    if frames < obs_len + pred_len:
        raise ConfigError("insufficient frames for one window")
    sim = IntersectionSimulator(config)
    records = sim.run(frames)
    scene = Scene.from_records(records, map_meta=sim.map_meta())
    logger.info(
        f"🚦 Generated {config.layout} scene (seed {config.seed}): {frames} frames, "
        f"{sim.stats['spawned']} vehicles, {len(records)} records"
    )
    return scene


def generate_scenes(configs, frames, workers=1):
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda cfg: generate_scene(cfg, frames), configs))


# === SPLITS ===

def labeled_splits(windows, ratios=(4, 1, 1), seed=0, block=1):
    """Disjoint seeded train/val/test split of windows, grouped into blocks of consecutive start frames.

    val and test get floor(n * r / sum(ratios)) windows (exact for block=1), train the rest.
    """
    if isinstance(windows, Scene):
        windows = window_scene(windows)
    n = len(windows)
    total = sum(ratios)
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
    if n < total:
        raise ConfigError(f"{n} windows are too few for a {':'.join(map(str, ratios))} split")
    if block < 1:
        raise ConfigError(f"block must be >= 1, got {block}")
    n_val = n * ratios[1] // total
    n_test = n * ratios[2] // total
    ordered = sorted(windows, key=lambda w: w.start_frame)
    blocks = [ordered[i:i + block] for i in range(0, n, block)]
    train, val, test = [], [], []
    for b in np.random.default_rng(seed).permutation(len(blocks)):
        if len(val) < n_val:
            val.extend(blocks[b])
        elif len(test) < n_test:
            test.extend(blocks[b])
        else:
            train.extend(blocks[b])
    if not train:
        raise ConfigError("split left the training set empty; lower the block size")
    key = lambda w: w.start_frame  # noqa: E731
    return sorted(train, key=key), sorted(val, key=key), sorted(test, key=key)


def covered_frames(windows):
    return {fid for w in windows for fid in range(w.start_frame, w.start_frame + w.obs_len + w.pred_len)}


def split_scene(scene, windows, exclude=()):
    """Sub-scene holding every record of the frames the windows cover, minus `exclude` frames"""
    frames = sorted(covered_frames(windows) - set(exclude))
    return Scene({fid: scene.frames[fid] for fid in frames if fid in scene.frames},
                 scene.frame_period, scene.map_meta)



# === VALIDATORS ===

def _tracks(scene):
    tracks = {}
    for r in scene.records():
        tracks.setdefault(r.agent_id, []).append(r)
    return tracks


def check_signal_obedience(scene):
    """(agent, frame) pairs where a non-right-turning vehicle left its influence area across the
    stop line while the light was Red at either end of the step"""
    violations = []
    for agent, track in _tracks(scene).items():
        for a, b in zip(track[:-1], track[1:]):
            if b.frame_id != a.frame_id + 1 or a.maneuver == Maneuver.RIGHT:
                continue
            if a.in_influence_area and not b.in_influence_area:
                if LightState.RED in (a.light_state, b.light_state):
                    violations.append((agent, a.frame_id))
    return violations


def check_head_of_queue(scene):
    """(frame, light) pairs with more than one head-of-queue vehicle"""
    bad = []
    for fid, records in scene.frames.items():
        counts = {}
        for r in records:
            if r.head_of_queue:
                counts[r.light_id] = counts.get(r.light_id, 0) + 1
        bad.extend((fid, lid) for lid, c in sorted(counts.items()) if c > 1)
    return bad


def generate_dataset(config, frames, out_dir, obs_len=8, pred_len=12, ratios=(4, 1, 1), block=None):
    """Scene + map sidecar + train/val/test CSVs under out_dir; returns {name: path}"""
    scene = generate_scene(config, frames, obs_len, pred_len)
    windows = window_scene(scene, obs_len, pred_len)
    block = obs_len + pred_len if block is None else block
    if len(windows) < sum(ratios):
        raise ConfigError(f"scene yields {len(windows)} windows, too few for a split; raise --frames or --spawn-rate")
    train, val, test = labeled_splits(windows, ratios, config.seed, min(block, max(1, len(windows) // sum(ratios))))
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "scene": serialize_scene(scene, os.path.join(out_dir, "scene.csv")),
        "map": write_map_sidecar(scene.map_meta, os.path.join(out_dir, "map.json")),
    }
    # train drops frames a held-out window covers, so no target frame is trained on
    held_out = covered_frames(val) | covered_frames(test)
    trimmed = len(covered_frames(train) & held_out)
    for name, split, exclude in (("train", train, held_out), ("val", val, ()), ("test", test, ())):
        paths[name] = serialize_scene(split_scene(scene, split, exclude), os.path.join(out_dir, f"{name}.csv"))
    logger.debug(f"✂️  Trimmed {trimmed} boundary frames from train")
    logger.info(f"💾 Dataset written to {out_dir}: {len(train)}/{len(val)}/{len(test)} windows")
    return paths
