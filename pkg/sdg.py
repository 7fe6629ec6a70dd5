"""
SigTraj - Spatial Interaction Graph
Per-frame visibility/distance/lane masks, sub-graph partitioning, and masked attention aggregation
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from matplotlib.path import Path
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from settings import ConfigError
from tensor_core import Tensor, TensorError, matmul, stack_rows

logger = logging.getLogger(__name__)

LANE_MODES = ("direction", "literal")


@dataclass
class SdgParams:
    """Frustum half-angles (radians), distance threshold (px), lane compatibility rule"""
    theta_road: float = math.radians(60.0)
    theta_intersection: float = math.radians(120.0)
    d_max: float = 150.0
    lane_mode: str = "direction"

    def __post_init__(self):
        for name in ("theta_road", "theta_intersection"):
            value = getattr(self, name)
            if not 0 < value <= math.pi:
                raise ConfigError(f"{name} must be in (0, pi], got {value}")
        if not self.d_max > 0:
            raise ConfigError(f"d_max must be > 0, got {self.d_max}")
        if self.lane_mode not in LANE_MODES:
            raise ConfigError(f"lane_mode must be one of {LANE_MODES}, got {self.lane_mode!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(eq=False)
class AdjacencyMask:
    agent_ids: tuple
    V: np.ndarray
    D: np.ndarray
    L: np.ndarray
    R: np.ndarray
    frame_id: int = None

    @property
    def size(self):
        return len(self.agent_ids)


def zones_for(positions, map_meta):
    """True where a position lies inside any intersection polygon of the map sidecar"""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    inside = np.zeros(len(positions), dtype=bool)
    for zone in (map_meta or {}).get("intersections", []):
        inside |= Path(np.asarray(zone["polygon"], dtype=np.float64)).contains_points(positions)
    return inside


def headings_from_positions(obs_xy, t):
    """Last nonzero displacement of each agent up to observed step t; zero vector when none"""
    obs_xy = np.asarray(obs_xy, dtype=np.float64)
    headings = np.zeros((obs_xy.shape[0], 2))
    for i in range(obs_xy.shape[0]):
        for s in range(t, 0, -1):
            step = obs_xy[i, s] - obs_xy[i, s - 1]
            if step[0] != 0.0 or step[1] != 0.0:
                headings[i] = step
                break
    return headings


def build_adjacency(agents, headings, params=None, in_intersection=None):
    """V/D/L masks and R = V*D*L for one frame.

    V[i, j] = 1 iff angle(heading_i, p_j - p_i) <= theta of i's zone, evaluated as
    dot >= cos(theta) * |h_i| * |p_j - p_i| so no arccos is involved. An agent with a
    zero heading sees every direction, and so does an agent whose half-angle is pi.
    The diagonal is 1 in every factor.
    """
    params = params or SdgParams()
    n = len(agents)
    if n < 1:
        raise TensorError("build_adjacency: at least one agent required")
    heads = np.asarray(headings, dtype=np.float64).reshape(-1, 2)
    if heads.shape != (n, 2):
        raise TensorError(f"build_adjacency: headings shape {heads.shape} for {n} agents")
    if not np.isfinite(heads).all():
        raise TensorError("build_adjacency: non-finite heading")

    pos = np.array([[a.x, a.y] for a in agents], dtype=np.float64)
    dx = pos[None, :, 0] - pos[:, None, 0]
    dy = pos[None, :, 1] - pos[:, None, 1]
    dist = np.sqrt(dx * dx + dy * dy)

    hx, hy = heads[:, 0:1], heads[:, 1:2]
    hnorm = np.sqrt(hx * hx + hy * hy)
    zone = np.zeros(n, dtype=bool) if in_intersection is None else np.asarray(in_intersection, dtype=bool)
    theta = np.where(zone, params.theta_intersection, params.theta_road)[:, None]
    dot = hx * dx + hy * dy
    V = (dot >= np.cos(theta) * hnorm * dist) | (hnorm == 0.0) | (theta >= math.pi)

    D = dist <= params.d_max

    lanes = np.array([a.lane_id for a in agents])
    if params.lane_mode == "literal":
        L = lanes[:, None] == lanes[None, :]
    else:
        L = np.sign(lanes)[:, None] == np.sign(lanes)[None, :]

    R = V & D & L
    np.fill_diagonal(R, True)
    frame = agents[0].frame_id if hasattr(agents[0], "frame_id") else None
    return AdjacencyMask(
        tuple(a.agent_id for a in agents),
        V.astype(np.uint8), D.astype(np.uint8), L.astype(np.uint8), R.astype(np.uint8),
        frame,
    )


def partition_subgraphs(mask):
    """Weakly-connected components of R, each as a list of agent ids, ordered by first member"""
    count, labels = connected_components(csr_matrix(mask.R), directed=True, connection="weak")
    groups = {}
    for idx, label in enumerate(labels):
        groups.setdefault(int(label), []).append(mask.agent_ids[idx])
    components = sorted(groups.values(), key=lambda c: mask.agent_ids.index(c[0]))
    logger.debug(f"🔗 {count} sub-graphs over {mask.size} agents")
    return components


def spatial_aggregate(hidden, mask, head):
    """hs_i = sum_j a_ij h_j with a_ij the attention of i over {j : R[i, j] = 1}.

    `hidden` is an (N, D) tensor or a list of N row tensors; returns (N, D).
    """
    H = hidden if isinstance(hidden, Tensor) else stack_rows(hidden)
    if H.ndim != 2 or H.shape[0] != mask.size:
        raise TensorError(f"spatial_aggregate: hidden {H.shape} for {mask.size} agents")
    weights = head.attend(H, H, mask=mask.R.astype(bool))
    return matmul(weights, H)


def dump_masks_csv(masks, path):
    """Debug dump: one row per (frame, i, j) with the four mask bits"""
    rows = []
    for m in masks:
        for a, i in enumerate(m.agent_ids):
            for b, j in enumerate(m.agent_ids):
                rows.append((m.frame_id, i, j, m.V[a, b], m.D[a, b], m.L[a, b], m.R[a, b]))
    df = pd.DataFrame(rows, columns=["frame", "i", "j", "V", "D", "L", "R"])
    df.to_csv(path, index=False, lineterminator="\n")
    logger.info(f"🧭 Dumped {len(masks)} adjacency masks to {path}")
    return path
