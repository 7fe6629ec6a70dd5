"""
SigTraj - Metrics & Evaluation
ADE/FDE, best-of-K evaluation reports, JSON/CSV report and trace writers
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from predictor import predict_k

logger = logging.getLogger(__name__)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} must both be (T, 2)")
    if pred.shape[0] == 0:
        raise ValueError("empty trajectory")
    return pred, gt


def ade(pred, gt, squared=False):
    """(1/T) sum_t ||pred_t - gt_t||; squared=True averages squared distances instead"""
    pred, gt = _pair(pred, gt)
    sq = ((pred - gt) ** 2).sum(axis=1)
    return float(sq.mean() if squared else np.sqrt(sq).mean())


def fde(pred, gt):
    """||pred_T - gt_T||"""
    pred, gt = _pair(pred, gt)
    return float(np.sqrt(((pred[-1] - gt[-1]) ** 2).sum()))


@dataclass
class EvalReport:
    ade: float
    fde: float
    min_fde: float
    k: int
    fingerprint: str
    n_agents: int
    n_windows: int
    squared: bool = False
    per_window: list = field(default_factory=list)
    by_maneuver: dict = field(default_factory=dict)
    by_light: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _group_means(groups):
    return {
        name: {
            "agents": len(rows),
            "ade": float(np.mean([r[0] for r in rows])),
            "fde": float(np.mean([r[1] for r in rows])),
        }
        for name, rows in sorted(groups.items()) if rows
    }


def best_of_k(samples, gt, squared=False):
    """Per agent: index of the min-ADE sample, its ADE and FDE, and the independent min FDE"""
    k, n = samples.shape[:2]
    rows = []
    for i in range(n):
        ades = [ade(samples[s, i], gt[i], squared) for s in range(k)]
        fdes = [fde(samples[s, i], gt[i]) for s in range(k)]
        best = int(np.argmin(ades))
        rows.append((best, ades[best], fdes[best], min(fdes)))
    return rows


def evaluate_predictions(windows, samples, fingerprint="", squared=False):
    """Best-of-K metrics for precomputed samples (one (K, N, T, 2) array per window)"""
    if not windows:
        raise ValueError("evaluation set is empty")
    if len(samples) != len(windows):
        raise ValueError(f"{len(samples)} sample sets for {len(windows)} windows")
    k = int(np.asarray(samples[0]).shape[0])
    all_rows, per_window = [], []
    maneuvers, lights = {}, {"constrained": [], "free": []}
    for window, sample in zip(windows, samples):
        sample = np.asarray(sample, dtype=np.float64)
        if sample.shape != (k, window.num_agents, window.pred_len, 2):
            raise ValueError(f"window {window.start_frame}: samples {sample.shape}")
        rows = best_of_k(sample, window.target_xy, squared)
        all_rows.extend(rows)
        per_window.append({
            "start_frame": window.start_frame,
            "n_agents": window.num_agents,
            "ade": float(np.mean([r[1] for r in rows])),
            "fde": float(np.mean([r[2] for r in rows])),
            "min_fde": float(np.mean([r[3] for r in rows])),
        })
        for seq, row in zip(window.obs, rows):
            maneuvers.setdefault(seq[-1].maneuver.name.lower(), []).append(row[1:3])
            key = "constrained" if any(r.in_influence_area for r in seq) else "free"
            lights[key].append(row[1:3])

    report = EvalReport(
        ade=float(np.mean([r[1] for r in all_rows])),
        fde=float(np.mean([r[2] for r in all_rows])),
        min_fde=float(np.mean([r[3] for r in all_rows])),
        k=k,
        fingerprint=fingerprint,
        n_agents=len(all_rows),
        n_windows=len(windows),
        squared=squared,
        per_window=per_window,
        by_maneuver=_group_means(maneuvers),
        by_light=_group_means(lights),
    )
    return report


def window_seed(window, base):
    """Noise seed keyed by window identity, so reordering or repeating windows keeps their samples"""
    return [int(base), int(window.start_frame), *(int(a) for a in window.agent_ids)]


def sample_windows(windows, model, k=None, seed=None, workers=None):
    """predict_k for every window, each drawing noise from window_seed(window, seed)"""
    base = model.hp.seed if seed is None else seed
    workers = workers or model.hp.workers
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda w: predict_k(w, model, k, window_seed(w, base)), windows))


def evaluate(windows, model, k=None, seed=None, squared=False):
    """Best-of-K ADE/FDE over a window set"""
    if not windows:
        raise ValueError("evaluation set is empty")
    samples = sample_windows(windows, model, k, seed)
    report = evaluate_predictions(windows, samples, model.fingerprint, squared)
    logger.info(f"🎯 Eval K={report.k}: ADE {report.ade:.3f} FDE {report.fde:.3f} over {report.n_agents} agents")
    return report


# === WRITERS ===

def write_report_json(report, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    return path


def write_report_csv(report, path):
    """One row per window plus a closing `all` row"""
    rows = [dict(r) for r in report.per_window]
    rows.append({"start_frame": "all", "n_agents": report.n_agents,
                 "ade": report.ade, "fde": report.fde, "min_fde": report.min_fde})
    pd.DataFrame(rows, columns=["start_frame", "n_agents", "ade", "fde", "min_fde"]).to_csv(
        path, index=False, lineterminator="\n")
    return path


def write_trace_csv(windows, samples, path, squared=False):
    """Plot-ready trace: observed, ground-truth and best-sample predicted points per agent"""
    rows = []
    for w_idx, (window, sample) in enumerate(zip(windows, samples)):
        sample = np.asarray(sample)
        best = best_of_k(sample, window.target_xy, squared)
        for i, agent in enumerate(window.agent_ids):
            for t, (x, y) in enumerate(window.obs_xy[i]):
                rows.append((w_idx, window.start_frame, agent, "obs", t, x, y))
            for t, (x, y) in enumerate(window.target_xy[i]):
                rows.append((w_idx, window.start_frame, agent, "gt", window.obs_len + t, x, y))
            for t, (x, y) in enumerate(sample[best[i][0], i]):
                rows.append((w_idx, window.start_frame, agent, "pred", window.obs_len + t, x, y))
    df = pd.DataFrame(rows, columns=["window", "start_frame", "agent_id", "kind", "step", "x", "y"])
    df.to_csv(path, index=False, lineterminator="\n")
    return path
