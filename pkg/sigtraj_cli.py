"""
SigTraj - Command Line
Entry point untuk generate, train, eval, gradcheck, ablate, sweep-k, stats, runs
"""

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace

import pandas as pd

from data_model import RecordError, dataset_stats, parse_dataset, window_scene
from gradcheck_suite import TOLERANCE, run_suite
from metrics_eval import (
    evaluate, evaluate_predictions, sample_windows, write_report_csv, write_report_json,
    write_trace_csv,
)
from predictor import (
    ABLATIONS, FULL_CONFIG, HyperParams, ablation_label, apply_ablation, load_checkpoint,
    save_checkpoint, window_masks,
)
from run_store import RunStore
from sdg import LANE_MODES, SdgParams, dump_masks_csv
from settings import RUN_ROOT, ConfigError, canonical_json, config_hash, setup_logging, worker_count
from synth_sim import LAYOUTS, TRAFFIC_PROFILES, ScenarioConfig, generate_dataset
from tensor_core import TensorError
from trainer import TrainingDiverged, train, write_loss_curve

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

LIGHTS_OFF = "lights-off"


@dataclass
class RunConfig:
    """Everything a command needs to be replayed: parameter bundles, paths, seed"""
    command: str
    seed: int = 0
    hparams: dict = None
    sdg: dict = None
    scenario: dict = None
    paths: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def to_json(self):
        return canonical_json(self.to_dict())

    @property
    def run_id(self):
        return f"{self.command}-{config_hash(self.to_dict())}"


class RunContext:
    """Run directory + registry entry for one command invocation"""

    def __init__(self, config, run_root, store):
        self.config = config
        self.store = store
        self.run_id = config.run_id
        self.run_dir = os.path.join(run_root, self.run_id)
        os.makedirs(self.run_dir, exist_ok=True)
        config_path = self.path("config.json")
        with open(config_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(config.to_json())
        store.register_run(self.run_id, config.command, config.to_json(), self.run_dir)
        logger.info(f"🗂️  Run {self.run_id} -> {self.run_dir}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            status = "diverged" if issubclass(exc_type, TrainingDiverged) else "failed"
            self.store.finish_run(self.run_id, status)
            logger.warning(f"⚠️  Run {self.run_id} marked {status}: {exc}")
        return False

    def path(self, name):
        return os.path.join(self.run_dir, name)

    def artifact(self, kind, path):
        self.store.add_artifact(self.run_id, kind, path)
        return path


# === HELPERS ===

def _store(args):
    return RunStore(os.getenv("SIGTRAJ_DB") or os.path.join(args.run_root, "sigtraj.db"))


def _split_path(data, split):
    """A dataset directory resolves to <dir>/<split>.csv; a CSV path is used as is"""
    if os.path.isdir(data):
        return os.path.join(data, f"{split}.csv")
    return data


def _map_path(data, explicit=None):
    if explicit:
        return explicit
    directory = data if os.path.isdir(data) else os.path.dirname(data)
    candidate = os.path.join(directory, "map.json")
    return candidate if os.path.exists(candidate) else None


def load_windows(data, split, obs_len, pred_len, map_path=None):
    path = _split_path(data, split)
    if not os.path.exists(path):
        raise RecordError(f"dataset not found: {path}")
    scene = parse_dataset(path, _map_path(data, map_path))
    windows = window_scene(scene, obs_len, pred_len)
    if not windows:
        raise ConfigError(f"{path} yields no {obs_len}+{pred_len} windows")
    return windows


def hparams_from_args(args):
    hp = HyperParams()
    overrides = {
        name: getattr(args, name) for name in (
            "embed_dim", "hidden_dim", "input_dim", "attn_dim", "lr", "batch", "K", "obs_len",
            "pred_len", "k_window", "noise_dim", "epochs", "lambda_adv", "variety_mode",
            "train_k", "dtype", "seed",
        ) if getattr(args, name, None) is not None
    }
    hp = replace(hp, **overrides, workers=args.workers or worker_count())
    if getattr(args, "ablation", None):
        hp = apply_ablation(hp, args.ablation)
    if getattr(args, "lights", "on") == "off":
        hp = replace(hp, lights=False)
    return hp


def sdg_from_args(args):
    base = SdgParams()
    return SdgParams(
        theta_road=math.radians(args.theta_road) if args.theta_road is not None else base.theta_road,
        theta_intersection=(math.radians(args.theta_intersection)
                            if args.theta_intersection is not None else base.theta_intersection),
        d_max=args.d_max if args.d_max is not None else base.d_max,
        lane_mode=args.lane_mode or base.lane_mode,
    )


def _train_and_eval(train_windows, test_windows, hp, sdg_params, k, run_dir=None):
    model, _ = train(train_windows, hp, sdg_params, run_dir=run_dir)
    return evaluate(test_windows, model, k, seed=hp.seed)


# === COMMANDS ===

def cmd_generate(args):
    scenario = ScenarioConfig(
        layout=args.layout,
        lanes_per_arm=args.lanes,
        spawn_rate=args.spawn_rate,
        influence_depth=args.influence_depth,
        traffic_profile=args.traffic_profile,
        green_time=args.green_time,
        seed=args.seed,
    )
    ratios = tuple(args.ratios)
    config = RunConfig("generate", seed=args.seed, scenario=scenario.to_dict(),
                       options={"frames": args.frames, "ratios": list(ratios),
                                "obs_len": args.obs_len, "pred_len": args.pred_len})
    with RunContext(config, args.run_root, _store(args)) as ctx:
        out_dir = args.out or ctx.run_dir
        paths = generate_dataset(scenario, args.frames, out_dir, args.obs_len, args.pred_len, ratios)
        for kind, path in paths.items():
            ctx.artifact(kind, path)
        ctx.store.finish_run(ctx.run_id)

    print(f"\n✅ Dataset generated ({args.layout}, seed {args.seed}, {args.frames} frames)")
    for kind, path in paths.items():
        print(f"   {kind:6s} {path}")
    return EXIT_OK


def cmd_train(args):
    hp = hparams_from_args(args)
    sdg_params = sdg_from_args(args)
    config = RunConfig("train", seed=hp.seed, hparams=hp.to_dict(), sdg=sdg_params.to_dict(),
                       paths={"data": os.path.abspath(args.data)})
    windows = load_windows(args.data, "train", hp.obs_len, hp.pred_len, args.map)
    store = _store(args)

    print(f"\n🏋️  Training {ablation_label(hp)} on {len(windows)} windows for {hp.epochs} epochs")
    with RunContext(config, args.run_root, store) as ctx:
        model, curve = train(windows, hp, sdg_params, run_dir=ctx.run_dir, store=store, run_id=ctx.run_id)
        for path in save_checkpoint(model, ctx.path("checkpoint")):
            ctx.artifact("checkpoint", path)
        ctx.artifact("loss_curve", write_loss_curve(curve, ctx.path("loss.csv")))
        store.finish_run(ctx.run_id)

    if curve:
        last = curve[-1]
        print(f"📈 Final epoch {last.epoch}: gen {last.gen_loss:.4f}  disc {last.disc_loss:.4f}  ade {last.train_ade:.3f}")
    print(f"💾 Checkpoint: {ctx.path('checkpoint')}")
    return EXIT_OK


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    hp = model.hp
    k = args.K or hp.K
    seed = hp.seed if args.seed is None else args.seed
    config = RunConfig("eval", seed=seed, hparams=hp.to_dict(), sdg=model.sdg_params.to_dict(),
                       paths={"data": os.path.abspath(args.data), "checkpoint": os.path.abspath(args.checkpoint)},
                       options={"split": args.split, "K": k, "squared": args.squared,
                                "dump_masks": args.dump_masks})
    windows = load_windows(args.data, args.split, hp.obs_len, hp.pred_len, args.map)
    store = _store(args)
    with RunContext(config, args.run_root, store) as ctx:
        samples = sample_windows(windows, model, k, seed, args.workers or worker_count())
        report = evaluate_predictions(windows, samples, model.fingerprint, args.squared)
        store.log_evaluation(ctx.run_id, args.split, report)
        ctx.artifact("report", write_report_json(report, ctx.path("report.json")))
        ctx.artifact("report", write_report_csv(report, ctx.path("report.csv")))
        ctx.artifact("trace", write_trace_csv(windows, samples, ctx.path("trace.csv"), args.squared))
        if args.dump_masks:
            masks = [m for w in windows[:args.dump_masks] for m in window_masks(w, model)]
            ctx.artifact("masks", dump_masks_csv(masks, ctx.path("masks.csv")))
        store.finish_run(ctx.run_id)

    print(f"\n🎯 {args.split}: best-of-{report.k} over {report.n_agents} agents / {report.n_windows} windows")
    print("=" * 60)
    print(f"ADE:      {report.ade:.4f}")
    print(f"FDE:      {report.fde:.4f}")
    print(f"min FDE:  {report.min_fde:.4f}")
    for name, group in report.by_maneuver.items():
        print(f"  {name:12s} n={group['agents']:<5d} ADE {group['ade']:.3f}  FDE {group['fde']:.3f}")
    for name, group in report.by_light.items():
        print(f"  {name:12s} n={group['agents']:<5d} ADE {group['ade']:.3f}  FDE {group['fde']:.3f}")
    print("=" * 60)
    return EXIT_OK


def cmd_gradcheck(args):
    config = RunConfig("gradcheck", seed=args.seed, options={"max_probes": args.max_probes})
    with RunContext(config, args.run_root, _store(args)) as ctx:
        reports = run_suite(max_probes=args.max_probes, seed=args.seed)
        path = ctx.path("gradcheck.json")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump([r.to_dict() for r in reports], f, indent=2)
        ctx.artifact("gradcheck", path)
        failed = [r for r in reports if not r.ok]
        ctx.store.finish_run(ctx.run_id, "failed" if failed else "completed")

    print(f"\n🧮 Gradient checks (tolerance {TOLERANCE:g})")
    print("=" * 60)
    for r in reports:
        icon = "✅" if r.ok else "❌"
        print(f"{icon} {r.label:24s} max rel err {r.max_rel_err:.2e}  ({r.checked} probes)")
    print("=" * 60)
    if failed:
        print(f"❌ {len(failed)} of {len(reports)} checks failed")
        return EXIT_FAILURE
    print(f"✅ All {len(reports)} checks passed")
    return EXIT_OK


def _ablation_configs(base, labels):
    configs = []
    for label in labels:
        if label == LIGHTS_OFF:
            configs.append((label, replace(apply_ablation(base, FULL_CONFIG), lights=False)))
        else:
            configs.append((label, apply_ablation(base, label)))
    return configs


def cmd_ablate(args):
    base = hparams_from_args(args)
    sdg_params = sdg_from_args(args)
    labels = args.configs or list(ABLATIONS) + [LIGHTS_OFF]
    for label in labels:
        if label != LIGHTS_OFF and label not in ABLATIONS:
            raise ConfigError(f"unknown ablation {label!r}, expected one of {list(ABLATIONS) + [LIGHTS_OFF]}")
    config = RunConfig("ablate", seed=base.seed, hparams=base.to_dict(), sdg=sdg_params.to_dict(),
                       paths={"data": os.path.abspath(args.data)},
                       options={"seeds": list(args.seeds), "configs": labels})
    train_windows = load_windows(args.data, "train", base.obs_len, base.pred_len, args.map)
    test_windows = load_windows(args.data, "test", base.obs_len, base.pred_len, args.map)
    store = _store(args)
    with RunContext(config, args.run_root, store) as ctx:
        rows = []
        for seed in args.seeds:
            for label, hp in _ablation_configs(replace(base, seed=seed), labels):
                logger.info(f"🔬 Ablation {label} seed {seed}")
                report = _train_and_eval(train_windows, test_windows, hp, sdg_params, base.K, ctx.run_dir)
                store.log_evaluation(ctx.run_id, f"test:{label}:seed{seed}", report)
                rows.append({"config": label, "seed": seed, "ade": report.ade, "fde": report.fde})

        df = pd.DataFrame(rows, columns=["config", "seed", "ade", "fde"])
        path = ctx.path("ablation.csv")
        df.to_csv(path, index=False, lineterminator="\n")
        ctx.artifact("ablation", path)
        means = df.groupby("config", sort=False)[["ade", "fde"]].mean()
        store.finish_run(ctx.run_id)

    print(f"\n🔬 Ablation over seeds {list(args.seeds)}")
    print("=" * 60)
    for label, row in means.iterrows():
        marker = "*" if label == FULL_CONFIG else " "
        print(f"{marker} {label:16s} ADE {row['ade']:.4f}  FDE {row['fde']:.4f}")
    print("=" * 60)
    if FULL_CONFIG in means.index:
        full = means.loc[FULL_CONFIG, "ade"]
        beaten = [label for label in means.index if label != FULL_CONFIG and means.loc[label, "ade"] <= full]
        if beaten:
            print(f"⚠️  {FULL_CONFIG} is not strictly best; matched or beaten by {beaten}")
            return EXIT_FAILURE if args.strict else EXIT_OK
        print(f"✅ {FULL_CONFIG} has the lowest mean ADE")
    return EXIT_OK


def cmd_sweep_k(args):
    base = hparams_from_args(args)
    sdg_params = sdg_from_args(args)
    config = RunConfig("sweep-k", seed=base.seed, hparams=base.to_dict(), sdg=sdg_params.to_dict(),
                       paths={"data": os.path.abspath(args.data)},
                       options={"k_values": list(args.k_values), "seeds": list(args.seeds)})
    train_windows = load_windows(args.data, "train", base.obs_len, base.pred_len, args.map)
    test_windows = load_windows(args.data, "test", base.obs_len, base.pred_len, args.map)
    store = _store(args)
    with RunContext(config, args.run_root, store) as ctx:
        rows = []
        for k_window in args.k_values:
            for seed in args.seeds:
                hp = replace(base, k_window=k_window, seed=seed)
                logger.info(f"⏳ Sweep k_window={k_window} seed {seed}")
                report = _train_and_eval(train_windows, test_windows, hp, sdg_params, base.K, ctx.run_dir)
                store.log_evaluation(ctx.run_id, f"test:k{k_window}:seed{seed}", report)
                rows.append({"k_window": k_window, "seed": seed, "ade": report.ade, "fde": report.fde})

        path = ctx.path("sweep_k.csv")
        df = pd.DataFrame(rows, columns=["k_window", "seed", "ade", "fde"])
        df.to_csv(path, index=False, lineterminator="\n")
        ctx.artifact("sweep_k", path)
        store.finish_run(ctx.run_id)

    print("\n⏳ Time-window sweep")
    print("=" * 60)
    for k_window, row in df.groupby("k_window")[["ade", "fde"]].mean().iterrows():
        print(f"k={int(k_window):<3d} ADE {row['ade']:.4f}  FDE {row['fde']:.4f}")
    print("=" * 60)
    return EXIT_OK


def cmd_stats(args):
    path = _split_path(args.data, args.split)
    if not os.path.exists(path):
        raise RecordError(f"dataset not found: {path}")
    map_path = _map_path(args.data, args.map)
    scene = parse_dataset(path, map_path)
    stats = dataset_stats(scene)
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as f:
            json.dump(stats, f, indent=2, sort_keys=True)
    print(json.dumps(stats, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_runs(args):
    store = _store(args)
    if args.show:
        run = store.get_run(args.show)
        if run is None:
            print(f"❌ Run not found: {args.show}")
            return EXIT_FAILURE
        print(json.dumps(run, indent=2, sort_keys=True))
        return EXIT_OK

    runs = store.list_runs(limit=args.limit, command=args.command_filter)
    print(f"\n📋 Runs ({len(runs)}):")
    print("=" * 100)
    print(f"{'Run ID':<28} {'Command':<10} {'Status':<10} {'Created':<28} Directory")
    print("-" * 100)
    for run in runs:
        print(f"{run['run_id']:<28} {run['command']:<10} {run['status']:<10} {run['created_at']:<28} {run['run_dir']}")
    print("=" * 100)
    stats = store.get_stats()
    if stats['best_test_ade'] is not None:
        print(f"Best test ADE: {stats['best_test_ade']:.4f}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "sweep-k": cmd_sweep_k,
    "stats": cmd_stats,
    "runs": cmd_runs,
}


# === ARGUMENTS ===

def _add_model_args(parser):
    defaults = HyperParams()
    group = parser.add_argument_group("model")
    group.add_argument('--embed-dim', type=int, help=f'Position embedding size (default {defaults.embed_dim})')
    group.add_argument('--hidden-dim', type=int, help=f'LSTM hidden size (default {defaults.hidden_dim})')
    group.add_argument('--input-dim', type=int, help=f'Fused state size (default {defaults.input_dim})')
    group.add_argument('--attn-dim', type=int, help=f'Attention projection size (default {defaults.attn_dim})')
    group.add_argument('--lr', type=float, help=f'Adam learning rate (default {defaults.lr})')
    group.add_argument('--batch', type=int, help=f'Windows per minibatch (default {defaults.batch})')
    group.add_argument('-K', '--best-of', dest='K', type=int, help=f'Sampled futures per agent (default {defaults.K})')
    group.add_argument('--obs-len', type=int, help=f'Observed frames (default {defaults.obs_len})')
    group.add_argument('--pred-len', type=int, help=f'Predicted frames (default {defaults.pred_len})')
    group.add_argument('--k-window', type=int, help=f'Behavior graph time window (default {defaults.k_window})')
    group.add_argument('--noise-dim', type=int, help=f'Decoder noise size (default {defaults.noise_dim})')
    group.add_argument('--epochs', type=int, help=f'Training epochs (default {defaults.epochs})')
    group.add_argument('--lambda-adv', type=float, help='Weight of the adversarial term')
    group.add_argument('--variety-mode', choices=['norm', 'stepsum'], help='Distance used by the variety loss')
    group.add_argument('--train-k', type=int, help='Rollouts per window while training (default K)')
    group.add_argument('--dtype', choices=['float64', 'float32'], help='Tensor precision')
    group.add_argument('--seed', type=int, help='Random seed')
    group.add_argument('--ablation', choices=list(ABLATIONS), help='Ablation label')
    group.add_argument('--lights', choices=['on', 'off'], default='on', help='Traffic-light features')

    graph = parser.add_argument_group("spatial graph")
    graph.add_argument('--theta-road', type=float, help='Frustum half-angle on road segments (degrees)')
    graph.add_argument('--theta-intersection', type=float, help='Frustum half-angle inside intersections (degrees)')
    graph.add_argument('--d-max', type=float, help='Interaction distance threshold (px)')
    graph.add_argument('--lane-mode', choices=list(LANE_MODES), help='Lane compatibility rule')


def _add_data_args(parser):
    parser.add_argument('--data', type=str, required=True, help='Dataset directory or CSV file')
    parser.add_argument('--map', type=str, default=None, help='Map sidecar JSON (default <data>/map.json)')


def build_parser():
    parser = argparse.ArgumentParser(prog='sigtraj', description='Signal-aware trajectory prediction')
    parser.add_argument('--run-root', type=str, default=RUN_ROOT, help='Directory for run outputs')
    parser.add_argument('--workers', type=int, default=None, help='Rollout worker threads (default SIGTRAJ_WORKERS)')
    parser.add_argument('--log-level', type=str, default=None, help='Logging level')

    subparsers = parser.add_subparsers(dest='command', help='Command')

    # Generate command
    gen = subparsers.add_parser('generate', help='Generate a synthetic intersection dataset')
    gen.add_argument('--layout', choices=list(LAYOUTS), default='crossroad', help='Intersection layout')
    gen.add_argument('--frames', type=int, default=600, help='Frames to simulate (3 fps)')
    gen.add_argument('--seed', type=int, default=0, help='Scenario seed')
    gen.add_argument('--lanes', type=int, default=2, help='Lanes per arm')
    gen.add_argument('--spawn-rate', type=float, default=0.15, help='Vehicles per second per arm')
    gen.add_argument('--influence-depth', type=float, default=120.0, help='Influence area depth (px)')
    gen.add_argument('--traffic-profile', choices=sorted(TRAFFIC_PROFILES), default='off_peak', help='Traffic profile')
    gen.add_argument('--green-time', type=float, default=None, help='Green phase seconds (default per layout)')
    gen.add_argument('--ratios', type=int, nargs=3, default=[4, 1, 1], help='train/val/test ratio')
    gen.add_argument('--obs-len', type=int, default=8, help='Observed frames per window')
    gen.add_argument('--pred-len', type=int, default=12, help='Predicted frames per window')
    gen.add_argument('--out', type=str, default=None, help='Output directory (default run directory)')

    # Train command
    tr = subparsers.add_parser('train', help='Train a model')
    _add_data_args(tr)
    _add_model_args(tr)

    # Eval command
    ev = subparsers.add_parser('eval', help='Evaluate a checkpoint')
    _add_data_args(ev)
    ev.add_argument('--checkpoint', type=str, required=True, help='Checkpoint directory')
    ev.add_argument('--split', type=str, default='test', help='Split to evaluate')
    ev.add_argument('-K', '--best-of', dest='K', type=int, default=None, help='Sampled futures per agent')
    ev.add_argument('--seed', type=int, default=None, help='Sampling seed (default model seed)')
    ev.add_argument('--squared', action='store_true', help='Average squared distances for ADE')
    ev.add_argument('--dump-masks', type=int, default=0, metavar='N', help='Dump adjacency masks of the first N windows')

    # Gradcheck command
    gc = subparsers.add_parser('gradcheck', help='Finite-difference gradient checks')
    gc.add_argument('--max-probes', type=int, default=16, help='Entries probed per tensor')
    gc.add_argument('--seed', type=int, default=0, help='Probe seed')

    # Ablate command
    ab = subparsers.add_parser('ablate', help='Train and evaluate every ablation over several seeds')
    _add_data_args(ab)
    _add_model_args(ab)
    ab.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2], help='Seeds')
    ab.add_argument('--configs', type=str, nargs='+', default=None, help=f'Labels (default all plus {LIGHTS_OFF})')
    ab.add_argument('--strict', action='store_true', help='Exit 1 unless the full configuration is best')

    # Sweep-k command
    sw = subparsers.add_parser('sweep-k', help='Sweep the behavior graph time window')
    _add_data_args(sw)
    _add_model_args(sw)
    sw.add_argument('--k-values', type=int, nargs='+', default=[1, 2, 4, 6, 8], help='Time windows')
    sw.add_argument('--seeds', type=int, nargs='+', default=[0], help='Seeds')

    # Stats command
    st = subparsers.add_parser('stats', help='Dataset statistics')
    _add_data_args(st)
    st.add_argument('--split', type=str, default='scene', help='Split file when --data is a directory')
    st.add_argument('--output', type=str, default=None, help='Also write the statistics JSON here')

    # Runs command
    rn = subparsers.add_parser('runs', help='List registered runs')
    rn.add_argument('--limit', type=int, default=20, help='Maximum rows')
    rn.add_argument('--command', dest='command_filter', type=str, default=None, help='Only this command')
    rn.add_argument('--show', type=str, default=None, metavar='RUN_ID', help='Show one run in full')

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)

    handler = COMMANDS.get(args.command)
    if handler is None:
        parser.print_help()
        return EXIT_CONFIG

    try:
        return handler(args)
    except (ConfigError, RecordError, FileNotFoundError) as e:
        print(f"❌ Error: {e}")
        return EXIT_CONFIG
    except (TrainingDiverged, TensorError) as e:
        logger.error(f"💥 {args.command} failed: {e}")
        print(f"❌ Error: {e}")
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
