"""
Command-line interface: generate, train, predict, evaluate, experiment, plot.

Exit codes: 0 success, 1 runtime failure, 2 usage or input-format error.
"""
import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from .cascade import cascaded_predict, load_pipeline, train_direct_partial, train_reconstructor
from .config import get_settings, setup_logging
from .dataset import (ENCODING_MODES, FULL3D, GENERATION_MODES, ObjectSpec, SamplingPlan, condition_length,
                      encode_condition, generate_dataset, load_manifest, load_split)
from .elastic import ForceSpec, MaterialParams
from .errors import ConfigError, FormatError, ParameterError, PhysNetError
from .physnet import REFERENCE_LATENCY_MS, NetworkConfig, load_weights, predict, time_forward
from .plotting import plot_curves, plot_log, plot_slices
from .trainer import (CHECKPOINT_NAME, EXPERIMENTS, METRICS_NAME, ExperimentScale, MetricLog, TrainConfig,
                      dataset_presets, evaluate, read_curves, run_experiment, train, train_baseline_icgan)
from .voxel import (DEFAULT_THRESHOLD, DEPTH_MAGIC, GRID_MAGIC, VoxelGrid, binarize, depth_to_partial_grid, iou,
                    load_depth, load_grid, save_grid, sniff_magic)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

RESOLVED_CONFIG = "resolved_config.json"
_SECTIONS = ("sampling", "generation", "network", "training", "paths", "seed")
_GENERATION_KEYS = {"mode", "resolution", "spacing", "workers", "objects", "direction", "preset"}
_PATH_KEYS = {"dataset", "out", "model", "pipeline"}


@dataclass
class CliConfig:
    """Run configuration file; flags override any field"""
    sampling: Dict[str, Any] = field(default_factory=dict)
    generation: Dict[str, Any] = field(default_factory=dict)
    network: Dict[str, Any] = field(default_factory=dict)
    training: Dict[str, Any] = field(default_factory=dict)
    paths: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CliConfig":
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        config = cls(**{k: v for k, v in data.items()})
        config.validate()
        return config

    def validate(self) -> None:
        SamplingPlan.from_dict(self.sampling)
        TrainConfig.from_dict(self.training)
        for name, allowed in (("generation", _GENERATION_KEYS), ("paths", _PATH_KEYS)):
            unknown = set(getattr(self, name)) - allowed
            if unknown:
                raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
        network_keys = set(NetworkConfig.__dataclass_fields__) - {"grid_resolution", "condition_length"}
        unknown = set(self.network) - network_keys
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")

    def write(self, out_dir: Path, **resolved: Any) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {**asdict(self), "resolved": resolved}
        path = out_dir / RESOLVED_CONFIG
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str), encoding="utf-8")
        return path


def load_config(path: Optional[str]) -> CliConfig:
    if not path:
        return CliConfig()
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file {config_path} not found")
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
    return CliConfig.from_dict(data)


def _pick(flag: Any, section: Dict[str, Any], key: str, default: Any = None) -> Any:
    if flag is not None:
        return flag
    return section.get(key, default)


def _device(flag: Optional[str]) -> str:
    if flag:
        return flag
    return get_settings().torch_device()


def _require(value: Any, name: str) -> Any:
    if value is None:
        raise ConfigError(f"{name} is required (flag or config file)")
    return value


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    gen = config.generation
    out = Path(_require(_pick(args.out, config.paths, "out"), "--out"))
    if (out / "manifest.json").exists() and not args.force:
        raise ConfigError(f"{out} already contains a dataset; pass --force to overwrite")

    resolution = int(_pick(args.resolution, gen, "resolution", 16))
    seed = int(_pick(args.seed, {"seed": config.seed}, "seed", 0))
    workers = int(_pick(args.workers, gen, "workers", get_settings().workers))
    preset_name = _pick(args.preset, gen, "preset")
    if preset_name:
        presets = dataset_presets(ExperimentScale(resolution=resolution))
        if preset_name not in presets:
            raise ConfigError(f"unknown preset {preset_name!r}; choose from {', '.join(presets)}")
        preset = presets[preset_name]
        plan, mode, objects = preset.plan, preset.mode, preset.objects
    else:
        sampling = dict(config.sampling)
        for key, flag in (("e_count", args.e_count), ("nu_count", args.nu_count),
                          ("force_count", args.force_count), ("location_count", args.locations),
                          ("rotations_per_axis", args.rotations), ("encoding_mode", args.encoding)):
            if flag is not None:
                sampling[key] = flag
        plan = SamplingPlan.from_dict(sampling)
        mode = _pick(args.mode, gen, "mode", FULL3D)
        kinds = args.objects.split(",") if args.objects else gen.get("objects", ["bridge"])
        objects = []
        for kind in kinds:
            base = load_grid(args.custom_grid) if kind == "custom" and args.custom_grid else None
            objects.append(ObjectSpec(kind, base_grid=base))
    spacing = float(_pick(args.spacing, gen, "spacing", 0.01))
    direction = tuple(gen.get("direction", (0.0, 0.0, -1.0)))

    print(f"🔧 Generating {mode} dataset at {resolution}³ into {out}")
    started = time.perf_counter()
    manifest = generate_dataset(plan, objects, mode, out, seed=seed, resolution=resolution, spacing=spacing,
                                workers=workers, direction=direction, overwrite=args.force)
    elapsed = time.perf_counter() - started
    config.write(out, mode=mode, resolution=resolution, spacing=spacing, seed=seed,
                 plan=plan.to_dict(), objects=[o.kind for o in objects])
    print(f"✅ {manifest.record_count} records, {manifest.skipped} skipped, {elapsed:.1f}s")
    print(f"📄 Manifest: {out / 'manifest.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_VARIANT_NAMES = {"physnet": "physnet", "icgan": "icgan_baseline", "reconstructor": "reconstructor",
                  "direct-partial": "direct_partial"}


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    dataset = Path(_require(_pick(args.dataset, config.paths, "dataset"), "--dataset"))
    out = Path(_require(_pick(args.out, config.paths, "out"), "--out"))
    manifest = load_manifest(dataset)
    variant = _VARIANT_NAMES[args.variant]
    if variant == "reconstructor" and args.encoding:
        raise ConfigError("--encoding does not apply to the reconstructor, which takes no condition")
    encoding = args.encoding or manifest.plan.encoding_mode

    training = dict(config.training)
    training.update({k: v for k, v in (("max_iterations", args.iterations), ("batch_size", args.batch_size),
                                       ("learning_rate", args.lr), ("eval_interval", args.eval_interval),
                                       ("critic_steps", args.critic_steps)) if v is not None})
    training["seed"] = int(_pick(args.seed, training, "seed", config.seed))
    training["device"] = _device(args.device or training.get("device"))
    training["model_variant"] = variant
    train_cfg = TrainConfig.from_dict(training)

    network = dict(config.network)
    if args.base_channels is not None:
        network["base_channels"] = args.base_channels
    n = manifest.resolution
    if variant == "reconstructor":
        net_cfg = NetworkConfig.for_resolution(n, 0, **{**network, "variational": False})
    else:
        n_cond = condition_length(encoding, manifest.plan.location_count)
        if variant == "icgan_baseline":
            net_cfg = NetworkConfig.icgan(n, n_cond, **network)
        else:
            net_cfg = NetworkConfig.for_resolution(n, n_cond, **network)

    config.write(out, variant=variant, dataset=str(dataset), network=net_cfg.to_dict(),
                 training=train_cfg.to_dict(), encoding_mode=encoding)
    print(f"🚀 Training {args.variant} on {dataset} ({manifest.record_count} records, N = {n})")
    if variant == "physnet":
        model, log = train(manifest, net_cfg, train_cfg, out, encoding)
    elif variant == "icgan_baseline":
        model, log = train_baseline_icgan(manifest, net_cfg, train_cfg, out, encoding)
    elif variant == "reconstructor":
        reconstructor, log = train_reconstructor(manifest, net_cfg, train_cfg, out)
        model = reconstructor.model
    else:
        model, log = train_direct_partial(manifest, net_cfg, train_cfg, out, encoding)

    if len(log):
        best = max(log.val_ious())
        print(f"✅ Best validation IOU {best:.4f} over {len(log)} evaluations")
    else:
        print("✅ No iterations requested; initial weights written")
    print(f"💾 Checkpoint: {out / CHECKPOINT_NAME}")
    if len(log):
        print(f"📈 Metrics: {out / METRICS_NAME}")
    print(f"⏱️  Forward pass {time_forward(model):.1f} ms (reference {REFERENCE_LATENCY_MS} ms at 64³)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict

def parse_condition(text: str):
    """E (GPa), ν, F (N), location index"""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ConfigError("--condition expects four comma-separated values: E,nu,F,loc")
    try:
        e, nu, force = float(parts[0]), float(parts[1]), float(parts[2])
        location = int(parts[3])
    except ValueError as err:
        raise ConfigError(f"--condition values must be numeric: {err}") from err
    return MaterialParams(e, nu), ForceSpec(force, location)


def read_input(path: str) -> VoxelGrid:
    """VXG1 grid as-is, VXD1 depth image voxelized to its visible shell"""
    magic = sniff_magic(path)
    if magic == GRID_MAGIC:
        return load_grid(path)
    if magic == DEPTH_MAGIC:
        return depth_to_partial_grid(load_depth(path))
    raise FormatError(f"{path}: bad magic {magic!r}, expected {GRID_MAGIC!r} or {DEPTH_MAGIC!r}")


def cmd_predict(args: argparse.Namespace) -> int:
    if bool(args.model) == bool(args.pipeline):
        raise ConfigError("pass exactly one of --model or --pipeline")
    grid = read_input(args.input)
    device = _device(args.device)
    if args.model:
        model, metadata = load_weights(args.model, device=device)
        pipeline = None
    else:
        pipeline = load_pipeline(args.pipeline, device=device)
        model, metadata = pipeline.deformer, pipeline.metadata

    condition = None
    if model.config.condition_length:
        material, force = parse_condition(_require(args.condition, "--condition"))
        encoding = metadata.get("encoding_mode", "real")
        locations = int(metadata.get("location_count", 1))
        f_max = float(metadata.get("f_max", 0.0))
        condition = encode_condition(material, force, f_max, encoding, locations)

    if pipeline is not None:
        result = cascaded_predict(grid, condition, pipeline)
        output = result.grid
        if result.unaligned:
            print("⚠️  Degenerate principal axes; predicted without alignment")
        if result.low_confidence:
            print("⚠️  Empty input; reconstruction is low-confidence")
    else:
        output = predict(model, grid, condition)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(output, out)
    binary_path = out.with_name(f"{out.stem}_binary{out.suffix or '.vxg'}")
    save_grid(binarize(output, args.threshold), binary_path)
    print(f"✅ Prediction written to {out} (binarized: {binary_path})")
    print(f"⏱️  Forward pass {time_forward(model):.1f} ms (reference {REFERENCE_LATENCY_MS} ms at 64³)")
    if args.target:
        score = iou(output, load_grid(args.target), args.threshold)
        print(f"📊 IOU vs target: {score:.4f}")
    if args.preview:
        image = plot_slices([grid, output], ["input", "prediction"], args.preview)
        print(f"🖼️  Preview: {image}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def cmd_evaluate(args: argparse.Namespace) -> int:
    model, metadata = load_weights(args.model, device=_device(args.device))
    manifest = load_manifest(args.dataset)
    encoding = args.encoding or metadata.get("encoding_mode") or manifest.plan.encoding_mode
    arrays = load_split(manifest, args.split, encoding)
    result = evaluate(model, arrays, args.threshold)
    print(f"📊 Mean IOU on {args.split} ({len(result.per_record)} records): {result.mean_iou:.4f}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["record", "iou"])
            for index, score in zip(result.indices, result.per_record):
                writer.writerow([index, repr(score)])
        print(f"📄 Per-record IOUs: {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment / plot

def cmd_experiment(args: argparse.Namespace) -> int:
    scale = ExperimentScale(
        resolution=args.resolution,
        iterations=args.iterations,
        eval_interval=args.eval_interval,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        data_dir=args.data_dir or get_settings().data_dir,
        material_count=args.material_count,
        base_channels=args.base_channels,
        device=_device(args.device),
        workers=get_settings().workers,
    )
    out = Path(args.out)
    print(f"🧪 Running {args.name} at {scale.resolution}³, {scale.iterations} iterations, seeds {scale.seeds}")
    report = run_experiment(args.name, scale, out, autogen=args.autogen)
    for arm, row in report.table().items():
        print(f"   {arm:<16} final IOU {row['mean_final_iou']:.4f} ± {row['std_final_iou']:.4f}")
    image = plot_curves(read_curves(out / "curves.csv"), out / "curves.png", title=args.name,
                        threshold=scale.threshold)
    print(f"✅ Report: {out / 'report.json'}")
    print(f"🖼️  Curves: {image}")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    source = Path(args.curves)
    with open(source, newline="", encoding="utf-8") as f:
        header = next(csv.reader(f), [])
    if "arm" in header:
        image = plot_curves(read_curves(source), args.out, title=args.title or source.stem)
    elif "val_iou" in header:
        log = MetricLog.from_csv(source)
        image = plot_log(log.iterations(), log.val_ious(), args.out, title=args.title or source.stem)
    else:
        raise FormatError(f"{source} is neither a metrics CSV nor an experiment curves CSV")
    print(f"🖼️  Plot written to {image}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.py", description="Physics-conditioned voxel deformation toolkit")
    parser.add_argument("--log-level", default=None, help="Override PHYSNET_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="Simulate a dataset with the FEM solver")
    gen.add_argument("--config", help="JSON run config")
    gen.add_argument("--mode", choices=GENERATION_MODES)
    gen.add_argument("--out", help="Dataset directory")
    gen.add_argument("--preset", help="Named experiment dataset (one_by_n, square, locations, partial, reconstruction)")
    gen.add_argument("--resolution", type=int)
    gen.add_argument("--spacing", type=float, help="Cell size in meters")
    gen.add_argument("--objects", help="Comma-separated primitives: bridge,beam,block,cylinder,custom")
    gen.add_argument("--custom-grid", help="VXG1 file used for the custom primitive")
    gen.add_argument("--e-count", type=int)
    gen.add_argument("--nu-count", type=int)
    gen.add_argument("--force-count", type=int)
    gen.add_argument("--locations", type=int)
    gen.add_argument("--rotations", type=int, help="Rotations per axis for partial views")
    gen.add_argument("--encoding", choices=ENCODING_MODES)
    gen.add_argument("--workers", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--force", action="store_true", help="Overwrite an existing dataset")
    gen.set_defaults(handler=cmd_generate)

    tr = sub.add_parser("train", help="Train a model on a generated dataset")
    tr.add_argument("--config", help="JSON run config")
    tr.add_argument("--dataset")
    tr.add_argument("--variant", choices=list(_VARIANT_NAMES), default="physnet")
    tr.add_argument("--out")
    tr.add_argument("--iterations", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--eval-interval", type=int)
    tr.add_argument("--critic-steps", type=int)
    tr.add_argument("--base-channels", type=int)
    tr.add_argument("--encoding", choices=ENCODING_MODES, help="Re-encode force locations")
    tr.add_argument("--device")
    tr.add_argument("--seed", type=int)
    tr.set_defaults(handler=cmd_train)

    pr = sub.add_parser("predict", help="Predict a deformed shape")
    pr.add_argument("--model", help="PNW1 checkpoint")
    pr.add_argument("--pipeline", help="Cascade bundle directory")
    pr.add_argument("--input", required=True, help="VXG1 grid or VXD1 depth image")
    pr.add_argument("--condition", help="E (GPa), nu, F (N), location index")
    pr.add_argument("--target", help="Optional VXG1 ground truth")
    pr.add_argument("--preview", help="PNG of the middle slice of input and prediction")
    pr.add_argument("--out", required=True)
    pr.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    pr.add_argument("--device")
    pr.set_defaults(handler=cmd_predict)

    ev = sub.add_parser("evaluate", help="Mean IOU of a checkpoint on a dataset split")
    ev.add_argument("--model", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--split", choices=("train", "validation", "test"), default="test")
    ev.add_argument("--encoding", choices=ENCODING_MODES)
    ev.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    ev.add_argument("--out", help="Per-record IOU CSV")
    ev.add_argument("--device")
    ev.set_defaults(handler=cmd_evaluate)

    ex = sub.add_parser("experiment", help="Run a comparison experiment")
    ex.add_argument("name", choices=EXPERIMENTS)
    ex.add_argument("--out", required=True)
    ex.add_argument("--autogen", action="store_true", help="Generate missing datasets")
    ex.add_argument("--resolution", type=int, default=16)
    ex.add_argument("--iterations", type=int, default=2000)
    ex.add_argument("--eval-interval", type=int, default=100)
    ex.add_argument("--seeds", default="1,2,3")
    ex.add_argument("--data-dir")
    ex.add_argument("--material-count", type=int, default=64)
    ex.add_argument("--base-channels", type=int, default=16)
    ex.add_argument("--device")
    ex.set_defaults(handler=cmd_experiment)

    pl = sub.add_parser("plot", help="Render a metrics or curves CSV to PNG")
    pl.add_argument("--curves", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--title")
    pl.set_defaults(handler=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except (FormatError, ConfigError, ParameterError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PhysNetError, OSError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_RUNTIME
