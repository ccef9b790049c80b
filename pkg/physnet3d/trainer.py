"""
Training loop, evaluation, metric logs and the comparison experiments.

Every model variant (PhysNet, the IcGAN-style baseline, the reconstructor,
the direct partial-view model and the cascade's deformation stage) goes
through the same `fit` loop: `critic_steps` WGAN-GP critic updates, then one
encoder+generator update, Adam on both sides.
"""
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset

from .dataset import (ONE_HOT, PARTIAL, REAL, RECONSTRUCTION, FULL3D, DatasetManifest, ObjectSpec,
                      RecordArrays, SamplingPlan, condition_length, generate_dataset, load_manifest,
                      load_split)
from .errors import ConfigError, EvaluationError, ExperimentError, NonFiniteLossError, ParameterError
from .physnet import (NetworkConfig, PhysNet, combine_generator_loss, grid_to_tensor, loss_ae,
                      loss_discriminator, loss_prior, save_weights)
from .voxel import DEFAULT_THRESHOLD, PROBABILISTIC, VoxelGrid, iou

logger = logging.getLogger(__name__)

VARIANTS = ("physnet", "icgan_baseline", "reconstructor", "direct_partial", "cascade_deformer")
EXPERIMENTS = ("encoding_comparison", "sampling_1xN_vs_KxK", "location_encoding", "partial_vs_cascaded")
CHECKPOINT_NAME = "best.pnw"
METRICS_NAME = "metrics.csv"
TIMING_NAME = "metrics_timed.csv"

PathLike = Union[str, Path]


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 5e-5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_iterations: int = 5000
    critic_steps: int = 5
    eval_interval: int = 100
    seed: int = 0
    model_variant: str = "physnet"
    threshold: float = DEFAULT_THRESHOLD
    device: str = "cpu"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ParameterError(f"{name} must lie in [0, 1)")
        if self.max_iterations < 0 or self.critic_steps < 0 or self.eval_interval < 1:
            raise ParameterError("max_iterations and critic_steps must be >= 0, eval_interval >= 1")
        if self.model_variant not in VARIANTS:
            raise ParameterError(f"unknown model variant {self.model_variant!r}; choose from {VARIANTS}")
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"threshold must lie in (0, 1), got {self.threshold}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainState:
    """Everything that advances during training, besides the weights"""
    iteration: int
    generator_optimizer: torch.optim.Adam
    critic_optimizer: torch.optim.Adam
    rng: torch.Generator
    best_iou: float = -1.0
    best_iteration: int = -1
    best_state: Optional[Dict[str, torch.Tensor]] = None


# ---------------------------------------------------------------------------
# Metric log

@dataclass
class MetricRow:
    iteration: int
    generator_loss: float
    discriminator_loss: float
    ae_loss: float
    prior_loss: float
    val_iou: float
    wall_clock: float


class MetricLog:
    """Per-evaluation rows, strictly increasing in iteration"""

    columns = [f.name for f in fields(MetricRow)]

    def __init__(self, rows: Optional[Sequence[MetricRow]] = None):
        self.rows: List[MetricRow] = []
        for row in rows or []:
            self.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: MetricRow) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ParameterError(f"metric rows must increase in iteration ({row.iteration} after "
                                 f"{self.rows[-1].iteration})")
        self.rows.append(row)

    def iterations(self) -> List[int]:
        return [row.iteration for row in self.rows]

    def val_ious(self) -> List[float]:
        return [row.val_iou for row in self.rows]

    def final_iou(self) -> float:
        return self.rows[-1].val_iou if self.rows else float("nan")

    def to_csv(self, path: PathLike, timing: bool = False) -> Path:
        """
        Write one row per evaluation. Wall-clock is left out unless `timing`
        is set, so two runs with one seed produce identical files.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = self.columns if timing else [c for c in self.columns if c != "wall_clock"]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=columns)
            writer.writeheader()
            for row in self.rows:
                values = asdict(row)
                writer.writerow({k: repr(values[k]) if isinstance(values[k], float) else values[k]
                                 for k in columns})
        return path

    @classmethod
    def from_csv(cls, path: PathLike) -> "MetricLog":
        with open(path, newline="", encoding="utf-8") as f:
            rows = [MetricRow(iteration=int(r["iteration"]),
                              **{k: float(r.get(k) or 0.0) for k in cls.columns if k != "iteration"})
                    for r in csv.DictReader(f)]
        return cls(rows)


def convergence_iteration(iterations: Sequence[int], ious: Sequence[float],
                          threshold: float, run: int = 3) -> Optional[int]:
    """First iteration opening a streak of `run` evaluations at or above threshold"""
    streak = 0
    for i, value in enumerate(ious):
        streak = streak + 1 if value >= threshold else 0
        if streak == run:
            return int(iterations[i - run + 1])
    return None


# ---------------------------------------------------------------------------
# Data

def _to_tensors(arrays: RecordArrays) -> TensorDataset:
    inputs = torch.from_numpy(arrays.inputs).unsqueeze(1)
    targets = torch.from_numpy(arrays.targets).unsqueeze(1)
    conditions = torch.from_numpy(arrays.conditions)
    return TensorDataset(inputs, targets, conditions)


def batch_stream(arrays: RecordArrays, batch_size: int, seed: int) -> Iterator[Tuple[torch.Tensor, ...]]:
    """Endless shuffled batches; the order depends only on the seed"""
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(_to_tensors(arrays), batch_size=batch_size, shuffle=True,
                        generator=generator, drop_last=len(arrays) > batch_size)
    while True:
        for batch in loader:
            yield batch


def build_model(config: NetworkConfig, seed: int, device: str = "cpu") -> PhysNet:
    torch.manual_seed(seed)
    return PhysNet(config).to(device)


# ---------------------------------------------------------------------------
# Evaluation

@dataclass
class EvaluationResult:
    mean_iou: float
    per_record: List[float]
    indices: List[int]


@torch.no_grad()
def evaluate(model: PhysNet, arrays: RecordArrays, p: float = DEFAULT_THRESHOLD,
             batch_size: int = 8) -> EvaluationResult:
    """Deterministic prediction per record, binarized at p, IOU against the target"""
    if len(arrays) == 0:
        raise EvaluationError("cannot evaluate on an empty split")
    if not 0.0 < p < 1.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {p}")
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    scores = []
    for start in range(0, len(arrays), batch_size):
        stop = min(start + batch_size, len(arrays))
        x = grid_to_tensor(arrays.inputs[start:stop], device).to(dtype)
        y = torch.from_numpy(arrays.conditions[start:stop]).to(device, dtype)
        out, _ = model(x, y, deterministic=True)
        predictions = out.squeeze(1).to("cpu", torch.float32).clamp(0.0, 1.0).numpy()
        for k in range(stop - start):
            predicted = VoxelGrid(predictions[k], kind=PROBABILISTIC)
            target = VoxelGrid(arrays.targets[start + k], kind=PROBABILISTIC)
            scores.append(iou(predicted, target, p))
    model.train(was_training)
    return EvaluationResult(float(np.mean(scores)), scores, list(arrays.indices))


# ---------------------------------------------------------------------------
# Training

def _critic_step(model: PhysNet, state: TrainState, batch, cfg: TrainConfig) -> float:
    x, t, y = (b.to(cfg.device) for b in batch)
    noise = torch.randn((x.shape[0], model.config.latent_dim), generator=state.rng).to(cfg.device)
    with torch.no_grad():
        o, _ = model(x, y, noise=noise)
    eta = torch.rand((x.shape[0],), generator=state.rng).to(cfg.device)
    loss = loss_discriminator(model.discriminator, o, t, y, eta, model.config.lambda_gp)
    state.critic_optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.critic_optimizer.step()
    return float(loss.detach())


def _generator_step(model: PhysNet, state: TrainState, batch, cfg: TrainConfig) -> Tuple[float, float, float]:
    x, t, y = (b.to(cfg.device) for b in batch)
    noise = torch.randn((x.shape[0], model.config.latent_dim), generator=state.rng).to(cfg.device)
    o, code = model(x, y, noise=noise)
    ae = loss_ae(t, o, model.config.alpha)
    prior = loss_prior(code)
    critic = model.discriminator(o, y).mean()
    loss = combine_generator_loss(ae + prior, critic, model.config.beta)
    state.generator_optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.generator_optimizer.step()
    return float(loss.detach()), float(ae.detach()), float(prior.detach())


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2),
                            eps=cfg.adam_epsilon)


def fit(model: PhysNet, train_arrays: RecordArrays, val_arrays: Optional[RecordArrays],
        cfg: TrainConfig, out_dir: Optional[PathLike] = None,
        metadata: Optional[Dict[str, Any]] = None) -> Tuple[PhysNet, MetricLog]:
    """
    Adversarial training of `model` in place.

    The best-validation weights are kept (and written to out_dir/best.pnw);
    the returned model carries them. With max_iterations = 0 the initial
    weights come back with an empty log.

    Raises:
        NonFiniteLossError: a loss became NaN or Inf; the best checkpoint
        written so far is named in the error
    """
    if len(train_arrays) == 0:
        raise ConfigError("training split is empty")
    if train_arrays.conditions.shape[1] != model.config.condition_length:
        raise ConfigError(f"dataset conditions have {train_arrays.conditions.shape[1]} entries, "
                          f"network expects {model.config.condition_length}")
    if val_arrays is None or len(val_arrays) == 0:
        logger.warning("validation split is empty; evaluating on the training split")
        val_arrays = train_arrays

    out = Path(out_dir) if out_dir is not None else None
    checkpoint = out / CHECKPOINT_NAME if out is not None else None
    metadata = dict(metadata or {})
    log = MetricLog()
    model.to(cfg.device).train()
    state = TrainState(
        iteration=0,
        generator_optimizer=_adam(model.generator_parameters(), cfg),
        critic_optimizer=_adam(model.discriminator.parameters(), cfg),
        rng=torch.Generator().manual_seed(cfg.seed),
    )

    if cfg.max_iterations == 0:
        if checkpoint is not None:
            save_weights(model, checkpoint, {**metadata, "best_iou": None, "best_iteration": 0})
        return model, log

    batches = batch_stream(train_arrays, cfg.batch_size, cfg.seed)
    started = time.perf_counter()
    last_good = None
    d_loss = 0.0
    for iteration in range(1, cfg.max_iterations + 1):
        state.iteration = iteration
        for _ in range(cfg.critic_steps):
            d_loss = _critic_step(model, state, next(batches), cfg)
        g_loss, ae, prior = _generator_step(model, state, next(batches), cfg)
        if not all(math.isfinite(v) for v in (g_loss, d_loss, ae, prior)):
            raise NonFiniteLossError(iteration, last_good)

        if iteration % cfg.eval_interval == 0 or iteration == cfg.max_iterations:
            score = evaluate(model, val_arrays, cfg.threshold, cfg.batch_size).mean_iou
            log.append(MetricRow(iteration, g_loss, d_loss, ae, prior, score, time.perf_counter() - started))
            logger.info("iter %d: G %.4f D %.4f AE %.4f KL %.4f val IOU %.4f",
                        iteration, g_loss, d_loss, ae, prior, score)
            if score > state.best_iou:
                state.best_iou, state.best_iteration = score, iteration
                state.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if checkpoint is not None:
                    save_weights(model, checkpoint, {**metadata, "best_iou": score, "best_iteration": iteration})
                    last_good = str(checkpoint)

    if state.best_state is not None:
        model.load_state_dict(state.best_state)
    if out is not None:
        log.to_csv(out / METRICS_NAME)
        log.to_csv(out / TIMING_NAME, timing=True)
    return model, log


def _check_dataset(manifest: DatasetManifest, config: NetworkConfig) -> None:
    if manifest.resolution != config.grid_resolution:
        raise ConfigError(f"dataset resolution {manifest.resolution} does not match network "
                          f"resolution {config.grid_resolution}")


def dataset_metadata(manifest: DatasetManifest, encoding_mode: str, variant: str) -> Dict[str, Any]:
    return {
        "variant": variant,
        "encoding_mode": encoding_mode,
        "location_count": manifest.plan.location_count,
        "f_max": manifest.f_max(),
        "spacing": manifest.spacing,
        "dataset_mode": manifest.mode,
    }


def train_on_manifest(manifest: DatasetManifest, net_cfg: NetworkConfig, train_cfg: TrainConfig,
                      out_dir: Optional[PathLike] = None,
                      encoding_mode: Optional[str] = None) -> Tuple[PhysNet, MetricLog]:
    _check_dataset(manifest, net_cfg)
    mode = encoding_mode or manifest.plan.encoding_mode
    train_arrays = load_split(manifest, "train", mode)
    val_arrays = load_split(manifest, "validation", mode)
    model = build_model(net_cfg, train_cfg.seed, train_cfg.device)
    return fit(model, train_arrays, val_arrays, train_cfg, out_dir,
               dataset_metadata(manifest, mode, train_cfg.model_variant))


def train(manifest: DatasetManifest, net_cfg: NetworkConfig, train_cfg: TrainConfig,
          out_dir: Optional[PathLike] = None, encoding_mode: Optional[str] = None) -> Tuple[PhysNet, MetricLog]:
    """Train PhysNet on the train split, selecting weights on the validation split"""
    if manifest.mode == RECONSTRUCTION:
        raise ConfigError("reconstruction datasets carry no condition; train a reconstructor instead")
    return train_on_manifest(manifest, net_cfg, train_cfg, out_dir, encoding_mode)


def train_baseline_icgan(manifest: DatasetManifest, net_cfg: Optional[NetworkConfig], train_cfg: TrainConfig,
                         out_dir: Optional[PathLike] = None,
                         encoding_mode: Optional[str] = None) -> Tuple[PhysNet, MetricLog]:
    """Same loop with a deterministic latent following the 5000 rule and no prior term"""
    mode = encoding_mode or manifest.plan.encoding_mode
    n_cond = condition_length(mode, manifest.plan.location_count)
    if net_cfg is None:
        net_cfg = NetworkConfig.icgan(manifest.resolution, n_cond)
    elif net_cfg.variational:
        overrides = {k: v for k, v in net_cfg.to_dict().items()
                     if k not in ("grid_resolution", "condition_length", "latent_dim", "variational")}
        net_cfg = NetworkConfig.icgan(net_cfg.grid_resolution, n_cond, **overrides)
    train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "model_variant": "icgan_baseline"})
    return train(manifest, net_cfg, train_cfg, out_dir, mode)


# ---------------------------------------------------------------------------
# Experiments

@dataclass
class ExperimentScale:
    """Desk-scale sizing shared by every experiment"""
    resolution: int = 16
    iterations: int = 2000
    eval_interval: int = 100
    seeds: Tuple[int, ...] = (1, 2, 3)
    data_dir: str = "data"
    threshold: float = 0.8
    batch_size: int = 8
    base_channels: int = 16
    material_count: int = 64
    location_count: int = 6
    rotations_per_axis: int = 2
    primitive: str = "bridge"
    device: str = "cpu"
    workers: int = 1

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        if math.isqrt(self.material_count) ** 2 != self.material_count:
            raise ParameterError(f"material_count must be a perfect square, got {self.material_count}")

    def dataset_dir(self, key: str) -> Path:
        return Path(self.data_dir) / f"{key}_{self.resolution}"

    def train_config(self, seed: int, variant: str = "physnet", iterations: Optional[int] = None) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, max_iterations=iterations or self.iterations,
                           eval_interval=self.eval_interval, seed=seed, model_variant=variant,
                           device=self.device)

    def network_config(self, n_cond: int, variant: str = "physnet") -> NetworkConfig:
        if variant == "icgan_baseline":
            return NetworkConfig.icgan(self.resolution, n_cond, base_channels=self.base_channels)
        if variant == "reconstructor":
            return NetworkConfig.for_resolution(self.resolution, n_cond, base_channels=self.base_channels,
                                                variational=False)
        return NetworkConfig.for_resolution(self.resolution, n_cond, base_channels=self.base_channels)


@dataclass
class DatasetPreset:
    plan: SamplingPlan
    mode: str
    objects: List[ObjectSpec]


def dataset_presets(scale: ExperimentScale) -> Dict[str, DatasetPreset]:
    """Datasets the experiments read, keyed by preset name"""
    k = math.isqrt(scale.material_count)
    objects = [ObjectSpec(scale.primitive)]
    single = dict(force_count=1, location_count=1, rotations_per_axis=1)
    views = dict(force_count=2, location_count=1, rotations_per_axis=scale.rotations_per_axis)
    return {
        "one_by_n": DatasetPreset(SamplingPlan.one_by(scale.material_count, **single), FULL3D, objects),
        "square": DatasetPreset(SamplingPlan.square(k, **single), FULL3D, objects),
        "locations": DatasetPreset(SamplingPlan.square(3, force_count=2, location_count=scale.location_count,
                                                       rotations_per_axis=1), FULL3D, objects),
        "partial": DatasetPreset(SamplingPlan.square(2, **views), PARTIAL, objects),
        "reconstruction": DatasetPreset(SamplingPlan.square(2, **views), RECONSTRUCTION, objects),
    }


_EXPERIMENT_DATASETS = {
    "encoding_comparison": ("one_by_n", "square"),
    "sampling_1xN_vs_KxK": ("one_by_n", "square"),
    "location_encoding": ("locations",),
    "partial_vs_cascaded": ("partial", "reconstruction"),
}


def generation_command(key: str, scale: ExperimentScale) -> str:
    return (f"python app.py generate --preset {key} --resolution {scale.resolution} "
            f"--out {scale.dataset_dir(key)}")


def ensure_datasets(name: str, scale: ExperimentScale, autogen: bool = False,
                    seed: int = 0) -> Dict[str, DatasetManifest]:
    presets = dataset_presets(scale)
    manifests = {}
    for key in _EXPERIMENT_DATASETS[name]:
        path = scale.dataset_dir(key)
        if not (path / "manifest.json").exists():
            if not autogen:
                raise ExperimentError(f"missing dataset {path}; generate it with: {generation_command(key, scale)}")
            preset = presets[key]
            logger.info("generating dataset %s at %s", key, path)
            generate_dataset(preset.plan, preset.objects, preset.mode, path, seed=seed,
                             resolution=scale.resolution, workers=scale.workers)
        manifests[key] = load_manifest(path)
    return manifests


@dataclass
class ArmResult:
    arm: str
    seed: int
    final_iou: float
    best_iou: float
    convergence: Optional[int]
    log: MetricLog = field(repr=False)
    boundary: Optional[int] = None

    def summary(self) -> Dict[str, Any]:
        return {"arm": self.arm, "seed": self.seed, "final_iou": self.final_iou,
                "best_iou": self.best_iou, "convergence": self.convergence, "boundary": self.boundary}


@dataclass
class ExperimentReport:
    name: str
    scale: ExperimentScale
    results: List[ArmResult] = field(default_factory=list)

    def arms(self) -> List[str]:
        seen = []
        for result in self.results:
            if result.arm not in seen:
                seen.append(result.arm)
        return seen

    def table(self) -> Dict[str, Dict[str, float]]:
        """Mean and std of the final validation IOU per arm"""
        rows = {}
        for arm in self.arms():
            finals = [r.final_iou for r in self.results if r.arm == arm]
            rows[arm] = {"mean_final_iou": float(np.mean(finals)), "std_final_iou": float(np.std(finals)),
                         "seeds": len(finals)}
        return rows

    def wins(self, arm: str, other: str) -> int:
        """Seeds on which `arm` ends at or above `other`"""
        mine = {r.seed: r.final_iou for r in self.results if r.arm == arm}
        theirs = {r.seed: r.final_iou for r in self.results if r.arm == other}
        return sum(1 for seed in mine if seed in theirs and mine[seed] >= theirs[seed])

    def to_dict(self) -> Dict[str, Any]:
        scale = asdict(self.scale)
        scale["seeds"] = list(self.scale.seeds)
        return {"experiment": self.name, "scale": scale, "table": self.table(),
                "runs": [r.summary() for r in self.results]}

    def write(self, out_dir: PathLike) -> Tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / "report.json"
        report_path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        curves_path = out / "curves.csv"
        with open(curves_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["arm", "seed", "iteration", "val_iou", "boundary"])
            for r in self.results:
                for row in r.log.rows:
                    writer.writerow([r.arm, r.seed, row.iteration, repr(row.val_iou),
                                     "" if r.boundary is None else r.boundary])
        return report_path, curves_path


def read_curves(path: PathLike) -> Dict[str, Dict[int, Tuple[List[int], List[float], Optional[int]]]]:
    """curves.csv → arm → seed → (iterations, ious, boundary)"""
    curves: Dict[str, Dict[int, Tuple[List[int], List[float], Optional[int]]]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            seed = int(row["seed"])
            boundary = int(row["boundary"]) if row.get("boundary") else None
            entry = curves.setdefault(row["arm"], {}).setdefault(seed, ([], [], boundary))
            entry[0].append(int(row["iteration"]))
            entry[1].append(float(row["val_iou"]))
    return curves


def _result(arm: str, seed: int, log: MetricLog, threshold: float, boundary: Optional[int] = None) -> ArmResult:
    ious = log.val_ious()
    return ArmResult(arm, seed, log.final_iou(), max(ious) if ious else float("nan"),
                     convergence_iteration(log.iterations(), ious, threshold), log, boundary)


def held_out_split(manifest: DatasetManifest, encoding_mode: Optional[str] = None) -> RecordArrays:
    """Test split, or the validation split when the test split is empty; never training data"""
    for split in ("test", "validation"):
        arrays = load_split(manifest, split, encoding_mode)
        if len(arrays):
            return arrays
    raise ExperimentError(f"dataset {manifest.root} has no held-out records; generate a larger one")


def _run_arm(manifest: DatasetManifest, scale: ExperimentScale, seed: int, variant: str,
             encoding_mode: Optional[str] = None) -> MetricLog:
    mode = encoding_mode or manifest.plan.encoding_mode
    n_cond = condition_length(mode, manifest.plan.location_count)
    net_cfg = scale.network_config(n_cond, variant)
    train_cfg = scale.train_config(seed, variant)
    _, log = train_on_manifest(manifest, net_cfg, train_cfg, encoding_mode=mode)
    return log


def run_experiment(name: str, scale: ExperimentScale, out_dir: Optional[PathLike] = None,
                   autogen: bool = False) -> ExperimentReport:
    """
    Train every arm of the named comparison once per seed at a matched
    iteration budget and collect the validation learning curves.

    Raises:
        ExperimentError: unknown name, or a dataset has not been generated
    """
    if name not in EXPERIMENTS:
        raise ExperimentError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    manifests = ensure_datasets(name, scale, autogen)
    report = ExperimentReport(name, scale)

    for seed in scale.seeds:
        if name == "encoding_comparison":
            for key, label in (("one_by_n", "1xN"), ("square", "KxK")):
                for variant, model in (("physnet", "physnet"), ("icgan_baseline", "icgan")):
                    log = _run_arm(manifests[key], scale, seed, variant)
                    report.results.append(_result(f"{model}/{label}", seed, log, scale.threshold))
        elif name == "sampling_1xN_vs_KxK":
            for key, label in (("one_by_n", "1xN"), ("square", "KxK")):
                log = _run_arm(manifests[key], scale, seed, "physnet")
                report.results.append(_result(label, seed, log, scale.threshold))
        elif name == "location_encoding":
            for mode in (REAL, ONE_HOT):
                log = _run_arm(manifests["locations"], scale, seed, "physnet", mode)
                report.results.append(_result(mode, seed, log, scale.threshold))
        else:
            from .cascade import direct_pipeline, score_held_out, train_cascade, train_direct_partial
            partial = manifests["partial"]
            held_out = held_out_split(partial)
            direct_cfg = scale.network_config(partial.condition_length)
            direct_model, direct_log = train_direct_partial(partial, direct_cfg, scale.train_config(seed))
            direct = _result("direct", seed, direct_log, scale.threshold)
            pipeline, cascade_log, boundary = train_cascade(manifests["reconstruction"], partial, scale, seed)
            cascaded = _result("cascaded", seed, cascade_log, scale.threshold, boundary)
            # the cascade curve lives partly in the aligned frame; both arms are scored in the camera frame
            score_held_out([(direct, direct_pipeline(direct_model)), (cascaded, pipeline)], held_out)
            report.results.extend([direct, cascaded])
        logger.info("experiment %s seed %d done", name, seed)

    if out_dir is not None:
        report.write(out_dir)
    return report
