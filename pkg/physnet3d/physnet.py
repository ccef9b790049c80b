"""
Conditional VAE-GAN over voxel grids.

Encoder E: strided 3D convolutions (kernel 4, stride 2, padding 1) halving the
grid per level, the last level with a sigmoid, then a dense layer and the
μ / log-variance heads. Generator G: the latent code concatenated with the
condition, a dense projection reshaped to a feature volume, then transposed
convolutions that concatenate the encoder feature of matching resolution at
every level. Critic D: the grid with the condition broadcast as constant
channels, the same convolution ladder, a dense output whose mean is the
Wasserstein critic value.
"""
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, FormatError, ParameterError, ShapeError, WeightsError
from .voxel import PROBABILISTIC, VoxelGrid

logger = logging.getLogger(__name__)

REFERENCE_LATENCY_MS = 35.7
LOSS_CLAMP = 1e-7
_LOGVAR_RANGE = (-30.0, 20.0)

WEIGHTS_MAGIC = b"PNW1"
WEIGHTS_VERSION = 1
_WEIGHTS_HEADER = struct.Struct("<4sIQ")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

PathLike = Union[str, Path]
ConditionLike = Union[None, np.ndarray, Sequence[float], torch.Tensor, Any]


def _scaled_dim(full_scale: int, resolution: int) -> int:
    """Dimension proportional to N³/64³, never below 64"""
    return max(64, int(round(full_scale * resolution ** 3 / 64 ** 3)))


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and loss weights; every field enters the fingerprint"""
    grid_resolution: int
    condition_length: int = 4
    conv_levels: int = 0
    base_channels: int = 32
    max_channels: int = 512
    latent_dim: int = 0
    flatten_dim: int = 0
    critic_dim: int = 0
    alpha: float = 0.85
    beta: float = 0.9
    lambda_gp: float = 10.0
    variational: bool = True

    def __post_init__(self):
        n = self.grid_resolution
        if n < 2 or n & (n - 1):
            raise ParameterError(f"grid_resolution must be a power of two >= 2, got {n}")
        # zero means "derive from the resolution"
        if self.conv_levels == 0:
            object.__setattr__(self, "conv_levels", max(1, int(math.log2(n)) - 1))
        if self.latent_dim == 0:
            object.__setattr__(self, "latent_dim", _scaled_dim(800, n))
        if self.flatten_dim == 0:
            object.__setattr__(self, "flatten_dim", _scaled_dim(5000, n))
        if self.critic_dim == 0:
            object.__setattr__(self, "critic_dim", max(1, n ** 3 // 8))
        if not 2 <= self.conv_levels <= int(math.log2(n)):
            raise ParameterError(f"conv_levels must lie in [2, log2 N] for N = {n}, got {self.conv_levels}")
        for name in ("base_channels", "max_channels", "latent_dim", "flatten_dim", "critic_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.condition_length < 0:
            raise ParameterError("condition_length must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.beta < 1.0:
            raise ParameterError(f"beta must lie in (0, 1), got {self.beta}")
        if self.lambda_gp < 0.0:
            raise ParameterError(f"lambda_gp must be >= 0, got {self.lambda_gp}")

    @classmethod
    def for_resolution(cls, n: int, condition_length: int = 4, **overrides) -> "NetworkConfig":
        return cls(grid_resolution=n, condition_length=condition_length, **overrides)

    @classmethod
    def icgan(cls, n: int, condition_length: int = 4, **overrides) -> "NetworkConfig":
        """Deterministic-latent baseline: no μ/σ split, latent follows the 5000 rule"""
        overrides.setdefault("latent_dim", _scaled_dim(5000, n))
        overrides.setdefault("variational", False)
        return cls(grid_resolution=n, condition_length=condition_length, **overrides)

    def channels(self) -> List[int]:
        return [min(self.base_channels * 2 ** i, self.max_channels) for i in range(self.conv_levels)]

    def level_resolution(self, level: int) -> int:
        """Spatial size after encoder level `level` (1-based)"""
        return self.grid_resolution // 2 ** level

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        return cls(**data)

    def fingerprint(self) -> int:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


@dataclass
class LatentCode:
    """μ and log σ² per sample; logvar is None for deterministic encoders"""
    mu: torch.Tensor
    logvar: Optional[torch.Tensor] = None

    @property
    def sigma(self) -> torch.Tensor:
        if self.logvar is None:
            return torch.zeros_like(self.mu)
        return torch.exp(0.5 * self.logvar.clamp(*_LOGVAR_RANGE))


def _broadcast(y: torch.Tensor, size: int) -> torch.Tensor:
    return y[:, :, None, None, None].expand(-1, -1, size, size, size)


class Encoder(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        channels = config.channels()
        ins = [1] + channels[:-1]
        self.convs = nn.ModuleList(nn.Conv3d(c_in, c_out, 4, 2, 1) for c_in, c_out in zip(ins, channels))
        final = config.level_resolution(config.conv_levels)
        self.dense = nn.Linear(channels[-1] * final ** 3, config.flatten_dim)
        self.mu = nn.Linear(config.flatten_dim, config.latent_dim)
        self.logvar = nn.Linear(config.flatten_dim, config.latent_dim) if config.variational else None

    def forward(self, x: torch.Tensor) -> Tuple[LatentCode, List[torch.Tensor]]:
        skips = []
        h = x
        last = len(self.convs) - 1
        for level, conv in enumerate(self.convs):
            h = conv(h)
            h = torch.sigmoid(h) if level == last else F.relu(h)
            skips.append(h)
        h = F.relu(self.dense(h.flatten(1)))
        logvar = self.logvar(h) if self.logvar is not None else None
        return LatentCode(self.mu(h), logvar), skips


class Generator(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        channels = config.channels()
        levels = config.conv_levels
        self.start_size = config.level_resolution(levels - 1)
        self.start_channels = channels[-1]
        self.project = nn.Linear(config.latent_dim + config.condition_length,
                                 self.start_channels * self.start_size ** 3)
        deconvs = []
        c_prev = self.start_channels
        # step j consumes the encoder feature of level L-1-j and upsamples once
        for j in range(levels - 1):
            skip_channels = channels[levels - 2 - j]
            c_out = channels[levels - 3 - j] if j < levels - 2 else 1
            deconvs.append(nn.ConvTranspose3d(c_prev + skip_channels, c_out, 4, 2, 1))
            c_prev = c_out
        self.deconvs = nn.ModuleList(deconvs)

    def forward(self, z: torch.Tensor, y: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        h = F.relu(self.project(torch.cat([z, y], dim=1)))
        h = h.view(-1, self.start_channels, self.start_size, self.start_size, self.start_size)
        levels = self.config.conv_levels
        last = len(self.deconvs) - 1
        for j, deconv in enumerate(self.deconvs):
            h = deconv(torch.cat([h, skips[levels - 2 - j]], dim=1))
            h = torch.sigmoid(h) if j == last else F.relu(h)
        return h


class Discriminator(nn.Module):
    """Conditional critic; no normalization layers (the gradient penalty is per sample)"""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        channels = config.channels()
        n_cond = config.condition_length
        convs = []
        c_prev = 1 + n_cond
        for level, c_out in enumerate(channels):
            convs.append(nn.Conv3d(c_prev, c_out, 4, 2, 1))
            c_prev = c_out + (n_cond if level == 1 else 0)
        self.convs = nn.ModuleList(convs)
        final = config.level_resolution(config.conv_levels)
        self.dense = nn.Linear(c_prev * final ** 3, config.critic_dim)

    def forward(self, g: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        h = torch.cat([g, _broadcast(y, g.shape[-1])], dim=1)
        for level, conv in enumerate(self.convs):
            h = F.leaky_relu(conv(h), 0.2)
            if level == 1:
                h = torch.cat([h, _broadcast(y, h.shape[-1])], dim=1)
        return self.dense(h.flatten(1)).mean(dim=1)


class PhysNet(nn.Module):
    """Encoder, generator and critic sharing one NetworkConfig"""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.generator = Generator(config)
        self.discriminator = Discriminator(config)

    def _check_grid(self, x: torch.Tensor) -> None:
        n = self.config.grid_resolution
        if x.dim() != 5 or tuple(x.shape[1:]) != (1, n, n, n):
            raise ShapeError(f"expected grids of shape (B, 1, {n}, {n}, {n}), got {tuple(x.shape)}")

    def _check_condition(self, y: torch.Tensor, batch: int) -> None:
        if y.dim() != 2 or y.shape[1] != self.config.condition_length or y.shape[0] != batch:
            raise ShapeError(f"expected conditions of shape ({batch}, {self.config.condition_length}), "
                             f"got {tuple(y.shape)}")

    def encode(self, x: torch.Tensor) -> Tuple[LatentCode, List[torch.Tensor]]:
        self._check_grid(x)
        return self.encoder(x)

    def generate(self, z: torch.Tensor, y: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"latent vector must have {self.config.latent_dim} entries, got {tuple(z.shape)}")
        self._check_condition(y, z.shape[0])
        return self.generator(z, y, skips)

    def discriminate(self, g: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        self._check_grid(g)
        self._check_condition(y, g.shape[0])
        return self.discriminator(g, y)

    def forward(self, x: torch.Tensor, y: torch.Tensor, noise: Optional[torch.Tensor] = None,
                deterministic: bool = False) -> Tuple[torch.Tensor, LatentCode]:
        code, skips = self.encode(x)
        if deterministic or noise is None:
            z = code.mu
        else:
            z = reparameterize(code, noise)
        return self.generate(z, y, skips), code

    def generator_parameters(self) -> List[nn.Parameter]:
        return list(self.encoder.parameters()) + list(self.generator.parameters())


# ---------------------------------------------------------------------------
# Losses

def reparameterize(code: LatentCode, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != code.mu.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} does not match latent {tuple(code.mu.shape)}")
    if code.logvar is None:
        return code.mu
    return code.mu + code.sigma * noise


def loss_ae(t: torch.Tensor, o: torch.Tensor, alpha: float = 0.85) -> torch.Tensor:
    """Weighted binary cross-entropy, mean over voxels"""
    o = o.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    return -(alpha * t * torch.log(o) + (1.0 - alpha) * (1.0 - t) * torch.log(1.0 - o)).mean()


def loss_prior(code: LatentCode) -> torch.Tensor:
    """KL(N(μ, σ) || N(0, I)), summed over latent dims, averaged over the batch"""
    if code.logvar is None:
        return code.mu.new_zeros(())
    logvar = code.logvar.clamp(*_LOGVAR_RANGE)
    kl = -0.5 * (1.0 + logvar - code.mu ** 2 - torch.exp(logvar)).sum(dim=-1)
    return kl.mean()


def combine_generator_loss(vae_loss: torch.Tensor, critic_value: torch.Tensor, beta: float) -> torch.Tensor:
    return beta * vae_loss - (1.0 - beta) * critic_value


def loss_generator(o: torch.Tensor, t: torch.Tensor, y: torch.Tensor,
                   critic: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                   code: Optional[LatentCode] = None, beta: float = 0.9,
                   alpha: float = 0.85) -> torch.Tensor:
    """β·(loss_ae + loss_prior) − (1−β)·E[D(o|y)]"""
    vae = loss_ae(t, o, alpha)
    if code is not None:
        vae = vae + loss_prior(code)
    return combine_generator_loss(vae, critic(o, y).mean(), beta)


def gradient_penalty(critic: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                     o_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """(‖∇_ô D(ô|y)‖₂ − 1)² per sample, batch mean"""
    if not o_hat.requires_grad:
        o_hat = o_hat.requires_grad_(True)
    scores = critic(o_hat, y)
    grads, = torch.autograd.grad(scores.sum(), o_hat, create_graph=True)
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def loss_discriminator(critic: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                       o: torch.Tensor, t: torch.Tensor, y: torch.Tensor,
                       eta: torch.Tensor, lambda_gp: float = 10.0) -> torch.Tensor:
    """
    WGAN-GP critic loss D(o|y) − D(t|y) + λ·(‖∇D(ô|y)‖ − 1)².

    Args:
        o: generated grids, detached from the generator graph by the caller
        t: target grids
        eta: per-sample interpolation weights in [0, 1], shape (B,)
    """
    wasserstein = critic(o, y).mean() - critic(t, y).mean()
    if lambda_gp == 0.0:
        return wasserstein
    eta = eta.view(-1, 1, 1, 1, 1).to(o.dtype)
    o_hat = (eta * t + (1.0 - eta) * o).detach().requires_grad_(True)
    return wasserstein + lambda_gp * gradient_penalty(critic, o_hat, y)


# ---------------------------------------------------------------------------
# Tensors and inference

def grid_to_tensor(grids: Union[VoxelGrid, Sequence[VoxelGrid], np.ndarray],
                   device: Union[str, torch.device] = "cpu") -> torch.Tensor:
    if isinstance(grids, VoxelGrid):
        grids = [grids]
    if isinstance(grids, np.ndarray):
        array = grids.astype(np.float32)
        if array.ndim == 3:
            array = array[None]
    else:
        array = np.stack([g.values for g in grids]).astype(np.float32)
    return torch.from_numpy(array).unsqueeze(1).to(device)


def tensor_to_grid(t: torch.Tensor, spacing: float = 1.0) -> VoxelGrid:
    values = t.detach().to("cpu", torch.float32).reshape(t.shape[-3:]).numpy()
    return VoxelGrid(np.clip(values, 0.0, 1.0), spacing, PROBABILISTIC)


def condition_tensor(y: ConditionLike, length: int, batch: int = 1,
                     device: Union[str, torch.device] = "cpu") -> torch.Tensor:
    if y is None:
        values = np.zeros((batch, 0), dtype=np.float32)
    elif isinstance(y, torch.Tensor):
        values = y.detach().cpu().numpy().astype(np.float32)
    elif hasattr(y, "to_array"):
        values = y.to_array()
    else:
        values = np.asarray(y, dtype=np.float32)
    values = np.atleast_2d(values)
    if values.shape[1] != length:
        raise ShapeError(f"condition has {values.shape[1]} entries, network expects {length}")
    if values.shape[0] == 1 and batch > 1:
        values = np.repeat(values, batch, axis=0)
    return torch.from_numpy(values).to(device)


def _model_device(model: nn.Module) -> torch.device:
    return next(model.parameters()).device


@torch.no_grad()
def predict(model: PhysNet, x: VoxelGrid, y: ConditionLike, deterministic: bool = True,
            generator: Optional[torch.Generator] = None) -> VoxelGrid:
    """
    Encode, take z = μ (or sample it), generate.

    The result is a probabilistic grid; binarize it at p = 0.8 for occupancy.
    """
    if x.resolution != model.config.grid_resolution:
        raise ShapeError(f"input resolution {x.resolution} does not match network "
                         f"resolution {model.config.grid_resolution}")
    was_training = model.training
    model.eval()
    device = _model_device(model)
    dtype = next(model.parameters()).dtype
    inputs = grid_to_tensor(x, device).to(dtype)
    condition = condition_tensor(y, model.config.condition_length, 1, device).to(dtype)
    noise = None
    if not deterministic:
        noise = torch.randn((1, model.config.latent_dim), generator=generator, dtype=dtype).to(device)
    out, _ = model(inputs, condition, noise=noise, deterministic=deterministic)
    model.train(was_training)
    return tensor_to_grid(out, x.spacing)


@torch.no_grad()
def time_forward(model: PhysNet, runs: int = 10, warmup: int = 2) -> float:
    """Median single-sample inference latency in milliseconds"""
    device = _model_device(model)
    n = model.config.grid_resolution
    x = torch.zeros((1, 1, n, n, n), device=device)
    y = torch.zeros((1, model.config.condition_length), device=device)
    was_training = model.training
    model.eval()
    timings = []
    try:
        for i in range(warmup + runs):
            if device.type == "cuda":
                torch.cuda.synchronize(device)
            started = time.perf_counter()
            model(x, y, deterministic=True)
            if device.type == "cuda":
                torch.cuda.synchronize(device)
            if i >= warmup:
                timings.append((time.perf_counter() - started) * 1000.0)
    finally:
        model.train(was_training)
    return float(np.median(timings))


# ---------------------------------------------------------------------------
# Checkpoints

@dataclass
class ModelWeights:
    """Named f32 tensors of E, G and D plus the config they belong to"""
    config: NetworkConfig
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def fingerprint(self) -> int:
        return self.config.fingerprint()

    @classmethod
    def from_model(cls, model: PhysNet, metadata: Optional[Dict[str, Any]] = None) -> "ModelWeights":
        tensors = {name: t.detach().to("cpu", torch.float32).numpy().copy()
                   for name, t in model.state_dict().items()}
        return cls(model.config, tensors, dict(metadata or {}))

    def to_model(self, device: Union[str, torch.device] = "cpu") -> PhysNet:
        model = PhysNet(self.config)
        expected = model.state_dict()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise WeightsError(f"checkpoint tensors do not match the network (missing {missing}, extra {extra})")
        state = {}
        for name, reference in expected.items():
            array = self.tensors[name]
            if tuple(array.shape) != tuple(reference.shape):
                raise WeightsError(f"tensor {name} has shape {array.shape}, network expects {tuple(reference.shape)}")
            state[name] = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))
        model.load_state_dict(state)
        return model.to(device)

    def to_bytes(self) -> bytes:
        header = json.dumps({"config": self.config.to_dict(), "metadata": self.metadata},
                            sort_keys=True).encode("utf-8")
        parts = [_WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, self.fingerprint),
                 _U32.pack(len(header)), header, _U32.pack(len(self.tensors))]
        for name in sorted(self.tensors):
            array = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            parts.append(_U16.pack(len(encoded)))
            parts.append(encoded)
            parts.append(_U8.pack(array.ndim))
            parts.extend(_U32.pack(d) for d in array.shape)
            parts.append(array.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, expected: Optional[NetworkConfig] = None) -> "ModelWeights":
        try:
            return cls._parse(data, expected)
        except struct.error as e:
            raise FormatError(f"truncated checkpoint: {e}") from e

    @classmethod
    def _parse(cls, data: bytes, expected: Optional[NetworkConfig]) -> "ModelWeights":
        if len(data) < _WEIGHTS_HEADER.size or data[:4] != WEIGHTS_MAGIC:
            raise FormatError(f"bad magic {data[:4]!r}, expected {WEIGHTS_MAGIC!r}")
        _, version, fingerprint = _WEIGHTS_HEADER.unpack_from(data)
        if version != WEIGHTS_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        offset = _WEIGHTS_HEADER.size
        (n_header,) = _U32.unpack_from(data, offset)
        offset += _U32.size
        header = json.loads(data[offset:offset + n_header].decode("utf-8"))
        offset += n_header
        config = NetworkConfig.from_dict(header["config"])
        if config.fingerprint() != fingerprint:
            raise WeightsError("checkpoint fingerprint does not match its stored config")
        if expected is not None and expected.fingerprint() != fingerprint:
            raise WeightsError(f"checkpoint fingerprint {fingerprint:016x} does not match "
                               f"the requested config {expected.fingerprint():016x}")
        (count,) = _U32.unpack_from(data, offset)
        offset += _U32.size
        tensors = {}
        for _ in range(count):
            (n_name,) = _U16.unpack_from(data, offset)
            offset += _U16.size
            name = data[offset:offset + n_name].decode("utf-8")
            offset += n_name
            (ndim,) = _U8.unpack_from(data, offset)
            offset += _U8.size
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if offset + 4 * size > len(data):
                raise FormatError(f"truncated tensor {name}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape).copy()
            offset += 4 * size
        return cls(config, tensors, header.get("metadata", {}))


def save_weights(model: PhysNet, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ModelWeights.from_model(model, metadata).to_bytes())
    return path


def load_weights(path: PathLike, expected: Optional[NetworkConfig] = None,
                 device: Union[str, torch.device] = "cpu") -> Tuple[PhysNet, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise WeightsError(f"no checkpoint at {path}")
    weights = ModelWeights.from_bytes(path.read_bytes(), expected)
    return weights.to_model(device), weights.metadata


def with_condition_length(config: NetworkConfig, length: int) -> NetworkConfig:
    return replace(config, condition_length=length)
