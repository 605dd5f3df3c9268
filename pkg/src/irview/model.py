"""The two network blocks: plain autoencoder and pose-conditioned predictor.

Both share the same conv/deconv stacks: four stride-2 convolutions
(kernels 5,3,3,3; filters 32,32,64,64) take a 64x64 view down to a 4x4x64
map flattened into a 1024-long embedding; the decoder mirrors the stack back
up to 64x64 with a tanh output. The predictor additionally runs the 5-entry
pose vector through a 64-wide fully connected branch, concatenates it with
the image embedding (1088 wide) and fuses through two 1024-wide fully
connected layers before decoding.
"""

from __future__ import annotations

import subprocess
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import __version__
from .data import IMAGE_SIZE, POSE_DIM


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    conv_filters: tuple[int, ...] = (32, 32, 64, 64)
    conv_kernels: tuple[int, ...] = (5, 3, 3, 3)
    conv_stride: int = 2
    embedding_dim: int = 1024
    pose_dim: int = POSE_DIM
    pose_fc_dim: int = 64
    fusion_fc_dims: tuple[int, ...] = (1024, 1024)
    deconv_filters: tuple[int, ...] = (64, 64, 32, 32)
    deconv_kernels: tuple[int, ...] = (3, 3, 3, 5)
    output_kernel: int = 3
    leaky_relu_slope: float = 0.2

    def __post_init__(self):
        if self.input_size != IMAGE_SIZE:
            raise ValueError(f"only {IMAGE_SIZE}x{IMAGE_SIZE} inputs are supported")
        if len(self.conv_filters) != len(self.conv_kernels):
            raise ValueError("conv_filters and conv_kernels must have equal length")
        side = self.input_size // (self.conv_stride ** len(self.conv_filters))
        if side * (self.conv_stride ** len(self.conv_filters)) != self.input_size:
            raise ValueError("input size must be divisible by the total conv stride")
        if side * side * self.conv_filters[-1] != self.embedding_dim:
            raise ValueError(
                f"flattened encoder output {side}x{side}x{self.conv_filters[-1]} "
                f"does not match embedding_dim={self.embedding_dim}"
            )
        if self.leaky_relu_slope <= 0:
            raise ValueError("leaky_relu_slope must be positive")

    @property
    def bottleneck_side(self) -> int:
        return self.input_size // (self.conv_stride ** len(self.conv_filters))

    @property
    def fused_width(self) -> int:
        return self.embedding_dim + self.pose_fc_dim


def _check_image_batch(x: torch.Tensor, size: int) -> None:
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != size or x.shape[3] != size:
        raise ValueError(f"expected image batch of shape (N, 1, {size}, {size}), got {tuple(x.shape)}")


class ViewEncoder(nn.Module):
    """Stride-2 conv stack; 64 -> 32 -> 16 -> 8 -> 4, flattened row-major."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        layers = []
        in_ch = 1
        for filters, kernel in zip(config.conv_filters, config.conv_kernels):
            layers.append(
                nn.Conv2d(in_ch, filters, kernel, stride=config.conv_stride, padding=kernel // 2)
            )
            layers.append(nn.LeakyReLU(config.leaky_relu_slope))
            in_ch = filters
        self.stack = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_image_batch(x, self.config.input_size)
        fmap = self.stack(x)
        # flatten the H x W x C map row-major
        return fmap.permute(0, 2, 3, 1).reshape(x.shape[0], -1)


class PoseBranch(nn.Module):
    """Independent processing of the pose vector: one 5 -> 64 FC layer."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.fc = nn.Linear(config.pose_dim, config.pose_fc_dim)
        self.act = nn.LeakyReLU(config.leaky_relu_slope)

    def forward(self, pose: torch.Tensor) -> torch.Tensor:
        if pose.dim() != 2 or pose.shape[1] != self.config.pose_dim:
            raise ValueError(f"expected pose batch of shape (N, {self.config.pose_dim}), got {tuple(pose.shape)}")
        return self.act(self.fc(pose))


class FusionMLP(nn.Module):
    """Joint processing of [embedding, pose features]: 1088 -> 1024 -> 1024."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        layers = []
        width = config.fused_width
        for out_width in config.fusion_fc_dims:
            layers.append(nn.Linear(width, out_width))
            layers.append(nn.LeakyReLU(config.leaky_relu_slope))
            width = out_width
        self.stack = nn.Sequential(*layers)

    def forward(self, embedding: torch.Tensor, pose_features: torch.Tensor) -> torch.Tensor:
        if embedding.shape[-1] != self.config.embedding_dim:
            raise ValueError(f"embedding width {embedding.shape[-1]} != {self.config.embedding_dim}")
        if pose_features.shape[-1] != self.config.pose_fc_dim:
            raise ValueError(f"pose feature width {pose_features.shape[-1]} != {self.config.pose_fc_dim}")
        fused = torch.cat([embedding, pose_features], dim=-1)
        return self.stack(fused)


class ViewDecoder(nn.Module):
    """Mirrored transposed-conv stack; 4 -> 8 -> 16 -> 32 -> 64, tanh output."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        stages = []
        in_ch = config.conv_filters[-1]
        for filters, kernel in zip(config.deconv_filters, config.deconv_kernels):
            stages.append(
                nn.ConvTranspose2d(
                    in_ch,
                    filters,
                    kernel,
                    stride=config.conv_stride,
                    padding=kernel // 2,
                    output_padding=config.conv_stride - 1,
                )
            )
            stages.append(nn.LeakyReLU(config.leaky_relu_slope))
            in_ch = filters
        self.stack = nn.Sequential(*stages)
        self.project = nn.Conv2d(in_ch, 1, config.output_kernel, padding=config.output_kernel // 2)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.dim() != 2 or latent.shape[1] != self.config.embedding_dim:
            raise ValueError(f"expected latent of shape (N, {self.config.embedding_dim}), got {tuple(latent.shape)}")
        side = self.config.bottleneck_side
        fmap = latent.reshape(-1, side, side, self.config.conv_filters[-1]).permute(0, 3, 1, 2)
        return torch.tanh(self.project(self.stack(fmap)))


class VanillaAutoencoder(nn.Module):
    """Block 1: unconditioned encoder/decoder, source of target-view embeddings."""

    kind = "vanilla"

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.encoder = ViewEncoder(self.config)
        self.decoder = ViewDecoder(self.config)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        embedding = self.encoder(x)
        return embedding, self.decoder(embedding)


class ViewPredictor(nn.Module):
    """Block 2: same stacks plus pose conditioning through feature fusion."""

    kind = "predictor"

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.encoder = ViewEncoder(self.config)
        self.pose_branch = PoseBranch(self.config)
        self.fusion = FusionMLP(self.config)
        self.decoder = ViewDecoder(self.config)

    def forward(
        self, x: torch.Tensor, pose: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        pre_fusion = self.encoder(x)
        post_fusion = self.fusion(pre_fusion, self.pose_branch(pose))
        return pre_fusion, post_fusion, self.decoder(post_fusion)


_MODEL_KINDS = {"vanilla": VanillaAutoencoder, "predictor": ViewPredictor}


def init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in-scaled uniform init for every conv/linear layer, seed-controlled."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear, nn.ConvTranspose2d)):
            if isinstance(m, nn.Linear):
                fan_in = m.weight.shape[1]
            elif isinstance(m, nn.Conv2d):
                fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
            else:  # ConvTranspose2d weight layout is (in, out, kh, kw)
                fan_in = m.weight.shape[0] * m.weight.shape[2] * m.weight.shape[3]
            bound = 1.0 / float(np.sqrt(fan_in))
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)


def build_vanilla(config: ModelConfig | None = None, seed: int = 0) -> VanillaAutoencoder:
    model = VanillaAutoencoder(config)
    init_parameters(model, seed)
    return model


def build_predictor(config: ModelConfig | None = None, seed: int = 0) -> ViewPredictor:
    model = ViewPredictor(config)
    init_parameters(model, seed)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def describe(model: nn.Module) -> str:
    """Layer names, shapes, and the total parameter count, one line each."""
    lines = []
    for name, param in model.named_parameters():
        lines.append(f"{name} {tuple(param.shape)} {param.numel()}")
    lines.append(f"total_parameters {count_parameters(model)}")
    return "\n".join(lines)


def code_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except OSError:
        pass
    return __version__


def save_checkpoint(
    model: nn.Module,
    path: str | Path,
    seed: int,
    extra: dict | None = None,
) -> Path:
    """Serialize weights plus (config, seed, code version) metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": model.kind,
        "model_config": asdict(model.config),
        "seed": seed,
        "version": code_version(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    payload = torch.load(path, map_location="cpu")
    kind = payload["kind"]
    if kind not in _MODEL_KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    cfg_dict = dict(payload["model_config"])
    for key in ("conv_filters", "conv_kernels", "fusion_fc_dims", "deconv_filters", "deconv_kernels"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = ModelConfig(**cfg_dict)
    model = _MODEL_KINDS[kind](config)
    model.load_state_dict(payload["state_dict"], strict=True)
    meta = {k: payload[k] for k in ("kind", "seed", "version", "extra")}
    meta["model_config"] = config
    return model, meta


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack (64, 64) arrays into an (N, 1, 64, 64) float32 batch."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).unsqueeze(1)


def poses_to_tensor(poses: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.asarray(p, dtype=np.float32) for p in poses])
    return torch.from_numpy(arr)


def tensor_to_images(batch: torch.Tensor) -> np.ndarray:
    """(N, 1, 64, 64) batch back to an (N, 64, 64) float32 array."""
    return batch.detach().squeeze(1).cpu().numpy()
