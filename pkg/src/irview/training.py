"""Objective terms and the two-stage optimization procedure.

Stage 1 trains the plain autoencoder on single views. Stage 2 freezes it,
extracts one reference embedding per view, and trains the predictor so that
its post-fusion latent matches the reference embedding of the target view
while its decoded output matches the target image. Both error terms are
mean squared errors and the reported total is their plain sum.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .data import SampleKey, ViewPair, ViewSample
from .model import (
    ModelConfig,
    VanillaAutoencoder,
    ViewPredictor,
    build_predictor,
    build_vanilla,
    images_to_tensor,
    poses_to_tensor,
    save_checkpoint,
)

LOSS_MODES = ("mse_only", "embedding_plus_mse")


def mse(a, b):
    """Mean over all elements of squared differences. Shapes must match.

    Accepts torch tensors (returned as a 0-dim tensor, so it can sit in the
    training objective) or array-likes (returned as a float).
    """
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        return torch.mean((a - b) ** 2)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def embedding_loss(predicted_embedding, target_embedding):
    """Guidance term: MSE between the post-fusion latent and its reference."""
    return mse(predicted_embedding, target_embedding)


def output_loss(predicted_image, target_image):
    """Reconstruction term: MSE between generated and ground-truth views."""
    return mse(predicted_image, target_image)


@dataclass
class LossBreakdown:
    """The two error terms and their sum, as logged on every step."""

    embedding: float
    output: float
    total: float

    @classmethod
    def from_terms(cls, embedding: float, output: float) -> "LossBreakdown":
        return cls(embedding=embedding, output=output, total=embedding + output)


def total_loss(predicted_embedding, target_embedding, predicted_image, target_image) -> LossBreakdown:
    e = embedding_loss(predicted_embedding, target_embedding)
    o = output_loss(predicted_image, target_image)
    return LossBreakdown.from_terms(float(e), float(o))


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 80
    lr_initial: float = 1e-3
    lr_final: float = 1e-4
    lr_switch_epoch: int = 70
    seed: int = 0
    loss_mode: str = "embedding_plus_mse"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # hooks for experimentation; the defaults reproduce the plain sum
    embedding_weight: float = 1.0
    output_weight: float = 1.0
    checkpoint_every: int | None = None
    stop_below: float | None = None  # stop once an epoch's mean total drops below

    def validate(self) -> None:
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must not exceed lr_initial")
        if not 0 < self.lr_switch_epoch <= self.epochs:
            raise ValueError("lr_switch_epoch must lie in (0, epochs]")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")


@dataclass
class StepRecord:
    epoch: int
    step: int
    embedding_mse: float
    output_mse: float
    total_mse: float
    lr: float


@dataclass
class EpochRecord:
    epoch: int
    embedding_mse: float
    output_mse: float
    total_mse: float
    val_total_mse: float | None
    lr: float
    wall_time_s: float


@dataclass
class TrainingRun:
    """Per-step and per-epoch log of one training, plus its checkpoint."""

    epoch_records: list[EpochRecord] = field(default_factory=list)
    step_records: list[StepRecord] = field(default_factory=list)
    checkpoint_path: Path | None = None

    def loss_curve(self) -> list[float]:
        return [r.total_mse for r in self.epoch_records]

    def write_log(self, path: str | Path) -> Path:
        """Line-delimited step records plus an end-of-run summary line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,step,embedding_mse,output_mse,total_mse,lr\n")
            for r in self.step_records:
                fh.write(
                    f"{r.epoch},{r.step},{r.embedding_mse:.10e},{r.output_mse:.10e},"
                    f"{r.total_mse:.10e},{r.lr:g}\n"
                )
            last = self.epoch_records[-1] if self.epoch_records else None
            if last is not None:
                val = "" if last.val_total_mse is None else f"{last.val_total_mse:.10e}"
                fh.write(
                    f"summary,epochs={len(self.epoch_records)},"
                    f"final_total_mse={last.total_mse:.10e},final_val_total_mse={val}\n"
                )
            else:
                fh.write("summary,epochs=0\n")
        return path


def _lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    return config.lr_initial if epoch < config.lr_switch_epoch else config.lr_final


def _run_training(
    model: torch.nn.Module,
    n_items: int,
    forward_fn: Callable[[np.ndarray], tuple[torch.Tensor, torch.Tensor]],
    config: TrainConfig,
    val_fn: Callable[[], float] | None,
    checkpoint_dir: str | Path | None,
    seed_for_checkpoint: int,
) -> TrainingRun:
    """Shared Adam loop: seeded shuffling, one lr drop, per-step logging."""
    run = TrainingRun()
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.lr_initial, betas=config.adam_betas, eps=config.adam_eps
    )
    shuffle_rng = np.random.default_rng(config.seed)
    global_step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = _lr_for_epoch(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = shuffle_rng.permutation(n_items)
        epoch_e, epoch_o, epoch_t = [], [], []
        for start in range(0, n_items, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            term_e, term_o = forward_fn(batch_idx)
            if config.loss_mode == "mse_only":
                objective = config.output_weight * term_o
            else:
                objective = config.embedding_weight * term_e + config.output_weight * term_o
            optimizer.zero_grad()
            objective.backward()
            optimizer.step()
            e_val, o_val = float(term_e.detach()), float(term_o.detach())
            t_val = e_val + o_val
            if not np.isfinite(t_val):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch} step {global_step}: "
                    f"embedding={e_val} output={o_val}"
                )
            run.step_records.append(
                StepRecord(epoch, global_step, e_val, o_val, t_val, lr)
            )
            epoch_e.append(e_val)
            epoch_o.append(o_val)
            epoch_t.append(t_val)
            global_step += 1
        val_total = val_fn() if val_fn is not None else None
        run.epoch_records.append(
            EpochRecord(
                epoch=epoch,
                embedding_mse=float(np.mean(epoch_e)),
                output_mse=float(np.mean(epoch_o)),
                total_mse=float(np.mean(epoch_t)),
                val_total_mse=val_total,
                lr=lr,
                wall_time_s=time.perf_counter() - t0,
            )
        )
        if checkpoint_dir is not None and config.checkpoint_every:
            if (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    model,
                    Path(checkpoint_dir) / f"{model.kind}_epoch{epoch + 1:04d}.pt",
                    seed=seed_for_checkpoint,
                )
        if config.stop_below is not None and run.epoch_records[-1].total_mse < config.stop_below:
            break
    return run


def train_vanilla(
    samples: Sequence[ViewSample],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    val_samples: Sequence[ViewSample] | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[VanillaAutoencoder, TrainingRun]:
    """Stage 1: minimize reconstruction MSE of single views.

    There is no guidance term here, so the embedding column of the log is 0
    and the total equals the reconstruction error.
    """
    config.validate()
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(config.seed)
    model = build_vanilla(model_config, seed=config.seed)
    x = images_to_tensor([s.image for s in samples])
    zero = torch.zeros(())

    def forward_fn(batch_idx):
        batch = x[batch_idx]
        _, recon = model(batch)
        return zero, mse(recon, batch)

    val_fn = None
    if val_samples:
        vx = images_to_tensor([s.image for s in val_samples])

        def val_fn():
            model.eval()
            with torch.no_grad():
                _, recon = model(vx)
                out = float(mse(recon, vx))
            model.train()
            return out

    run = _run_training(model, len(samples), forward_fn, config, val_fn, checkpoint_dir, config.seed)
    if checkpoint_dir is not None:
        run.checkpoint_path = save_checkpoint(
            model, Path(checkpoint_dir) / "vanilla.pt", seed=config.seed
        )
    if log_path is not None:
        run.write_log(log_path)
    model.eval()
    return model, run


def extract_embeddings(
    model: VanillaAutoencoder | ViewPredictor,
    samples: Sequence[ViewSample],
    batch_size: int = 256,
) -> dict[SampleKey, np.ndarray]:
    """Reference embedding per view: the frozen encoder output, keyed by sample.

    Weights are not touched; re-running on a reloaded checkpoint is
    bit-identical.
    """
    out: dict[SampleKey, np.ndarray] = {}
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x = images_to_tensor([s.image for s in chunk])
            emb = model.encoder(x).cpu().numpy().astype(np.float32)
            for sample, vec in zip(chunk, emb):
                key = sample.key()
                if key in out:
                    raise ValueError(f"duplicate sample key {key} while extracting embeddings")
                out[key] = vec
    return out


def train_predictor(
    pairs: Sequence[ViewPair],
    target_embeddings: Mapping[SampleKey, np.ndarray],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    val_pairs: Sequence[ViewPair] | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ViewPredictor, TrainingRun]:
    """Stage 2: fit the pose-conditioned predictor against frozen references.

    The objective is embedding MSE plus output MSE (or output MSE alone in
    ``mse_only`` mode; the embedding term is still computed and logged).
    Reference embeddings are constants; no gradient flows into stage 1.
    """
    config.validate()
    if not pairs:
        raise ValueError("cannot train on an empty pair list")
    for p in pairs:
        if p.target.key() not in target_embeddings:
            raise KeyError(f"no reference embedding for target view {p.target.key()}")
    torch.manual_seed(config.seed)
    model = build_predictor(model_config, seed=config.seed)

    def tensors_for(pair_list):
        x = images_to_tensor([p.input.image for p in pair_list])
        pose = poses_to_tensor([p.pose for p in pair_list])
        y = images_to_tensor([p.target.image for p in pair_list])
        e_ref = torch.from_numpy(
            np.stack([np.asarray(target_embeddings[p.target.key()], dtype=np.float32) for p in pair_list])
        )
        return x, pose, y, e_ref

    x, pose, y, e_ref = tensors_for(pairs)

    def forward_fn(batch_idx):
        _, post_fusion, prediction = model(x[batch_idx], pose[batch_idx])
        return mse(post_fusion, e_ref[batch_idx]), mse(prediction, y[batch_idx])

    val_fn = None
    if val_pairs:
        vx, vpose, vy, ve = tensors_for(val_pairs)

        def val_fn():
            model.eval()
            with torch.no_grad():
                _, post, pred = model(vx, vpose)
                out = float(mse(post, ve)) + float(mse(pred, vy))
            model.train()
            return out

    run = _run_training(model, len(pairs), forward_fn, config, val_fn, checkpoint_dir, config.seed)
    if checkpoint_dir is not None:
        run.checkpoint_path = save_checkpoint(
            model,
            Path(checkpoint_dir) / "predictor.pt",
            seed=config.seed,
            extra={"loss_mode": config.loss_mode},
        )
    if log_path is not None:
        run.write_log(log_path)
    model.eval()
    return model, run


def save_embedding_map(embeddings: Mapping[SampleKey, np.ndarray], path: str | Path) -> Path:
    """Persist a key -> vector map as an .npz archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted(embeddings)
    np.savez_compressed(
        path,
        class_id=np.array([k[0] for k in keys], dtype=np.int64),
        azimuth_deg=np.array([k[1] for k in keys], dtype=np.float64),
        day_night=np.array([k[2] for k in keys], dtype=np.int64),
        range_m=np.array([k[3] for k in keys], dtype=np.float64),
        vectors=np.stack([np.asarray(embeddings[k], dtype=np.float32) for k in keys]),
    )
    return path


def load_embedding_map(path: str | Path) -> dict[SampleKey, np.ndarray]:
    with np.load(path) as data:
        keys = zip(
            data["class_id"].tolist(),
            data["azimuth_deg"].tolist(),
            data["day_night"].tolist(),
            data["range_m"].tolist(),
        )
        return {tuple(k): v for k, v in zip(keys, data["vectors"])}
