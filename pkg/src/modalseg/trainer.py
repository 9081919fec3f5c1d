"""Modality-drop training loop with alternating discriminator/main updates.

Each step runs the full-channel forward pass, one uniformly dropped-channel
forward pass over the same encoder features, a discriminator update on the
bottleneck similarity loss, and a main update on the weighted total. The
drop index, batch order, and both initializations derive from seeded PCG64
streams, so a (seed, config, dataset) triple reproduces the metrics stream
bit for bit, and checkpoints restore it mid-run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import AdamState, TrainState, load_checkpoint, save_checkpoint
from .dataio import ChannelMask, Dataset
from .losses import (
    LossConfig,
    NonFiniteLossError,
    adversarial_bce,
    drop_scale,
    frozen,
    generator_loss,
    init_discriminator,
    seg_loss,
    stage_labels,
)
from .model import ModelConfig, init_model


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    disc_learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_interval: int = 500
    seed: int = 1
    disc_seed: int | None = None  # defaults to seed + 1
    double_precision: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.disc_learning_rate < 0:
            raise ValueError("learning_rate must be > 0 and disc rate >= 0")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.double_precision else torch.float32

    @property
    def effective_disc_seed(self) -> int:
        return self.seed + 1 if self.disc_seed is None else self.disc_seed


def sample_drop_channel(rng: np.random.Generator, num_channels: int) -> ChannelMask:
    """Mask with exactly one channel dropped, chosen uniformly."""
    if num_channels < 2:
        raise ValueError("dropping a channel requires at least two channels")
    return ChannelMask.drop(num_channels, int(rng.integers(num_channels)))


def fresh_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    net = init_model(model_cfg, cfg.dtype)
    disc = init_discriminator(model_cfg.bottleneck_width, cfg.effective_disc_seed, cfg.dtype)
    return TrainState(
        net=net,
        disc=disc,
        opt_net=AdamState(net.parameters()),
        opt_disc=AdamState(disc.parameters()),
        step=0,
        rng=np.random.Generator(np.random.PCG64(cfg.seed)),
    )


def _component(value: torch.Tensor, name: str, step: int) -> torch.Tensor:
    if not torch.isfinite(value):
        raise NonFiniteLossError(name, step)
    return value


def train_step(state: TrainState, x: torch.Tensor, staged_y, cfg: TrainConfig) -> dict:
    """One training iteration; mutates ``state`` and returns step metrics.

    The discriminator step touches only its own parameters and the main step
    touches only the segmentation parameters. With a zero discriminator rate
    the discriminator update is skipped outright, and with beta == 0 the
    generator term is evaluated for the metrics log but kept out of the
    gradient graph, so the run is independent of the discriminator entirely.
    """
    step = state.step + 1
    net, disc, loss_cfg = state.net, state.disc, cfg.loss
    num_channels = net.config.channels
    scale = drop_scale(num_channels)

    mask = sample_drop_channel(state.rng, num_channels)
    encoded = net.encode(x)
    pred_full = net.decode(encoded)
    loss_full = _component(
        seg_loss(pred_full.probabilities, staged_y, loss_cfg.prob_floor), "loss_full", step
    )
    pred_drop = net.decode(encoded, mask)
    loss_drop = _component(
        seg_loss(pred_drop.probabilities, staged_y, loss_cfg.prob_floor), "loss_drop", step
    )
    scaled_full = scale * pred_full.bottleneck
    f0_drop = pred_drop.bottleneck

    if cfg.disc_learning_rate > 0:
        disc.zero_grad()
        d_loss = adversarial_bce(disc, f0_drop.detach(), scaled_full.detach())
        _component(d_loss, "d_loss", step)
        d_loss.backward()
        state.opt_disc.step(
            list(disc.parameters()),
            cfg.disc_learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        )
    else:
        with torch.no_grad():
            d_loss = adversarial_bce(disc, f0_drop, scaled_full)
        _component(d_loss, "d_loss", step)

    if loss_cfg.beta > 0:
        with frozen(disc):
            g_loss = generator_loss(disc, scaled_full)
        _component(g_loss, "g_loss", step)
        total = loss_full + loss_cfg.alpha * loss_drop + loss_cfg.beta * g_loss
    else:
        with torch.no_grad():
            g_loss = generator_loss(disc, scaled_full)
        _component(g_loss, "g_loss", step)
        total = loss_full + loss_cfg.alpha * loss_drop
    _component(total, "total", step)

    net.zero_grad()
    total.backward()
    state.opt_net.step(
        list(net.parameters()),
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    )

    state.step = step
    return {
        "step": step,
        "loss_full": float(loss_full.item()),
        "loss_drop": float(loss_drop.item()),
        "d_loss": float(d_loss.item()),
        "g_loss": float(g_loss.item()),
        "dropped_channel": mask.missing()[0],
    }


def load_split(dataset: Dataset, ids, dtype: torch.dtype):
    """Stack a split into (images, labels) tensors in manifest order."""
    samples = [dataset.read(sample_id) for sample_id in ids]
    x = torch.from_numpy(np.stack([s.channels for s in samples])).to(dtype)
    y = torch.from_numpy(np.stack([s.labels for s in samples]).astype(np.int64))
    return x, y


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    dataset_root,
    out_dir,
    resume=None,
) -> tuple[TrainState, Path, Path]:
    """Run the training loop; returns (state, final checkpoint, metrics path).

    Writes one JSON metrics line per step, checkpoints every
    ``checkpoint_interval`` steps and at the end. With ``resume`` pointing at
    a checkpoint from the same configuration the run continues at the next
    step with the same random stream and appends to the metrics log.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = Dataset.load(dataset_root)
    if len(dataset.train_ids) == 0:
        raise ValueError("dataset has no training samples")

    x_all, labels = load_split(dataset, dataset.train_ids, cfg.dtype)
    if x_all.shape[1] != model_cfg.channels or x_all.shape[2:] != (
        model_cfg.height,
        model_cfg.width,
    ):
        raise ValueError(
            f"dataset samples are {tuple(x_all.shape[1:])}, model expects "
            f"({model_cfg.channels}, {model_cfg.height}, {model_cfg.width})"
        )
    staged_all = stage_labels(labels, model_cfg.levels)

    if resume is not None:
        state = load_checkpoint(resume)
        if state.net.config != model_cfg:
            raise ValueError("resume checkpoint was trained with a different model config")
    else:
        state = fresh_state(model_cfg, cfg)

    n_train = x_all.shape[0]
    metrics_path = out_dir / "metrics.jsonl"
    checkpoints = []
    with open(metrics_path, "a" if resume is not None else "w") as metrics_file:
        while state.step < cfg.steps:
            idx = torch.from_numpy(state.rng.integers(0, n_train, size=cfg.batch_size))
            metrics = train_step(state, x_all[idx], [s[idx] for s in staged_all], cfg)
            metrics_file.write(json.dumps(metrics, sort_keys=True) + "\n")
            if cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                path = out_dir / f"checkpoint_{state.step:06d}.mmck"
                save_checkpoint(state, path)
                checkpoints.append(path)

    final_path = out_dir / f"checkpoint_{state.step:06d}.mmck"
    if not checkpoints or checkpoints[-1] != final_path:
        save_checkpoint(state, final_path)
    return state, final_path, metrics_path
