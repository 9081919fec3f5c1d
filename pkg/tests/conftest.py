"""Session fixtures for the acceptance suite.

The end-to-end criteria share six trained models (three seeds, each trained
with and without the adversarial similarity term) on one synthetic dataset.
Training them takes tens of minutes, so the fixture honors
MODALSEG_ACCEPT_CACHE: point it at a directory to reuse finished runs across
pytest invocations. Without it everything lands in the session tmp dir and
is trained from scratch.
"""

import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from modalseg.dataio import Dataset, SyntheticSpec, generate_synthetic_dataset
from modalseg.losses import LossConfig
from modalseg.model import ModelConfig
from modalseg.trainer import TrainConfig, train

ACCEPT_SEEDS = (1, 2, 3)
ACCEPT_STEPS = 2000
ACCEPT_DATASET_SEED = 7
ACCEPT_DATASET_COUNT = 500  # 400 train / 100 test after the 80/20 split


@dataclass
class TrainedRun:
    checkpoint: Path
    metrics: Path
    seconds: float


@dataclass
class AcceptanceRuns:
    dataset: Dataset
    proposed: dict  # seed -> TrainedRun
    baseline: dict  # seed -> TrainedRun


def _run_config(seed: int, beta: float) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = ModelConfig(seed=seed)
    train_cfg = TrainConfig(
        steps=ACCEPT_STEPS,
        seed=seed,
        loss=LossConfig(beta=beta),
        # The baseline ignores the discriminator entirely; skipping its
        # updates does not change the main-parameter trajectory when beta=0.
        disc_learning_rate=0.0 if beta == 0 else 2e-4,
    )
    return model_cfg, train_cfg


def _train_or_reuse(root: Path, tag: str, seed: int, beta: float, dataset_root) -> TrainedRun:
    out_dir = root / f"{tag}_seed{seed}"
    final = out_dir / f"checkpoint_{ACCEPT_STEPS:06d}.mmck"
    timing = out_dir / "timing.json"
    if final.exists() and timing.exists():
        return TrainedRun(final, out_dir / "metrics.jsonl", json.loads(timing.read_text())["seconds"])
    model_cfg, train_cfg = _run_config(seed, beta)
    started = time.time()
    _, checkpoint, metrics = train(model_cfg, train_cfg, dataset_root, out_dir)
    seconds = time.time() - started
    timing.write_text(json.dumps({"seconds": seconds}))
    return TrainedRun(checkpoint, metrics, seconds)


@pytest.fixture(scope="session")
def acceptance_runs(tmp_path_factory) -> AcceptanceRuns:
    cache = os.environ.get("MODALSEG_ACCEPT_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)

    data_root = root / "data"
    if not (data_root / "manifest.json").exists():
        generate_synthetic_dataset(
            SyntheticSpec(count=ACCEPT_DATASET_COUNT, seed=ACCEPT_DATASET_SEED), data_root
        )
    dataset = Dataset.load(data_root)

    proposed = {
        seed: _train_or_reuse(root, "proposed", seed, beta=0.1, dataset_root=data_root)
        for seed in ACCEPT_SEEDS
    }
    baseline = {
        seed: _train_or_reuse(root, "baseline", seed, beta=0.0, dataset_root=data_root)
        for seed in ACCEPT_SEEDS
    }
    return AcceptanceRuns(dataset, proposed, baseline)
