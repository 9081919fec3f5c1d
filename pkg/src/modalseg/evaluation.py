"""Dice scoring over composite regions and the missing-channel matrix.

Regions follow the usual composite convention: whole tumor is classes
{1,2,3}, tumor core {1,3}, enhancing core {3}, so they are nested for any
label map. The evaluation matrix scores the test split once with all
channels and once per single missing channel, reporting the slice-level mean
Dice per region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .dataio import CHANNEL_NAMES, ChannelMask, Dataset, NUM_CLASSES
from .model import ChannelSeparateUNet

REGION_CLASSES = {"WT": (1, 2, 3), "TC": (1, 3), "EC": (3,)}
REGION_ORDER = ("WT", "TC", "EC")
FULL_ROW = "full"
EVAL_BATCH = 16

DICE_FOOTNOTE = "Dice convention: both masks empty scores 1.0, exactly one empty scores 0.0."


@dataclass(frozen=True)
class RegionSpec:
    name: str
    classes: tuple[int, ...]


def standard_rows(channel_names=CHANNEL_NAMES) -> tuple[str, ...]:
    return (FULL_ROW,) + tuple(f"missing-{name}" for name in channel_names)


def row_mask(row: str, num_channels: int = len(CHANNEL_NAMES)) -> ChannelMask:
    """Channel mask for a report row name ('full' or 'missing-<channel>')."""
    if row == FULL_ROW:
        return ChannelMask.full(num_channels)
    if row.startswith("missing-") and row[8:] in CHANNEL_NAMES:
        return ChannelMask.drop(num_channels, CHANNEL_NAMES.index(row[8:]))
    raise ValueError(f"unknown evaluation row {row!r}")


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); both-empty scores 1.0 by convention."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError("mask shapes differ")
    denom = int(pred_mask.sum()) + int(gt_mask.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred_mask, gt_mask).sum()) / denom


def region_mask(labels: np.ndarray, region: str | RegionSpec) -> np.ndarray:
    """Boolean map of pixels whose class belongs to the region."""
    classes = REGION_CLASSES[region] if isinstance(region, str) else region.classes
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise ValueError("label map contains out-of-range class indices")
    return np.isin(labels, classes)


def predict_labels(
    net: ChannelSeparateUNet, channels: np.ndarray, mask: Optional[ChannelMask] = None
) -> np.ndarray:
    """Arg-max class map from the final stage; ties go to the lower index."""
    x = torch.from_numpy(np.asarray(channels)[None]).to(net.dtype)
    with torch.no_grad():
        probs = net(x, mask).final[0].numpy()
    return np.argmax(probs, axis=0)


@dataclass
class DiceReport:
    """Mean Dice per (mask row, region) over the test slices."""

    rows: tuple[str, ...]
    regions: tuple[str, ...]
    values: dict  # row -> region -> float
    slice_count: int

    def to_dict(self) -> dict:
        return {
            "rows": list(self.rows),
            "regions": list(self.regions),
            "values": {r: dict(self.values[r]) for r in self.rows},
            "slice_count": self.slice_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DiceReport":
        return cls(
            rows=tuple(data["rows"]),
            regions=tuple(data["regions"]),
            values={r: dict(data["values"][r]) for r in data["rows"]},
            slice_count=int(data["slice_count"]),
        )


def evaluate_matrix(
    net: ChannelSeparateUNet,
    dataset: Dataset,
    rows: Optional[tuple[str, ...]] = None,
    batch_size: int = EVAL_BATCH,
) -> DiceReport:
    """Score every row mask on the test split, in stable sample-id order."""
    ids = sorted(dataset.test_ids)
    if not ids:
        raise ValueError("dataset has no test samples")
    rows = standard_rows() if rows is None else rows

    samples = [dataset.read(sample_id) for sample_id in ids]
    x = torch.from_numpy(np.stack([s.channels for s in samples])).to(net.dtype)
    gt = [s.labels for s in samples]

    values = {}
    for row in rows:
        mask = row_mask(row, net.config.channels)
        scores = {region: [] for region in REGION_ORDER}
        with torch.no_grad():
            for start in range(0, len(ids), batch_size):
                batch = x[start : start + batch_size]
                probs = net(batch, mask).final.numpy()
                predicted = np.argmax(probs, axis=1)
                for offset in range(predicted.shape[0]):
                    for region in REGION_ORDER:
                        scores[region].append(
                            dice(
                                region_mask(predicted[offset], region),
                                region_mask(gt[start + offset], region),
                            )
                        )
        values[row] = {region: float(np.mean(scores[region])) for region in REGION_ORDER}
    return DiceReport(tuple(rows), REGION_ORDER, values, len(ids))


def render_report(report: DiceReport, fmt: str = "text") -> str:
    """Render a report as 'text', 'csv', or 'json' (3-decimal tables)."""
    if fmt == "json":
        return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        lines = ["mask," + ",".join(report.regions)]
        for row in report.rows:
            cells = ",".join(f"{report.values[row][r]:.3f}" for r in report.regions)
            lines.append(f"{row},{cells}")
        return "\n".join(lines) + "\n"
    if fmt == "text":
        width = max(len(r) for r in report.rows) + 2
        lines = [
            f"Mean Dice over {report.slice_count} test slices",
            "".join([" " * width] + [f"{r:>8}" for r in report.regions]),
        ]
        for row in report.rows:
            cells = "".join(f"{report.values[row][r]:>8.3f}" for r in report.regions)
            lines.append(f"{row:<{width}}{cells}")
        lines.append(DICE_FOOTNOTE)
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")
