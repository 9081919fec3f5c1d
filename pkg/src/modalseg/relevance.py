"""Per-channel, per-class weight-of-evidence maps and their heatmap export.

The weight of evidence a channel carries for a class at a pixel is the
difference in log2-odds between the class probability predicted from all
channels and the probability predicted with that channel masked out:
positive where the channel supports the class, negative where it argues
against it. Probabilities are clipped away from 0 and 1 before the odds so
the maps stay finite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .binary_io import FormatError, expect_magic
from .dataio import ChannelMask
from .model import ChannelSeparateUNet

RAW_MAP_MAGIC = b"WEMP"
RAW_MAP_VERSION = 1


@dataclass(frozen=True)
class OddsConfig:
    eps: float = 1e-6  # probability clip before the odds ratio

    def __post_init__(self):
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")

    @property
    def max_abs_we(self) -> float:
        """Largest magnitude a weight-of-evidence value can reach."""
        return 2.0 * np.log2((1.0 - self.eps) / self.eps)


def odds(p, cfg: OddsConfig = OddsConfig()):
    """p / (1 - p) with p clipped into [eps, 1 - eps] first."""
    p = np.clip(np.asarray(p, dtype=np.float64), cfg.eps, 1.0 - cfg.eps)
    result = p / (1.0 - p)
    return float(result) if result.ndim == 0 else result


def log2_odds_difference(p_full, p_missing, cfg: OddsConfig = OddsConfig()) -> np.ndarray:
    return np.log2(odds(p_full, cfg)) - np.log2(odds(p_missing, cfg))


def _final_probabilities(net: ChannelSeparateUNet, channels, mask) -> np.ndarray:
    x = torch.from_numpy(np.asarray(channels)[None]).to(net.dtype)
    with torch.no_grad():
        return net(x, mask).final[0].numpy().astype(np.float64)


def weight_of_evidence(
    net: ChannelSeparateUNet,
    channels: np.ndarray,
    channel: int,
    class_index: int,
    cfg: OddsConfig = OddsConfig(),
) -> np.ndarray:
    """Signed log2-odds map of what ``channel`` contributes to ``class_index``."""
    num_channels = net.config.channels
    if not 0 <= channel < num_channels:
        raise ValueError(f"channel {channel} out of range")
    if not 0 <= class_index < net.config.classes:
        raise ValueError(f"class {class_index} out of range")
    p_full = _final_probabilities(net, channels, None)[class_index]
    p_missing = _final_probabilities(
        net, channels, ChannelMask.drop(num_channels, channel)
    )[class_index]
    return log2_odds_difference(p_full, p_missing, cfg)


def relevance_report(
    net: ChannelSeparateUNet, channels: np.ndarray, cfg: OddsConfig = OddsConfig()
) -> np.ndarray:
    """Stack of weight-of-evidence maps for every (channel, class) pair.

    Shape (C, K, H, W). The forward passes are shared across classes, which
    yields bit-identical values to calling ``weight_of_evidence`` per pair.
    """
    num_channels, num_classes = net.config.channels, net.config.classes
    p_full = _final_probabilities(net, channels, None)
    maps = np.empty((num_channels, num_classes) + p_full.shape[1:], dtype=np.float64)
    for c in range(num_channels):
        p_missing = _final_probabilities(net, channels, ChannelMask.drop(num_channels, c))
        for j in range(num_classes):
            maps[c, j] = log2_odds_difference(p_full[j], p_missing[j], cfg)
    return maps


def write_raw_map(map2d: np.ndarray, path) -> None:
    """Raw float32 dump: 16-byte header (magic, u32 version/H/W) plus values."""
    map2d = np.asarray(map2d, dtype="<f4")
    if map2d.ndim != 2:
        raise ValueError("expected a 2-D map")
    h, w = map2d.shape
    header = RAW_MAP_MAGIC + struct.pack("<III", RAW_MAP_VERSION, h, w)
    Path(path).write_bytes(header + map2d.tobytes())


def read_raw_map(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    expect_magic(data, RAW_MAP_MAGIC, str(path))
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, h, w = struct.unpack_from("<III", data, 4)
    if version != RAW_MAP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(data) != 16 + h * w * 4:
        raise FormatError(f"{path}: payload does not match header dimensions")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w).copy()


def heatmap_rgb(map2d: np.ndarray) -> np.ndarray:
    """Symmetric diverging colormap: blue (-) through white (0) to red (+).

    Values are normalized by the map's own max magnitude, so the extremes of
    each map saturate to pure red/blue and zero stays white.
    """
    map2d = np.asarray(map2d, dtype=np.float64)
    vmax = max(float(np.abs(map2d).max()), 1e-9)
    t = np.clip(map2d / vmax, -1.0, 1.0)
    rgb = np.empty(map2d.shape + (3,), dtype=np.float64)
    positive = np.clip(t, 0.0, 1.0)
    negative = np.clip(-t, 0.0, 1.0)
    rgb[..., 0] = 1.0 - negative
    rgb[..., 1] = 1.0 - positive - negative
    rgb[..., 2] = 1.0 - positive
    return np.rint(rgb * 255.0).astype(np.uint8)


def export_heatmap(map2d: np.ndarray, ppm_path, raw_path=None) -> None:
    """Write a binary PPM (P6) heatmap plus the raw float32 dump alongside.

    ``raw_path`` defaults to the PPM path with a '.wemp' suffix.
    """
    map2d = np.asarray(map2d, dtype=np.float64)
    if not np.all(np.isfinite(map2d)):
        raise ValueError("heatmap input contains non-finite values")
    ppm_path = Path(ppm_path)
    rgb = heatmap_rgb(map2d)
    h, w = map2d.shape
    ppm_path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
    if raw_path is None:
        raw_path = ppm_path.with_suffix(".wemp")
    write_raw_map(map2d, raw_path)
