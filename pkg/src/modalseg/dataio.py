"""Sample model, preprocessing, on-disk formats, and the synthetic dataset.

A sample is a stack of C aligned single-channel images plus an integer label
map. The synthetic generator emulates a four-channel acquisition of a nested
lesion: three concentric elliptical regions (whole / core / enhancing) whose
visibility differs per channel, so that every channel carries a distinct,
known amount of information about each label. That gives downstream training
and evaluation a ground truth with controllable contrast.

Channel order is fixed as [T1, T1c, T2, FLAIR] (indices 0..3). Label indices
are 0=background, 1=NCR/NET, 2=ED, 3=ET, with the enhancing core nested in
the tumor core nested in the whole tumor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .binary_io import FormatError, append_crc, expect_magic, split_checked

CHANNEL_NAMES = ("T1", "T1c", "T2", "FLAIR")
CLASS_NAMES = ("background", "NCR-NET", "ED", "ET")
NUM_CLASSES = 4

SAMPLE_MAGIC = b"MMSG"
SAMPLE_VERSION = 1
SAMPLE_SUFFIX = ".mms"
MANIFEST_NAME = "manifest.json"
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class ChannelMask:
    """Subset of available channels; at least one must remain."""

    available: tuple[bool, ...]

    def __post_init__(self):
        if not any(self.available):
            raise ValueError("channel mask must keep at least one channel")

    @classmethod
    def full(cls, num_channels: int) -> "ChannelMask":
        return cls((True,) * num_channels)

    @classmethod
    def drop(cls, num_channels: int, dropped: int) -> "ChannelMask":
        if not 0 <= dropped < num_channels:
            raise ValueError(f"dropped channel {dropped} out of range")
        return cls(tuple(c != dropped for c in range(num_channels)))

    @property
    def num_channels(self) -> int:
        return len(self.available)

    def indices(self) -> tuple[int, ...]:
        return tuple(c for c, keep in enumerate(self.available) if keep)

    def missing(self) -> tuple[int, ...]:
        return tuple(c for c, keep in enumerate(self.available) if not keep)


@dataclass
class MultiModalSample:
    """C aligned single-channel images plus a label map of the same size."""

    channels: np.ndarray  # (C, H, W) float32
    labels: np.ndarray  # (H, W) uint8
    sample_id: str

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.channels.ndim != 3:
            raise ValueError("channels must be a (C, H, W) array")
        if self.labels.shape != self.channels.shape[1:]:
            raise ValueError("label map shape must match the channel images")

    @property
    def num_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic generator.

    Contrast fields are additive intensity offsets over the background level,
    applied before per-channel normalization. Defaults give each region a
    contrast of at least four noise standard deviations on its designated
    indicator channel.
    """

    count: int
    height: int = 64
    width: int = 64
    noise_sigma: float = 0.05
    seed: int = 7
    background: float = -0.5
    flair_wt: float = 0.3  # whole-tumor offset on FLAIR
    t2_wt_scale: float = 0.6  # T2 repeats the FLAIR contrast at this fraction
    t1c_tc: float = 0.3  # core offset on T1c
    t1c_ec: float = 0.6  # enhancing-core offset on T1c
    t1_tc: float = 0.1  # weak core offset on T1

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.height < 32 or self.width < 32:
            raise ValueError("height and width must be at least 32")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass(frozen=True)
class RegionGeometry:
    """Axis-aligned concentric ellipses defining the three nested regions."""

    center: tuple[float, float]  # (cy, cx)
    wt_axes: tuple[float, float]  # (ay, ax) semi-axes
    tc_axes: tuple[float, float]
    ec_axes: tuple[float, float]

    def masks(self, height: int, width: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rasterize (wt, tc, ec) boolean masks by pixel-center membership."""
        yy = np.arange(height, dtype=np.float64)[:, None]
        xx = np.arange(width, dtype=np.float64)[None, :]
        cy, cx = self.center

        def ellipse(axes):
            ay, ax = axes
            return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0

        return ellipse(self.wt_axes), ellipse(self.tc_axes), ellipse(self.ec_axes)


@dataclass
class Dataset:
    """A directory of sample files plus a manifest with the train/test split."""

    root: Path
    channels: tuple[str, ...]
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        try:
            raw = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {manifest_path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict) or set(raw) != {"channels", "train", "test"}:
            raise FormatError(
                f"manifest {manifest_path}: expected exactly the keys channels/train/test"
            )
        ds = cls(
            root=root,
            channels=tuple(raw["channels"]),
            train_ids=tuple(raw["train"]),
            test_ids=tuple(raw["test"]),
        )
        overlap = set(ds.train_ids) & set(ds.test_ids)
        if overlap:
            raise FormatError(f"manifest: train/test ids overlap: {sorted(overlap)[:5]}")
        for sample_id in ds.train_ids + ds.test_ids:
            path = ds.sample_path(sample_id)
            if not path.is_file():
                raise FormatError(f"manifest entry {sample_id!r} has no file at {path}")
        return ds

    def save_manifest(self) -> None:
        manifest = {
            "channels": list(self.channels),
            "train": list(self.train_ids),
            "test": list(self.test_ids),
        }
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(manifest, indent=2) + "\n")

    def sample_path(self, sample_id: str) -> Path:
        return self.root / "samples" / f"{sample_id}{SAMPLE_SUFFIX}"

    def read(self, sample_id: str) -> MultiModalSample:
        return read_sample(self.sample_path(sample_id))


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Affine min-max map of one image onto [-1, 1]; constant maps to zeros."""
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("cannot normalize an image with non-finite values")
    lo = image.min()
    hi = image.max()
    if hi == lo:
        return np.zeros_like(image)
    return 2.0 * (image - lo) / (hi - lo) - 1.0


def normalize_channels(sample: MultiModalSample) -> MultiModalSample:
    """Normalize every channel of a sample independently onto [-1, 1]."""
    channels = np.stack([normalize_image(c) for c in sample.channels])
    return replace(sample, channels=channels.astype(np.float32))


def center_crop(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Crop the centered out_h x out_w window.

    When a margin is odd the extra row/column is left at the bottom/right.
    """
    h, w = image.shape[-2], image.shape[-1]
    if out_h > h or out_w > w:
        raise ValueError(f"crop window {out_h}x{out_w} exceeds image {h}x{w}")
    top = (h - out_h) // 2
    left = (w - out_w) // 2
    return image[..., top : top + out_h, left : left + out_w]


def write_sample(sample: MultiModalSample, path) -> None:
    """Write a sample file.

    Layout (little-endian): magic "MMSG", version byte, u32 C/H/W, C*H*W
    float32 channel values (channel-major, row-major), H*W uint8 labels, and
    a trailing CRC-64. The sample id is not stored; it is the file stem.
    """
    c, (h, w) = sample.num_channels, sample.shape
    buf = bytearray()
    buf += SAMPLE_MAGIC
    buf += bytes([SAMPLE_VERSION])
    buf += struct.pack("<III", c, h, w)
    buf += np.ascontiguousarray(sample.channels, dtype="<f4").tobytes()
    buf += np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes()
    Path(path).write_bytes(append_crc(bytes(buf)))


def read_sample(path) -> MultiModalSample:
    """Read a sample file written by ``write_sample``; id is the file stem."""
    path = Path(path)
    data = path.read_bytes()
    expect_magic(data, SAMPLE_MAGIC, str(path))
    payload = split_checked(data, str(path))
    header_len = len(SAMPLE_MAGIC) + 1 + 12
    if len(payload) < header_len:
        raise FormatError(f"{path}: truncated header")
    version = payload[len(SAMPLE_MAGIC)]
    if version != SAMPLE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    c, h, w = struct.unpack_from("<III", payload, len(SAMPLE_MAGIC) + 1)
    expected = header_len + c * h * w * 4 + h * w
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    body = payload[header_len:]
    channels = np.frombuffer(body, dtype="<f4", count=c * h * w).reshape(c, h, w)
    labels = np.frombuffer(body, dtype=np.uint8, offset=c * h * w * 4).reshape(h, w)
    return MultiModalSample(channels.copy(), labels.copy(), sample_id=path.stem)


def generate_sample(
    spec: SyntheticSpec, rng: np.random.Generator, sample_id: str
) -> tuple[MultiModalSample, RegionGeometry]:
    """Draw one synthetic sample plus the geometry it was rasterized from.

    Draw order per sample is fixed (geometry scalars, then one noise block)
    so streams regenerate identically for a given generator state.
    """
    h, w = spec.height, spec.width
    cy = (0.42 + 0.16 * rng.random()) * h
    cx = (0.42 + 0.16 * rng.random()) * w
    wt_ay = (0.22 + 0.12 * rng.random()) * h
    wt_ax = (0.22 + 0.12 * rng.random()) * w
    tc_frac = 0.50 + 0.20 * rng.random()
    ec_frac = 0.45 + 0.20 * rng.random()
    geometry = RegionGeometry(
        center=(cy, cx),
        wt_axes=(wt_ay, wt_ax),
        tc_axes=(wt_ay * tc_frac, wt_ax * tc_frac),
        ec_axes=(wt_ay * tc_frac * ec_frac, wt_ax * tc_frac * ec_frac),
    )
    wt, tc, ec = geometry.masks(h, w)

    labels = np.zeros((h, w), dtype=np.uint8)
    labels[wt] = 2  # ED fills the whole tumor ...
    labels[tc] = 1  # ... the core overwrites it ...
    labels[ec] = 3  # ... and the enhancing core overwrites that.

    bg = spec.background
    t1 = bg + spec.t1_tc * tc
    t1c = bg + spec.t1c_tc * tc + (spec.t1c_ec - spec.t1c_tc) * ec
    t2 = bg + spec.flair_wt * spec.t2_wt_scale * wt
    flair = bg + spec.flair_wt * wt
    channels = np.stack([t1, t1c, t2, flair]).astype(np.float64)
    if spec.noise_sigma > 0:
        channels += rng.normal(0.0, spec.noise_sigma, size=channels.shape)

    sample = MultiModalSample(channels, labels, sample_id=sample_id)
    return normalize_channels(sample), geometry


def generate_synthetic_dataset(spec: SyntheticSpec, out_root) -> Dataset:
    """Generate ``spec.count`` samples under ``out_root`` with an 80/20 split.

    Fully deterministic in ``spec.seed``: the stream is a PCG64 generator and
    the split is a seeded permutation, so reruns are byte-identical.
    """
    spec.validate()
    root = Path(out_root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(spec.seed))

    ids = []
    for index in range(spec.count):
        sample_id = f"s{index:04d}"
        sample, _ = generate_sample(spec, rng, sample_id)
        write_sample(sample, root / "samples" / f"{sample_id}{SAMPLE_SUFFIX}")
        ids.append(sample_id)

    order = rng.permutation(spec.count)
    n_train = int(round(spec.count * TRAIN_FRACTION))
    dataset = Dataset(
        root=root,
        channels=CHANNEL_NAMES,
        train_ids=tuple(ids[i] for i in sorted(order[:n_train])),
        test_ids=tuple(ids[i] for i in sorted(order[n_train:])),
    )
    dataset.save_manifest()
    return dataset
