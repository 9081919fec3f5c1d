"""Checkpoint container for model, discriminator, optimizer, and RNG state.

Layout (little-endian): magic "MMCK", version byte, u32 length-prefixed JSON
header, a flat float payload holding every tensor in the header's declared
order, and a trailing CRC-64. The header records the model configuration,
payload dtype, the canonical tensor list (section, name, shape), the step
counter, Adam step counts, and the PCG64 generator state, so a training run
can resume bit-exactly. Model-only checkpoints simply omit the training
sections.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .binary_io import FormatError, append_crc, expect_magic, split_checked
from .losses import Discriminator
from .model import ChannelSeparateUNet, ModelConfig

CHECKPOINT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}


class AdamState:
    """Adaptive-moment optimizer state for one parameter list.

    Update rule with bias correction: m and v track the first and second
    gradient moments with decay (beta1, beta2); parameters move by
    -lr * m_hat / (sqrt(v_hat) + eps).
    """

    def __init__(self, params):
        params = list(params)
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        self.t += 1
        bc1 = 1.0 - beta1**self.t
        bc2 = 1.0 - beta2**self.t
        with torch.no_grad():
            for p, m, v in zip(params, self.m, self.v):
                if p.grad is None:
                    continue
                m.mul_(beta1).add_(p.grad, alpha=1.0 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1.0 - beta2)
                p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(eps), value=-lr)


@dataclass
class TrainState:
    """Everything that evolves during training."""

    net: ChannelSeparateUNet
    disc: Discriminator
    opt_net: AdamState
    opt_disc: AdamState
    step: int
    rng: np.random.Generator


def _dtype_name(dtype: torch.dtype) -> str:
    for name, (tdt, _) in _DTYPES.items():
        if tdt == dtype:
            return name
    raise ValueError(f"unsupported checkpoint dtype {dtype}")


def _tensor_entries(state: Optional[TrainState], net: ChannelSeparateUNet):
    entries = [("model", name, p) for name, p in net.named_parameters()]
    if state is not None:
        entries += [("disc", name, p) for name, p in state.disc.named_parameters()]
        for section, opt in (("opt_net", state.opt_net), ("opt_disc", state.opt_disc)):
            names = [name for name, _ in _owner(section, state).named_parameters()]
            entries += [(f"{section}.m", n, t) for n, t in zip(names, opt.m)]
            entries += [(f"{section}.v", n, t) for n, t in zip(names, opt.v)]
    return entries


def _owner(section: str, state: TrainState):
    return state.net if section == "opt_net" else state.disc


def _write(path, net: ChannelSeparateUNet, state: Optional[TrainState]) -> None:
    dtype = net.dtype
    entries = _tensor_entries(state, net)
    header = {
        "model_config": net.config.to_dict(),
        "dtype": _dtype_name(dtype),
        "tensors": [[sec, name, list(t.shape)] for sec, name, t in entries],
    }
    if state is not None:
        header["step"] = state.step
        header["adam_t"] = {"net": state.opt_net.t, "disc": state.opt_disc.t}
        header["rng"] = state.rng.bit_generator.state
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    np_dtype = _DTYPES[header["dtype"]][1]
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += bytes([CHECKPOINT_VERSION])
    buf += struct.pack("<I", len(header_bytes))
    buf += header_bytes
    for _, _, tensor in entries:
        buf += tensor.detach().cpu().numpy().astype(np_dtype, copy=False).tobytes()
    Path(path).write_bytes(append_crc(bytes(buf)))


def save_model(net: ChannelSeparateUNet, path) -> None:
    """Write a model-only checkpoint (no training sections)."""
    _write(path, net, None)


def save_checkpoint(state: TrainState, path) -> None:
    """Write a full training checkpoint that resumes bit-exactly."""
    _write(path, state.net, state)


def _parse(path):
    data = Path(path).read_bytes()
    expect_magic(data, CHECKPOINT_MAGIC, str(path))
    payload = split_checked(data, str(path))
    version = payload[4]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", payload, 5)
    start = 9 + header_len
    if len(payload) < start:
        raise FormatError(f"{path}: truncated header")
    header = json.loads(payload[9:start].decode())
    return header, payload[start:]


def _read_tensors(header, body, path):
    torch_dtype, np_dtype = _DTYPES[header["dtype"]]
    itemsize = np.dtype(np_dtype).itemsize
    offset = 0
    tensors = {}
    for section, name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * itemsize
        if end > len(body):
            raise FormatError(f"{path}: payload shorter than header implies")
        array = np.frombuffer(body, dtype=np_dtype, count=count, offset=offset)
        tensors[(section, name)] = torch.from_numpy(array.copy().reshape(shape))
        offset = end
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} trailing payload bytes")
    return torch_dtype, tensors


def _restore_module(module, tensors, section, path):
    for name, param in module.named_parameters():
        key = (section, name)
        if key not in tensors:
            raise FormatError(f"{path}: missing tensor {section}/{name}")
        if tuple(tensors[key].shape) != tuple(param.shape):
            raise FormatError(f"{path}: shape mismatch for {section}/{name}")
        with torch.no_grad():
            param.copy_(tensors[key])


def load_model(path) -> ChannelSeparateUNet:
    """Load the model from any checkpoint, full or model-only."""
    header, body = _parse(path)
    config = ModelConfig.from_dict(header["model_config"])
    torch_dtype, tensors = _read_tensors(header, body, path)
    net = ChannelSeparateUNet(config).to(torch_dtype)
    _restore_module(net, tensors, "model", path)
    return net


def load_checkpoint(path) -> TrainState:
    """Load a full training checkpoint written by ``save_checkpoint``."""
    header, body = _parse(path)
    if "rng" not in header:
        raise FormatError(f"{path}: not a training checkpoint (no RNG section)")
    config = ModelConfig.from_dict(header["model_config"])
    torch_dtype, tensors = _read_tensors(header, body, path)

    net = ChannelSeparateUNet(config).to(torch_dtype)
    disc = Discriminator(config.bottleneck_width).to(torch_dtype)
    _restore_module(net, tensors, "model", path)
    _restore_module(disc, tensors, "disc", path)

    opt_net = AdamState(net.parameters())
    opt_disc = AdamState(disc.parameters())
    for opt, module, section in (
        (opt_net, net, "opt_net"),
        (opt_disc, disc, "opt_disc"),
    ):
        names = [name for name, _ in module.named_parameters()]
        for kind, buffers in (("m", opt.m), ("v", opt.v)):
            for name, buffer in zip(names, buffers):
                key = (f"{section}.{kind}", name)
                if key not in tensors:
                    raise FormatError(f"{path}: missing tensor {key[0]}/{name}")
                buffer.copy_(tensors[key])
    opt_net.t = header["adam_t"]["net"]
    opt_disc.t = header["adam_t"]["disc"]

    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = header["rng"]
    return TrainState(net, disc, opt_net, opt_disc, header["step"], rng)
