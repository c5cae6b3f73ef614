"""
checkpoint.py: Versioned binary model checkpoints

Layout (little-endian) is documented in docs/design/ARCHITECTURE.md:

    magic "BIFLCKPT" | u16 version | u16 layer_count | u32 rng_len | rng JSON
    per layer:
        u16 spec_len | LayerSpec JSON | u8 payload
        payload 1 (dense/conv2d): u8 binarized | u8 has_aux | u32 n
                                  | f32[n] W̄ (if has_aux) | ceil(n/8) bytes W^b | f32 ϑ
        payload 2 (batchnorm):    u32 n | f32[n] gamma | beta | running_mean | running_var

W^b is packed one bit per weight (1 = +1, 0 = −1, MSB first).
Optimizer moments are not stored; a loaded model restarts them.

Version: 1.0.0
Last Updated: 2026-10-19
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np

from binary_net import BatchNorm, BinaryLayer, LayerSpec, Model, build_layer
from errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"BIFLCKPT"
FORMAT_VERSION = 1
PAYLOAD_NONE = 0
PAYLOAD_WEIGHTS = 1
PAYLOAD_BATCHNORM = 2


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (need {n} more)")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64)


def _f32(values) -> bytes:
    return np.asarray(values, dtype="<f4").tobytes()


def save_checkpoint(path, model: Model) -> None:
    rng_state = json.dumps(model.rng.bit_generator.state, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<HHI", FORMAT_VERSION, len(model.layers), len(rng_state)), rng_state]
    for layer in model.layers:
        spec = layer.spec.model_dump_json().encode()
        out.append(struct.pack("<H", len(spec)) + spec)
        if isinstance(layer, BinaryLayer):
            n = layer.w_bin.size
            has_aux = layer.w_aux is not None
            out.append(struct.pack("<BBBI", PAYLOAD_WEIGHTS, int(layer.binarized), int(has_aux), n))
            if has_aux:
                out.append(_f32(layer.w_aux.ravel()))
            out.append(np.packbits(layer.w_bin.ravel() > 0).tobytes())
            out.append(_f32([layer.amplitude]))
        elif isinstance(layer, BatchNorm):
            n = layer.gamma.size
            out.append(struct.pack("<BI", PAYLOAD_BATCHNORM, n))
            for arr in (layer.gamma, layer.beta, layer.running_mean, layer.running_var):
                out.append(_f32(arr))
        else:
            out.append(struct.pack("<B", PAYLOAD_NONE))
    Path(path).write_bytes(b"".join(out))
    logger.info(f"checkpoint written to {path}")


def load_checkpoint(path) -> Model:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, layer_count, rng_len = r.unpack("HHI")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = json.loads(r.take(rng_len))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable RNG state: {exc}") from exc

    layers = []
    for _ in range(layer_count):
        (spec_len,) = r.unpack("H")
        try:
            spec = LayerSpec.model_validate_json(r.take(spec_len))
        except ValueError as exc:
            raise CheckpointError(f"{path}: bad layer spec: {exc}") from exc
        layer = build_layer(spec, np.random.default_rng(0))
        (payload,) = r.unpack("B")
        if payload == PAYLOAD_WEIGHTS:
            binarized, has_aux, n = r.unpack("BBI")
            if n != layer.w_bin.size:
                raise CheckpointError(f"{path}: {spec.kind} expects {layer.w_bin.size} weights, got {n}")
            shape = layer.w_bin.shape
            layer.w_aux = r.floats(n).reshape(shape) if has_aux else None
            bits = np.unpackbits(np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8))[:n]
            layer.w_bin = np.where(bits == 1, 1.0, -1.0).reshape(shape)
            layer.amplitude = float(r.floats(1)[0])
            layer.binarized = bool(binarized)
        elif payload == PAYLOAD_BATCHNORM:
            (n,) = r.unpack("I")
            layer.gamma, layer.beta, layer.running_mean, layer.running_var = (
                r.floats(n) for _ in range(4))
        elif payload != PAYLOAD_NONE:
            raise CheckpointError(f"{path}: unknown payload tag {payload}")
        layers.append(layer)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return Model(layers, rng=rng)
