"""
Checkpoint Module
-----------------
Binary tensor files: model checkpoints, pretrained upsampler weights and
mask dumps share one little-endian layout.

    magic "C2F1" | version u32 | config blob (u32 length + UTF-8 text)
    | tensor count u32 | per tensor: name (u32 length + UTF-8), ndim u32,
    dims u32 x ndim, float32 data

A model checkpoint stores every parameter under its own name, the SGD
velocity as ``velocity.<name>`` and the center banks as
``centers.<head>.<class>``; its blob is the canonical run config followed
by ``state.epoch = <k>``.
"""
import logging
import re
import struct
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))
from modules.coarse2fine import ModelGraph
from modules.errors import BadMagicError, FormatError, TruncatedError
from modules.run_config import RunConfig

logger = logging.getLogger(__name__)

MAGIC = b"C2F1"
VERSION = 1
STATE_PATTERN = re.compile(r"^state\.(\w+)\s*=\s*(\d+)\s*$")


class _Reader:
    """Sequential little-endian reader that reports truncation."""

    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.source = source
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.raw):
            raise TruncatedError(f"{self.source}: unexpected end of file at byte {self.offset}")
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        length = self.u32()
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{self.source}: invalid UTF-8 text: {e}")


def _encode_text(text: str) -> bytes:
    data = text.encode("utf-8")
    return struct.pack("<I", len(data)) + data


def write_tensor_file(path, tensors: Dict[str, np.ndarray], config_text: str = "") -> None:
    """Write named arrays (stored as float32) and a config blob."""
    parts = [MAGIC, struct.pack("<I", VERSION), _encode_text(config_text), struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        array = np.ascontiguousarray(value, dtype="<f4")
        parts.append(_encode_text(name))
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def read_tensor_file(path) -> Tuple[str, Dict[str, np.ndarray]]:
    """
    Read a tensor file.

    Returns:
        (config blob, name -> float32 array in file order)

    Raises:
        FileNotFoundError: if the file doesn't exist
        BadMagicError, TruncatedError, FormatError: on malformed content
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), str(path))
    if reader.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a tensor file")
    version = reader.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    config_text = reader.text()
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.text()
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        ndim = reader.u32()
        dims = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(np.float32)
    if reader.offset != len(reader.raw):
        raise FormatError(f"{path}: {len(reader.raw) - reader.offset} trailing bytes")
    return config_text, tensors


# ============================================================================
# MODEL CHECKPOINTS
# ============================================================================

@dataclass
class LoadedCheckpoint:
    model: ModelGraph
    run_config: RunConfig


def model_tensors(model: ModelGraph) -> Dict[str, np.ndarray]:
    """Params, velocities and centers under their checkpoint names."""
    tensors = {name: p.data for name, p in model.params.items()}
    tensors.update({f"velocity.{name}": model.velocity[name] for name in model.params})
    for head, bank in model.centers.items():
        tensors.update(bank.to_named(f"centers.{head}"))
    return tensors


def save_model(model: ModelGraph, run_config: RunConfig, path) -> None:
    blob = run_config.to_text() + f"state.epoch = {model.epoch}\n"
    write_tensor_file(path, model_tensors(model), blob)
    logger.info("Saved checkpoint %s (epoch %d)", path, model.epoch)


def split_blob(blob: str) -> Tuple[str, Dict[str, int]]:
    """Separate ``state.*`` lines from the run config text."""
    state: Dict[str, int] = {}
    config_lines = []
    for line in blob.splitlines():
        match = STATE_PATTERN.match(line.strip())
        if match:
            state[match.group(1)] = int(match.group(2))
        else:
            config_lines.append(line)
    return "\n".join(config_lines), state


def load_model(path) -> LoadedCheckpoint:
    """
    Rebuild a model, its optimizer state and center banks from a checkpoint.

    Raises:
        FormatError: if a tensor is missing or has the wrong shape
    """
    blob, tensors = read_tensor_file(path)
    config_text, state = split_blob(blob)
    run_config = RunConfig.from_text(config_text, source=str(path))
    backbone = run_config.backbone_config()
    model = ModelGraph.build(backbone, run_config.train_config(), run_config.upsampler_config(backbone))

    def fetch(name: str, shape) -> np.ndarray:
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name}")
        if tensors[name].shape != tuple(shape):
            raise FormatError(f"{path}: {name} has shape {tensors[name].shape}, expected {tuple(shape)}")
        return tensors[name]

    for name, param in model.params.items():
        param.data[...] = fetch(name, param.shape)
        model.velocity[name] = fetch(f"velocity.{name}", param.shape).astype(param.data.dtype)
    for head, bank in model.centers.items():
        prefix = f"centers.{head}"
        bank.load_named(prefix, {f"{prefix}.{i}": fetch(f"{prefix}.{i}", bank.matrix_shape)
                                 for i in range(bank.num_classes)})
    model.epoch = state.get("epoch", 0)
    expected = set(model_tensors(model))
    extra = sorted(set(tensors) - expected)
    if extra:
        raise FormatError(f"{path}: unexpected tensors {extra[:5]}")
    return LoadedCheckpoint(model, run_config)


def save_upsampler(params: Dict[str, np.ndarray], run_config: RunConfig, path) -> None:
    """Standalone pretrained upsampler weights (``upsampler.*``)."""
    write_tensor_file(path, {name: np.asarray(v) for name, v in params.items()}, run_config.to_text())


def load_upsampler(path) -> Dict[str, np.ndarray]:
    _, tensors = read_tensor_file(path)
    params = {name: value for name, value in tensors.items() if name.startswith("upsampler.")}
    if not params:
        raise FormatError(f"{path}: no upsampler tensors")
    return params
