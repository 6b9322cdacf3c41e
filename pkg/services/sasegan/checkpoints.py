"""
Checkpoint container for generator/discriminator parameters and optimizer state.

File layout:
    8 bytes   magic b"SASEGCKP"
    4 bytes   manifest length N, unsigned little-endian
    N bytes   UTF-8 JSON manifest (CheckpointManifest, sorted keys)
    payload   named arrays as raw little-endian float64, in manifest order
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import structlog
from pydantic import ValidationError

from errors import ConfigMismatch, CorruptFile, IoFailure, VersionMismatch
from models import ArrayEntry, CheckpointManifest, ModelConfig, TrainConfig

logger = structlog.get_logger()

MAGIC = b"SASEGCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<I")
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    """Everything needed to resume training or run inference."""
    model_config: ModelConfig
    step: int = 0
    train_config: Optional[TrainConfig] = None
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    def section(self, prefix: str) -> Dict[str, np.ndarray]:
        """Arrays under `prefix.`, with the prefix stripped."""
        head = prefix + "."
        return {name[len(head):]: arr for name, arr in self.arrays.items() if name.startswith(head)}


def pack_networks(gen, disc, g_optim=None, d_optim=None) -> Dict[str, np.ndarray]:
    """Flatten both networks (and optimizer accumulators) into named arrays."""
    arrays: Dict[str, np.ndarray] = {}
    for tag, net, optim in (("G", gen, g_optim), ("D", disc, d_optim)):
        arrays.update({f"{tag}.param.{k}": v.copy() for k, v in net.params.items()})
        arrays.update({f"{tag}.state.{k}": np.array(v) for k, v in net.state_arrays().items()})
        if optim is not None:
            arrays.update({f"{tag}.optim.{k}": v.copy() for k, v in optim.acc.items()})
    return arrays


def unpack_networks(ckpt: Checkpoint, gen, disc) -> None:
    """Copy checkpoint arrays into freshly built networks of the same config."""
    for tag, net in (("G", gen), ("D", disc)):
        params = ckpt.section(f"{tag}.param")
        missing = sorted(set(net.params) ^ set(params))
        if missing:
            raise ConfigMismatch(f"{tag} parameters differ from checkpoint: {missing[:5]}")
        for name, arr in params.items():
            if arr.shape != net.params[name].shape:
                raise ConfigMismatch(f"{tag}.{name}: shape {arr.shape} vs {net.params[name].shape}")
            net.params[name] = arr.copy()
        net.load_state_arrays(ckpt.section(f"{tag}.state"))


def _encode(ckpt: Checkpoint) -> bytes:
    entries: List[ArrayEntry] = []
    chunks: List[bytes] = []
    offset = 0
    for name in sorted(ckpt.arrays):
        data = np.ascontiguousarray(ckpt.arrays[name], dtype=_DTYPE).tobytes()
        entries.append(ArrayEntry(name=name, shape=list(np.shape(ckpt.arrays[name])), offset=offset))
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)

    manifest = CheckpointManifest(
        format_version=FORMAT_VERSION,
        created={"writer": "sasegan", "dtype": "<f8"},
        network_config=ckpt.model_config,
        train_config=ckpt.train_config,
        step=ckpt.step,
        arrays=entries,
        payload_bytes=len(payload),
        payload_sha256=hashlib.sha256(payload).hexdigest(),
    )
    header = json.dumps(manifest.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    return MAGIC + _HEADER.pack(len(header)) + header + payload


def _decode(blob: bytes, source: str) -> Tuple[CheckpointManifest, Dict[str, np.ndarray]]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{source}: not a checkpoint (bad magic)")
    start = len(MAGIC) + _HEADER.size
    if len(blob) < start:
        raise CorruptFile(f"{source}: truncated header")
    (header_len,) = _HEADER.unpack(blob[len(MAGIC):start])

    try:
        raw = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"{source}: unreadable manifest: {e}") from e
    version = raw.get("format_version") if isinstance(raw, dict) else None
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    try:
        manifest = CheckpointManifest.model_validate(raw)
    except ValidationError as e:
        raise CorruptFile(f"{source}: invalid manifest: {e}") from e

    payload = blob[start + header_len:]
    if len(payload) != manifest.payload_bytes:
        raise CorruptFile(f"{source}: payload is {len(payload)} bytes, manifest says {manifest.payload_bytes}")
    if hashlib.sha256(payload).hexdigest() != manifest.payload_sha256:
        raise CorruptFile(f"{source}: payload checksum mismatch")

    arrays = {}
    for entry in manifest.arrays:
        count = int(np.prod(entry.shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=entry.offset)
        arrays[entry.name] = arr.reshape(entry.shape).astype(np.float64)
    return manifest, arrays


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    """Write a checkpoint; identical inputs give identical bytes."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(_encode(ckpt))
    except OSError as e:
        logger.error("checkpoint_save_failed", path=str(path), error=str(e))
        raise IoFailure(f"{path}: {e}") from e
    logger.info("checkpoint_saved", path=str(path), step=ckpt.step, arrays=len(ckpt.arrays))
    return path


def load_checkpoint(path: Union[str, Path], model_config: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Read a checkpoint.

    Args:
        path: checkpoint file
        model_config: when given, the stored network config must equal it

    Raises:
        CorruptFile: bad magic, truncated data or checksum mismatch
        VersionMismatch: unknown format version
        ConfigMismatch: stored config differs from `model_config`
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        logger.error("checkpoint_read_failed", path=str(path), error=str(e))
        raise IoFailure(f"{path}: {e}") from e

    try:
        manifest, arrays = _decode(blob, str(path))
    except (CorruptFile, VersionMismatch) as e:
        logger.error("checkpoint_rejected", path=str(path), error=str(e))
        raise

    if model_config is not None and manifest.network_config != model_config:
        logger.error("checkpoint_config_mismatch", path=str(path))
        raise ConfigMismatch(
            f"{path}: checkpoint was built for {manifest.network_config.model_dump()}, "
            f"requested {model_config.model_dump()}"
        )
    return Checkpoint(
        model_config=manifest.network_config,
        step=manifest.step,
        train_config=manifest.train_config,
        arrays=arrays,
    )


class CheckpointStore:
    """Rolling directory of `step_XXXXXXXX.ckpt` files."""

    def __init__(self, directory: Union[str, Path], keep: int = 5):
        self.directory = Path(directory)
        self.keep = keep

    def path_for(self, step: int) -> Path:
        return self.directory / f"step_{step:08d}.ckpt"

    def save(self, ckpt: Checkpoint) -> Path:
        path = save_checkpoint(self.path_for(ckpt.step), ckpt)
        self.prune()
        return path

    def prune(self) -> List[Path]:
        """Delete all but the `keep` most recent checkpoints."""
        stale = latest_checkpoints(self.directory, n=None)[:-self.keep]
        for path in stale:
            path.unlink()
            logger.debug("checkpoint_pruned", path=str(path))
        return stale


def latest_checkpoints(directory: Union[str, Path], n: Optional[int] = 5) -> List[Path]:
    """The n most recent checkpoints in step order, oldest first."""
    paths = sorted(Path(directory).glob("step_*.ckpt"))
    return paths if n is None else paths[-n:]
