"""
Binary container shared by model and trigger files.

Byte layout (all integers little-endian):

    offset  size  field
    0       8     magic            b"LBDMODL1" (models) / b"LBDTRIG1" (triggers)
    8       2     format version   uint16, currently 1
    10      4     header length    uint32, byte count of the JSON header
    14      L     header           UTF-8 JSON (pydantic dump): layer table / trigger metadata
                                   plus the ordered list of (name, shape) for each array
    14+L    ...   array blobs      float64 little-endian, row-major, in header order
    end-8   8     checksum         uint64, BLAKE2b-64 of every preceding byte

Readers check magic, then version, then checksum, before parsing anything.
"""
import hashlib
import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from com.mhire.app.config.errors import ArtifactIOError
from com.mhire.app.services.model_zoo.model_zoo import ModelGraph
from com.mhire.app.services.model_zoo.model_zoo_schema import ModelHeader, ParameterShape

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"LBDMODL1"
TRIGGER_MAGIC = b"LBDTRIG1"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sHI")
_CHECKSUM = struct.Struct("<Q")

H = TypeVar("H", bound=BaseModel)


def checksum64(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def write_container(path: Path, magic: bytes, header: BaseModel, arrays: List[np.ndarray]) -> None:
    header_bytes = header.model_dump_json().encode("utf-8")
    body = bytearray(_PREAMBLE.pack(magic, FORMAT_VERSION, len(header_bytes)))
    body += header_bytes
    for array in arrays:
        body += np.ascontiguousarray(array, dtype="<f8").tobytes()
    body += _CHECKSUM.pack(checksum64(bytes(body)))
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(bytes(body))
    except OSError as e:
        logger.error(f"Error writing {path}: {str(e)}")
        raise ArtifactIOError("io-error", f"cannot write {path}: {e}")


def read_container(path: Path, magic: bytes, header_type: Type[H]) -> Tuple[H, bytes]:
    """Validate a container and return its parsed header plus the raw blob region."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Error reading {path}: {str(e)}")
        raise ArtifactIOError("io-error", f"cannot read {path}: {e}")
    if len(raw) < _PREAMBLE.size + _CHECKSUM.size:
        raise ArtifactIOError("checksum-mismatch", f"{path} is truncated")
    if raw[:len(magic)] != magic:
        raise ArtifactIOError("bad-magic", f"{path} does not start with {magic!r}")
    _, version, header_len = _PREAMBLE.unpack_from(raw, 0)
    if version != FORMAT_VERSION:
        raise ArtifactIOError("version-mismatch", f"{path} has format version {version}, expected {FORMAT_VERSION}")
    (stored,) = _CHECKSUM.unpack_from(raw, len(raw) - _CHECKSUM.size)
    if stored != checksum64(raw[:-_CHECKSUM.size]):
        raise ArtifactIOError("checksum-mismatch", f"{path} failed its checksum")
    header_end = _PREAMBLE.size + header_len
    try:
        header = header_type.model_validate_json(raw[_PREAMBLE.size:header_end])
    except ValidationError as e:
        raise ArtifactIOError("corrupt-header", f"{path}: {e}")
    return header, raw[header_end:-_CHECKSUM.size]


def split_blobs(blob: bytes, shapes: List[ParameterShape]) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    offset = 0
    for entry in shapes:
        count = int(np.prod(entry.shape)) if entry.shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise ArtifactIOError("corrupt-container", f"blob for {entry.name} runs past the end of the file")
        arrays[entry.name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(entry.shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise ArtifactIOError("corrupt-container", f"{len(blob) - offset} trailing bytes after the last blob")
    return arrays


def save_model(model: ModelGraph, path: Path) -> None:
    names = model.parameter_names()
    mask_indices = sorted(model.unit_masks)
    header = ModelHeader(
        name=model.name,
        input_shape=list(model.input_shape),
        layers=model.layers,
        parameters=[ParameterShape(name=n, shape=list(model.params[n].shape)) for n in names],
        unit_masks=[ParameterShape(name=str(i), shape=list(model.unit_masks[i].shape)) for i in mask_indices],
        metadata=model.metadata,
    )
    arrays = [model.params[n] for n in names] + [model.unit_masks[i] for i in mask_indices]
    write_container(path, MODEL_MAGIC, header, arrays)
    logger.info(f"Saved model {model.name} to {path}")


def load_model(path: Path) -> ModelGraph:
    header, blob = read_container(path, MODEL_MAGIC, ModelHeader)
    arrays = split_blobs(blob, header.parameters + header.unit_masks)
    params = {p.name: arrays[p.name] for p in header.parameters}
    masks = {int(m.name): arrays[m.name] for m in header.unit_masks}
    return ModelGraph(header.name, header.input_shape, header.layers, params, masks, header.metadata)
