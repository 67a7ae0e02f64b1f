"""Self-describing binary tensor files, bundles, and PNG export.

File layout (all integers little-endian):

    offset  size  field
    0       4     magic b"MSHT"
    4       2     format version (currently 1)
    6       2     endianness marker 0x1234 (reader rejects other values)
    8       1     dtype code: 0=f32, 1=f64, 2=c64, 3=c128
    9       1     rank
    10      8*r   shape, one u64 per axis
    ...           payload, row-major raw samples, little-endian

Round trips are bit-exact for every supported dtype.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "TensorFileError",
    "write_tensor",
    "read_tensor",
    "write_bundle",
    "read_bundle",
    "write_png",
    "read_png",
]

_MAGIC = b"MSHT"
_VERSION = 1
_ENDIAN_MARK = 0x1234

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<c8"): 2,
    np.dtype("<c16"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class TensorFileError(IOError):
    """Malformed tensor file or unsupported payload."""


def write_tensor(path, tensor: np.ndarray) -> None:
    """Write a tensor of dtype f32/f64/c64/c128 to a self-describing file."""
    tensor = np.ascontiguousarray(tensor)
    dtype = tensor.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise TensorFileError(f"unsupported dtype {tensor.dtype}; use f32, f64, c64 or c128")
    header = _MAGIC + struct.pack("<HHBB", _VERSION, _ENDIAN_MARK, _DTYPE_CODES[dtype], tensor.ndim)
    header += struct.pack(f"<{tensor.ndim}Q", *tensor.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(tensor.astype(dtype, copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:4] != _MAGIC:
        raise TensorFileError(f"{path}: not a tensor file (bad magic)")
    version, endian, code, rank = struct.unpack("<HHBB", raw[4:10])
    if version != _VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    if endian != _ENDIAN_MARK:
        raise TensorFileError(f"{path}: endianness marker mismatch")
    if code not in _CODE_DTYPES:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    offset = 10 + 8 * rank
    if len(raw) < offset:
        raise TensorFileError(f"{path}: truncated header")
    shape = struct.unpack(f"<{rank}Q", raw[10:offset])
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise TensorFileError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_bundle(directory, arrays: dict, metadata: dict | None = None) -> None:
    """Write named tensors plus a JSON manifest into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"arrays": {}, "metadata": metadata or {}}
    for name, arr in arrays.items():
        fname = f"{name}.tnsr"
        write_tensor(directory / fname, np.asarray(arr))
        manifest["arrays"][name] = fname
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_bundle(directory) -> tuple[dict, dict]:
    """Read a bundle directory back into ({name: array}, metadata)."""
    directory = Path(directory)
    try:
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise TensorFileError(f"{directory}: missing manifest.json") from exc
    arrays = {name: read_tensor(directory / fname) for name, fname in manifest["arrays"].items()}
    return arrays, manifest.get("metadata", {})


def write_png(path, image: np.ndarray, bit_depth: int = 16) -> None:
    """Export an image with values in [0, 1] as a linear-scaled gray PNG.

    Quantization is round-half-up: q = floor(v * (2^bits - 1) + 0.5).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise TensorFileError(f"PNG export needs a 2D image, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise TensorFileError("PNG export expects finite values in [0, 1]; normalize first")
    if bit_depth == 8:
        q = np.floor(image * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(q, mode="L").save(path)
    elif bit_depth == 16:
        q = np.floor(image * 65535.0 + 0.5).astype(np.uint32).astype(np.int32)
        Image.fromarray(q, mode="I").convert("I;16").save(path)
    else:
        raise TensorFileError(f"bit_depth must be 8 or 16, got {bit_depth}")


def read_png(path) -> np.ndarray:
    """Read a gray PNG back to floats in [0, 1]."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / 65535.0
