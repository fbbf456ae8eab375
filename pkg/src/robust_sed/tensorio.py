"""Binary tensor files, model checkpoints and WAV input/output."""

from __future__ import annotations

import io
import json
import os
import struct
import zipfile

import numpy as np
from scipy.io import wavfile

from .frontend import Waveform
from .network.model import DetectorParams, Formulation, Geometry

MAGIC = b"BVTF"
TENSOR_VERSION = 1
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Raised for files that are not valid tensors or checkpoints."""


# -- BVTF tensors ----------------------------------------------------------------

def encode_tensor(array, axes=None, metadata=None) -> bytes:
    a = np.asarray(array, dtype="<f4")
    # ascontiguousarray would promote a 0-d array to 1-d
    a = np.ascontiguousarray(a).reshape(a.shape)
    header = {
        "dtype": "f32",
        "version": TENSOR_VERSION,
        "shape": list(a.shape),
        "axes": list(axes) if axes is not None else [f"dim{i}" for i in range(a.ndim)],
        "metadata": metadata or {},
    }
    if len(header["axes"]) != a.ndim:
        raise ValueError(f"{len(header['axes'])} axis names for a {a.ndim}-D tensor")
    h = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(h)) + h + a.tobytes()


def decode_tensor(blob: bytes):
    """Returns ``(array, header)``; any structural defect raises ``FormatError``."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("unsupported format: bad magic")
    (n,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + n:
        raise FormatError("unsupported format: truncated header")
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unsupported format: unreadable header ({e})") from None
    if header.get("dtype") != "f32" or header.get("version", TENSOR_VERSION) != TENSOR_VERSION:
        raise FormatError(
            f"unsupported format: dtype {header.get('dtype')!r}, version {header.get('version')!r}"
        )
    shape = tuple(int(s) for s in header.get("shape", ()))
    payload = blob[8 + n :]
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise FormatError(
            f"unsupported format: payload has {len(payload)} bytes, shape needs {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return arr, header


def write_tensor(path, array, axes=None, metadata=None) -> None:
    blob = encode_tensor(array, axes, metadata)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def read_tensor(path):
    with open(path, "rb") as f:
        return decode_tensor(f.read())


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, params: DetectorParams, frontend: dict | None = None,
                    extra: dict | None = None) -> None:
    """Uncompressed ZIP: ``manifest.json`` plus one BVTF member per tensor.

    Tensors are stored as float32.
    """
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "formulation": params.formulation.value,
        "geometry": params.geometry.to_dict(),
        "frontend": frontend or {},
        "meta": params.meta,
        "tensors": sorted(params.tensors),
    }
    if extra:
        manifest.update(extra)
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as z:
        z.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(params.tensors):
            z.writestr(f"tensors/{name}.bvtf", encode_tensor(params.tensors[name]))
    os.replace(tmp, path)


def load_checkpoint(path, dtype=np.float32):
    """Returns ``(params, manifest)``."""
    try:
        z = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as e:
        raise FormatError(f"unsupported format: {path} is not a checkpoint ({e})") from None
    with z:
        try:
            manifest = json.loads(z.read("manifest.json"))
        except KeyError:
            raise FormatError("unsupported format: checkpoint has no manifest") from None
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise FormatError(
                f"unsupported format: checkpoint version {manifest.get('format_version')!r}"
            )
        tensors = {}
        for name in manifest["tensors"]:
            try:
                arr, _ = decode_tensor(z.read(f"tensors/{name}.bvtf"))
            except KeyError:
                raise FormatError(f"unsupported format: missing tensor {name}") from None
            tensors[name] = arr.astype(dtype)
    params = DetectorParams(
        Formulation.parse(manifest["formulation"]),
        Geometry.from_dict(manifest["geometry"]),
        tensors,
        dict(manifest.get("meta", {})),
    )
    params.validate()
    return params, manifest


# -- WAV ---------------------------------------------------------------------------

def read_wav(path, expected_rate: int | None = None) -> Waveform:
    """Mono WAV as floats in [-1, 1): integer PCM is divided by its full scale."""
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 2**15
    elif data.dtype == np.int32:
        # 24-bit files are left-justified into int32 by the reader
        x = data.astype(np.float64) / 2**31
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128) / 128
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample type {data.dtype}")
    if expected_rate is not None and sr != expected_rate:
        raise ValueError(f"{path}: sample rate mismatch: {sr} Hz, expected {expected_rate} Hz")
    return Waveform(x, sr)


def write_wav(path, w: Waveform) -> None:
    wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))


def wav_bytes(w: Waveform) -> bytes:
    buf = io.BytesIO()
    wavfile.write(buf, w.sample_rate, w.samples.astype(np.float32))
    return buf.getvalue()
