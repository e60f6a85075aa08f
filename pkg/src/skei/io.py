"""Raw array files and image / k-space ingestion."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import IngestError

_DTYPE = "<f4"


def write_array(path: str | Path, array) -> Path:
    """Write a one-line JSON header then little-endian float32 data in C order.

    Complex arrays are stored with interleaved real and imaginary parts; the
    header keeps the logical (complex) shape.
    """
    path = Path(path)
    arr = np.asarray(array.detach().cpu().numpy() if isinstance(array, torch.Tensor) else array)
    is_complex = np.iscomplexobj(arr)
    shape = list(arr.shape)
    if is_complex:
        arr = np.stack([arr.real, arr.imag], axis=-1)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE)
    header = json.dumps({"shape": shape, "dtype": "f4", "complex_interleaved": bool(is_complex)})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(payload.tobytes(order="C"))
    return path


def read_array(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            body = fh.read()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("utf-8"))
        shape = [int(s) for s in header["shape"]]
        interleaved = bool(header["complex_interleaved"])
        dtype = header["dtype"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"{path}: malformed array header") from exc
    if dtype != "f4":
        raise IngestError(f"{path}: unsupported dtype {dtype!r}")
    if any(s < 0 for s in shape):
        raise IngestError(f"{path}: negative dimension in header")
    count = int(np.prod(shape)) * (2 if interleaved else 1)
    if len(body) != 4 * count:
        raise IngestError(f"{path}: header shape {shape} needs {4 * count} bytes, file has {len(body)}")
    data = np.frombuffer(body, dtype=_DTYPE)
    if interleaved:
        data = data.reshape(*shape, 2)
        return (data[..., 0] + 1j * data[..., 1]).astype(np.complex64)
    return data.reshape(shape).copy()


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a 2-D array to ``size x size``."""
    t = torch.from_numpy(np.asarray(image, dtype=np.float64))[None, None]
    if tuple(t.shape[-2:]) == (size, size):
        return t[0, 0].numpy().copy()
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def ingest_image(path: str | Path, target_size: int) -> np.ndarray:
    """Load a grayscale image, scale by its bit depth to [0, 1] and resize bilinearly."""
    path = Path(path)
    if path.suffix == ".npy":
        try:
            arr = np.load(path, allow_pickle=False).astype(np.float64)
        except (OSError, ValueError) as exc:
            raise IngestError(f"cannot read {path}: {exc}") from exc
    elif path.suffix in (".f32", ".raw"):
        arr = read_array(path).astype(np.float64)
    else:
        try:
            with Image.open(path) as im:
                if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                    arr = np.asarray(im, dtype=np.float64) / 65535.0
                else:
                    arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except (OSError, UnidentifiedImageError) as exc:
            raise IngestError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise IngestError(f"{path}: expected a 2-D grayscale image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise IngestError(f"{path}: image contains non-finite values")
    return np.clip(resize_image(arr, target_size), 0.0, 1.0)


def ingest_kspace(path: str | Path) -> np.ndarray:
    """Load a complex ``(C, H, W)`` k-space stack written by :func:`write_array`."""
    arr = read_array(path)
    if not np.iscomplexobj(arr):
        raise IngestError(f"{path}: k-space must be complex (complex_interleaved=true)")
    if arr.ndim != 3:
        raise IngestError(f"{path}: k-space must be (coils, H, W), got {arr.shape}")
    return arr


def save_png(path: str | Path, image: np.ndarray) -> Path:
    """8-bit preview scaled to the image's own [min, max]."""
    arr = np.asarray(image, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)
    return Path(path)
