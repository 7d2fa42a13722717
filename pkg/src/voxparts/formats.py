"""Binary file formats and image helpers.

Little-endian throughout. Feature maps (`DVFT`), mask-probability dumps
(`DVMK`) and depth maps (`DVDP`) share one layout: magic, u32 dims, float32
payload. Checkpoints (`DVOL`) are length-prefixed named records.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

__all__ = [
    "write_feature_map",
    "read_feature_map",
    "write_mask_probs",
    "read_mask_probs",
    "write_depth",
    "read_depth",
    "write_records",
    "read_records",
    "save_image",
    "load_image",
    "save_label_png",
    "load_label_png",
    "label_palette",
]

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1,
                np.dtype("int64"): 2, np.dtype("uint8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _write_array_file(path, magic: bytes, arr: np.ndarray, ndims: int):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != ndims:
        raise FormatError(f"{magic.decode()} payload must be {ndims}-dimensional")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack(f"<{ndims}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_array_file(path, magic: bytes, ndims: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack(f"<{ndims}I", raw[4:header])
    expect = int(np.prod(shape)) * 4
    payload = raw[header:]
    if len(payload) != expect:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, expected {expect}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def write_feature_map(path, features: np.ndarray) -> None:
    """Feature map as magic DVFT, u32 C,H,W, float32 C-major payload."""
    _write_array_file(path, b"DVFT", features, 3)


def read_feature_map(path) -> np.ndarray:
    return _read_array_file(path, b"DVFT", 3)


def write_mask_probs(path, probs: np.ndarray) -> None:
    """Per-ray mask probabilities as magic DVMK, u32 N,H,W, float32 payload."""
    _write_array_file(path, b"DVMK", probs, 3)


def read_mask_probs(path) -> np.ndarray:
    return _read_array_file(path, b"DVMK", 3)


def write_depth(path, depth: np.ndarray) -> None:
    _write_array_file(path, b"DVDP", depth, 2)


def read_depth(path) -> np.ndarray:
    return _read_array_file(path, b"DVDP", 2)


def write_records(path, magic: bytes, version: int, records: dict[str, np.ndarray]) -> None:
    """Length-prefixed named arrays: name, dtype code, shape, payload."""
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", version))
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise FormatError(f"record '{name}' has unsupported dtype {arr.dtype}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_records(path, magic: bytes) -> tuple[int, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: file too short for a header")
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    version, count = struct.unpack("<II", raw[4:12])
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack("<I", raw[pos : pos + 4])
            pos += 4
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack("<BB", raw[pos : pos + 2])
            pos += 2
            shape = struct.unpack(f"<{ndim}Q", raw[pos : pos + 8 * ndim])
            pos += 8 * ndim
            (nbytes,) = struct.unpack("<Q", raw[pos : pos + 8])
            pos += 8
            payload = raw[pos : pos + nbytes]
            if len(payload) != nbytes:
                raise FormatError(f"{path}: record '{name}' truncated")
            pos += nbytes
            dtype = _CODE_DTYPES.get(code)
            if dtype is None:
                raise FormatError(f"{path}: record '{name}' has unknown dtype code {code}")
            out[name] = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).reshape(
                shape
            ).astype(dtype)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record table ({exc})") from exc
    return version, out


def save_image(path, img: np.ndarray) -> None:
    """Float [0,1] HxWx3 image to 8-bit PNG."""
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def label_palette() -> list[int]:
    """256-entry palette: background black, then well-separated hues."""
    pal = [0, 0, 0]
    for i in range(1, 256):
        h = (i * 0.61803398875) % 1.0
        r, g, b = _hsv_to_rgb(h, 0.85, 0.95 if i % 2 else 0.7)
        pal += [int(r * 255), int(g * 255), int(b * 255)]
    return pal


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def save_label_png(path, labels: np.ndarray) -> None:
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(label_palette())
    im.save(path)


def load_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "P":
            im = im.convert("L")
        return np.asarray(im, dtype=np.int64)
