"""IDX tensor files and Multi-MNIST-style image pairs.

An IDX file is a 4-byte magic ``00 00 <type> <ndim>``, then ``ndim`` big-endian
uint32 sizes, then the row-major big-endian payload.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODE_BY_KIND = {(dt.kind, dt.itemsize): code for code, dt in IDX_TYPES.items()}


@dataclass(frozen=True)
class IdxTensor:
    dims: tuple
    type_code: int
    data: np.ndarray

    def __post_init__(self):
        if int(np.prod(self.dims, dtype=np.int64)) != self.data.size:
            raise DataError(f"element count {self.data.size} does not match dims {self.dims}")

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.dims)


def parse_idx(raw: bytes) -> IdxTensor:
    if len(raw) < 4:
        raise DataError(f"short payload: {len(raw)} bytes, header needs at least 4")
    if raw[0] != 0 or raw[1] != 0:
        raise DataError(f"bad magic {raw[:4].hex()}: first two bytes must be zero")
    code, ndim = raw[2], raw[3]
    if code not in IDX_TYPES:
        raise DataError(f"unsupported type code 0x{code:02X}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"short payload: header declares {ndim} dims but file has {len(raw)} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    got = len(raw) - header
    if got < expected:
        raise DataError(f"short payload: expected {expected} bytes, found {got}")
    if got > expected:
        raise DataError(f"trailing data: expected {expected} payload bytes, found {got}")
    data = np.frombuffer(raw, dtype=dtype, count=expected // dtype.itemsize, offset=header).copy()
    return IdxTensor(tuple(dims), code, data)


def read_idx(path) -> IdxTensor:
    return parse_idx(Path(path).read_bytes())


def encode_idx(tensor_or_array, type_code: int | None = None) -> bytes:
    if isinstance(tensor_or_array, IdxTensor):
        dims, code, data = tensor_or_array.dims, tensor_or_array.type_code, tensor_or_array.data
    else:
        arr = np.asarray(tensor_or_array)
        dims = arr.shape
        code = type_code if type_code is not None else _CODE_BY_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
        if code is None:
            raise DataError(f"no IDX type for dtype {arr.dtype}")
        data = arr.reshape(-1)
    if code not in IDX_TYPES:
        raise DataError(f"unsupported type code 0x{code:02X}")
    if len(dims) > 255:
        raise DataError("IDX supports at most 255 dimensions")
    head = bytes([0, 0, code, len(dims)]) + struct.pack(f">{len(dims)}I", *dims)
    return head + np.ascontiguousarray(data, dtype=IDX_TYPES[code]).tobytes()


def write_idx(path, tensor_or_array, type_code: int | None = None) -> None:
    Path(path).write_bytes(encode_idx(tensor_or_array, type_code))


def _hash(t: IdxTensor) -> str:
    return hashlib.sha256(encode_idx(t)).hexdigest()


@dataclass(frozen=True)
class PairedImageDataset:
    """Composed images in [0, 1] and the two label sequences."""

    images: np.ndarray
    labels_task1: np.ndarray
    labels_task2: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.images.shape[0]
        if self.labels_task1.shape[0] != n or self.labels_task2.shape[0] != n:
            raise DataError("label sequences must match the number of images")

    def __len__(self):
        return self.images.shape[0]


def overlap_region(src_shape, canvas) -> tuple:
    """Row and column slices covered by both the top-left and bottom-right placements."""
    (h, w), (H, W) = src_shape, canvas
    return slice(H - h, h), slice(W - w, w)


def _as_images(t, name):
    arr = t.array if isinstance(t, IdxTensor) else np.asarray(t)
    if arr.ndim != 3:
        raise DataError(f"{name} must be N x H x W, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise DataError(f"{name} is empty")
    return arr


def compose_multitask_pairs(images_a, labels_a, images_b, labels_b, rng: np.random.Generator, n_pairs: int,
                            canvas=(36, 36)) -> PairedImageDataset:
    """Place a uniformly drawn A image top-left and a B image bottom-right on a zero canvas.

    Draws are with replacement. Overlapping pixels take the elementwise max, so
    values stay inside the sources' range. Unsigned-byte sources are scaled
    by 1/255.
    """
    if n_pairs <= 0:
        raise DataError("n_pairs must be positive")
    A = _as_images(images_a, "images_a")
    B = _as_images(images_b, "images_b")
    ya = (labels_a.array if isinstance(labels_a, IdxTensor) else np.asarray(labels_a)).reshape(-1)
    yb = (labels_b.array if isinstance(labels_b, IdxTensor) else np.asarray(labels_b)).reshape(-1)
    if ya.shape[0] != A.shape[0] or yb.shape[0] != B.shape[0]:
        raise DataError("each image source needs one label per image")
    H, W = canvas
    for name, src in (("images_a", A), ("images_b", B)):
        if src.shape[1] > H or src.shape[2] > W:
            raise DataError(f"{name} of size {src.shape[1:]} does not fit the {H}x{W} canvas")
    ia = rng.integers(0, A.shape[0], size=n_pairs)
    ib = rng.integers(0, B.shape[0], size=n_pairs)
    scale = 255.0 if A.dtype == np.uint8 and B.dtype == np.uint8 else 1.0
    out = np.zeros((n_pairs, H, W))
    ha, wa = A.shape[1:]
    hb, wb = B.shape[1:]
    out[:, :ha, :wa] = A[ia] / scale
    np.maximum(out[:, H - hb:, W - wb:], B[ib] / scale, out=out[:, H - hb:, W - wb:])
    meta = {
        "canvas": [H, W],
        "n_pairs": n_pairs,
        "overlap_policy": "elementwise_max",
        "sampling": "uniform_with_replacement",
        "normalization": f"divide_by_{scale:g}",
    }
    for key, src in (("source_a_sha256", images_a), ("source_b_sha256", images_b)):
        if isinstance(src, IdxTensor):
            meta[key] = _hash(src)
    return PairedImageDataset(out, ya[ia].astype(np.int64), yb[ib].astype(np.int64), meta)
