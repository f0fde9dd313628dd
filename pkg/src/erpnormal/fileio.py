"""On-disk formats: 8-bit RGB, 16-bit normal PNGs, masks and PDEP depth files."""
from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np

DEPTH_MAGIC = b"PDEP"


def _write_png(path, img):
    path = Path(path)
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")


def _read_png(path, flags=cv2.IMREAD_UNCHANGED):
    img = cv2.imread(str(path), flags)
    if img is None:
        raise OSError(f"could not read image {path}")
    return img


def write_rgb8(path, rgb):
    """``rgb``: (3, H, W) floats in [0, 1]."""
    img = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    _write_png(path, np.ascontiguousarray(img.transpose(1, 2, 0)[..., ::-1]))


def read_rgb(path) -> np.ndarray:
    """Any 8/16-bit colour image as (3, H, W) float32 in [0, 1]."""
    img = _read_png(path, cv2.IMREAD_UNCHANGED)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    img = img[..., :3][..., ::-1]
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32) / scale


def encode_normal16(n) -> np.ndarray:
    return np.clip(np.rint((np.asarray(n, dtype=np.float64) + 1.0) / 2.0 * 65535.0), 0, 65535).astype(np.uint16)


def decode_normal16(enc) -> np.ndarray:
    return np.asarray(enc, dtype=np.float64) / 65535.0 * 2.0 - 1.0


def write_normal16(path, normal):
    """``normal``: (3, H, W) in [-1, 1]; stored as round((n + 1) / 2 * 65535)."""
    enc = encode_normal16(normal)
    _write_png(path, np.ascontiguousarray(enc.transpose(1, 2, 0)[..., ::-1]))


def read_normal16(path) -> np.ndarray:
    img = _read_png(path)
    if img.dtype != np.uint16 or img.ndim != 3:
        raise ValueError(f"{path} is not a 16-bit 3-channel normal map")
    return decode_normal16(img[..., ::-1].transpose(2, 0, 1))


def encode_normal_vis(n) -> np.ndarray:
    """8-bit colour visualisation, round((n + 1) / 2 * 255)."""
    return np.clip(np.rint((np.asarray(n, dtype=np.float64) + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)


def write_normal_vis(path, normal):
    enc = encode_normal_vis(normal)
    _write_png(path, np.ascontiguousarray(enc.transpose(1, 2, 0)[..., ::-1]))


def write_mask(path, mask):
    _write_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask(path) -> np.ndarray:
    img = _read_png(path, cv2.IMREAD_GRAYSCALE)
    return img > 127


def write_depth(path, depth):
    """PDEP: magic, u32 H, u32 W, then H*W little-endian float32 metres, row-major."""
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ValueError("depth must be 2-D")
    H, W = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", H, W))
        fh.write(np.ascontiguousarray(depth).tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != DEPTH_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    H, W = struct.unpack("<II", data[4:12])
    arr = np.frombuffer(data, dtype="<f4", offset=12)
    if arr.size != H * W:
        raise ValueError(f"{path}: expected {H * W} floats, found {arr.size}")
    return arr.reshape(H, W).astype(np.float64)
