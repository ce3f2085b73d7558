"""Image files, padding, and the ICST (tensor archive) / ICSM (measurement) binary formats.

All binary integers and floats are little-endian.

ICST: ``b"ICST"``, u32 version, u64 manifest length, UTF-8 JSON manifest
mapping each name to ``{"shape", "dtype", "offset"}`` (offset relative to the
start of the payload area), then the f64 payloads back to back.

ICSM: ``b"ICSM"``, u32 version, header ``H, W, B`` (u32), ``sr_t`` (f64),
``n0, h, w`` (u32), then the h·w block counts ``m_ij`` (u32, raster order),
then every block's f64 measurements concatenated in raster order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .sampling import MeasurementSet, SamplingConfig

PathLike = Union[str, Path]

ICST_MAGIC = b"ICST"
ICSM_MAGIC = b"ICSM"
FORMAT_VERSION = 1
_ICSM_HEADER = struct.Struct("<4sI3IdIII")


class FormatError(IOError):
    """Malformed or truncated file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


# images ---------------------------------------------------------------------


def to_bytes(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    return np.clip(np.floor(np.asarray(img) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _pgm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header", pos)
    return buf[start:pos], pos


def decode_pgm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (P5)", 0)
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _pgm_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"bad PGM header field {tok!r}", pos) from None
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", pos)
    pos += 1  # single whitespace byte before the raster
    need = width * height
    data = buf[pos : pos + need]
    if len(data) < need:
        raise FormatError(f"PGM payload has {len(data)} of {need} bytes", pos + len(data))
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    height, width = img.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + to_bytes(img).tobytes()


def rgb_to_y(rgb: np.ndarray) -> np.ndarray:
    """8-bit RGB to 8-bit studio-swing luma (BT.601), returned as float in [0, 255]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return (65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2]) / 255.0 + 16.0


def load_image(path: PathLike) -> np.ndarray:
    """Read a P5 PGM or a PNG as a single-channel float image in [0, 1].

    Colour PNGs are reduced to their Y channel, rounded to 8 bits first.
    """
    buf = Path(path).read_bytes()
    if buf[:2] == b"P5":
        return decode_pgm(buf)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode in ("L", "I;16", "I", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            else:
                y = rgb_to_y(np.asarray(im.convert("RGB")))
                arr = np.floor(y + 0.5)
        return arr / 255.0
    raise FormatError(f"unrecognised image format in {path}", 0)


def save_pgm(path: PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))


def pad_to_multiple(img: np.ndarray, m: int = 32) -> tuple[np.ndarray, tuple[int, int]]:
    """Mirror-pad the right and bottom edges up to the next multiple of ``m``."""
    if m <= 0:
        raise ValueError("m must be positive")
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    ph, pw = -H % m, -W % m
    if ph == 0 and pw == 0:
        return img.copy(), (H, W)
    mode = "reflect" if min(H, W) > 1 else "symmetric"
    return np.pad(img, ((0, ph), (0, pw)), mode=mode), (H, W)


def crop_to_size(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    H, W = size
    return np.asarray(img)[:H, :W].copy()


# ICST -----------------------------------------------------------------------


def encode_archive(tensors: Mapping[str, np.ndarray]) -> bytes:
    manifest = {}
    payload = []
    offset = 0
    for name, arr in tensors.items():
        # asarray, not ascontiguousarray: the latter turns 0-d tensors into 1-d
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f8")
        manifest[name] = {"shape": list(arr.shape), "dtype": "f64", "offset": offset}
        payload.append(arr.tobytes())
        offset += arr.nbytes
    meta = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    head = ICST_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(meta))
    return head + meta + b"".join(payload)


def decode_archive(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != ICST_MAGIC:
        raise FormatError("missing ICST magic", 0)
    if len(buf) < 16:
        raise FormatError("truncated ICST header", len(buf))
    version, mlen = struct.unpack_from("<IQ", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported ICST version {version}", 4)
    if len(buf) < 16 + mlen:
        raise FormatError("truncated ICST manifest", len(buf))
    try:
        manifest = json.loads(buf[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad ICST manifest: {exc}", 16) from None
    base = 16 + mlen
    out = {}
    for name, entry in manifest.items():
        if entry.get("dtype") != "f64":
            raise FormatError(f"unsupported dtype {entry.get('dtype')!r} for {name}", 16)
        shape = tuple(entry["shape"])
        start = base + entry["offset"]
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if start + nbytes > len(buf):
            raise FormatError(f"payload of {name!r} runs past end of file", len(buf))
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=start).reshape(shape).astype(np.float64)
    return out


def save_archive(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_archive(tensors))


def load_archive(path: PathLike) -> dict[str, np.ndarray]:
    return decode_archive(Path(path).read_bytes())


# ICSM -----------------------------------------------------------------------


def encode_measurements(Y: MeasurementSet) -> bytes:
    H, W = Y.image_shape
    h, w = Y.grid
    cfg = Y.config
    head = _ICSM_HEADER.pack(ICSM_MAGIC, FORMAT_VERSION, H, W, cfg.B, float(cfg.sr_t), cfg.n0, h, w)
    counts = np.asarray(Y.m, dtype="<u4").reshape(-1).tobytes()
    payload = np.concatenate([np.asarray(yk, dtype="<f8") for yk in Y.y]).tobytes()
    return head + counts + payload


def decode_measurements(buf: bytes) -> MeasurementSet:
    if buf[:4] != ICSM_MAGIC:
        raise FormatError("missing ICSM magic", 0)
    if len(buf) < _ICSM_HEADER.size:
        raise FormatError("truncated ICSM header", len(buf))
    _, version, H, W, B, sr_t, n0, h, w = _ICSM_HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported ICSM version {version}", 4)
    pos = _ICSM_HEADER.size
    if len(buf) < pos + 4 * h * w:
        raise FormatError("truncated block count grid", len(buf))
    m = np.frombuffer(buf, dtype="<u4", count=h * w, offset=pos).astype(np.int64).reshape(h, w)
    pos += 4 * h * w
    need = 8 * int(m.sum())
    if len(buf) < pos + need:
        raise FormatError(f"measurement payload has {len(buf) - pos} of {need} bytes", len(buf))
    flat = np.frombuffer(buf, dtype="<f8", count=need // 8, offset=pos).astype(np.float64)
    bounds = np.cumsum(m.reshape(-1))[:-1]
    cfg = SamplingConfig(sr_t=sr_t, B=B)
    if cfg.n0 != n0:
        cfg = SamplingConfig(sr_t=sr_t, B=B, sr_init=(n0 + 0.5) / (B * B))
    return MeasurementSet(y=list(np.split(flat, bounds)), m=m, config=cfg, image_shape=(H, W))


def save_measurements(path: PathLike, Y: MeasurementSet) -> None:
    Path(path).write_bytes(encode_measurements(Y))


def load_measurements(path: PathLike) -> MeasurementSet:
    return decode_measurements(Path(path).read_bytes())
