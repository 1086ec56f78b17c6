"""File formats: PNG images, .flo flow, PFM depth, intrinsics, config, CSV.

Flow files are the classic little-endian .flo layout (magic float 202021.25,
int32 width and height, interleaved row-major float32 u and v). Components
with magnitude above 1e9 mark invalid pixels; readers preserve the stored
bits and flag the mask, writers emit the sentinel for invalid pixels.

Depth maps use grayscale PFM ("Pf", bottom-up rows, negative scale for
little-endian). Invalid pixels are stored as 0, which readers map back to
invalid. Files hold range along the pixel ray by default; ``convention="z"``
converts to and from optical-axis depth, which needs the intrinsics.
"""

from __future__ import annotations

import re
from dataclasses import fields

import cv2
import numpy as np

from .config import RunConfig, config_field_types
from .datatypes import DepthMap, FlowField, Image
from .errors import ConfigurationError, ParseError
from .geometry import CameraIntrinsics, ray_grid, range_to_zdepth, zdepth_to_range

FLO_MAGIC = 202021.25
FLO_SENTINEL = 1e10
FLO_INVALID_THRESHOLD = 1e9


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def read_image(path) -> Image:
    """Load an 8- or 16-bit PNG (or other cv2-readable raster) as RGB [0,1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ParseError("unreadable or missing image", path=str(path))
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ParseError(f"unsupported image dtype {raw.dtype}", path=str(path))
    data = raw.astype(np.float64) / scale
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    elif data.ndim == 3 and data.shape[2] == 4:
        data = data[:, :, :3][:, :, ::-1]
    elif data.ndim == 3 and data.shape[2] == 3:
        data = data[:, :, ::-1]
    else:
        raise ParseError(f"unsupported channel layout {data.shape}",
                         path=str(path))
    return Image(np.ascontiguousarray(data))


def write_image(path, image: Image, bits: int = 8):
    """Store an RGB image as an 8- or 16-bit PNG."""
    if bits == 8:
        dtype, scale = np.uint8, 255.0
    elif bits == 16:
        dtype, scale = np.uint16, 65535.0
    else:
        raise ConfigurationError(f"bit depth must be 8 or 16, got {bits}")
    data = np.rint(np.clip(image.pixels, 0.0, 1.0) * scale).astype(dtype)
    bgr = np.ascontiguousarray(data[:, :, ::-1])
    if not cv2.imwrite(str(path), bgr):
        raise OSError(f"could not write image to {path}")


# ---------------------------------------------------------------------------
# Optical flow (.flo)
# ---------------------------------------------------------------------------

def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise ParseError("flow file shorter than its 12-byte header",
                         path=str(path), offset=len(blob))
    magic = np.frombuffer(blob, dtype="<f4", count=1, offset=0)[0]
    if magic != np.float32(FLO_MAGIC):
        raise ParseError(f"bad flow magic {magic!r}", path=str(path), offset=0)
    w, h = np.frombuffer(blob, dtype="<i4", count=2, offset=4)
    if w <= 0 or h <= 0:
        raise ParseError(f"bad flow dimensions {w}x{h}", path=str(path),
                         offset=4)
    expected = 12 + 8 * int(w) * int(h)
    if len(blob) != expected:
        raise ParseError(
            f"flow payload is {len(blob)} bytes, expected {expected}",
            path=str(path), offset=min(len(blob), expected))
    data = np.frombuffer(blob, dtype="<f4", count=2 * int(w) * int(h),
                         offset=12)
    data = data.reshape(int(h), int(w), 2).astype(np.float64)
    u, v = data[:, :, 0], data[:, :, 1]
    valid = (np.isfinite(u) & np.isfinite(v)
             & (np.abs(u) < FLO_INVALID_THRESHOLD)
             & (np.abs(v) < FLO_INVALID_THRESHOLD))
    return FlowField(u, v, valid)


def write_flo(path, flow: FlowField):
    u = np.where(flow.valid, flow.u, np.where(
        np.abs(flow.u) > FLO_INVALID_THRESHOLD, flow.u, FLO_SENTINEL))
    v = np.where(flow.valid, flow.v, np.where(
        np.abs(flow.v) > FLO_INVALID_THRESHOLD, flow.v, FLO_SENTINEL))
    data = np.empty((flow.height, flow.width, 2), dtype="<f4")
    data[:, :, 0] = u
    data[:, :, 1] = v
    with open(path, "wb") as fh:
        fh.write(np.float32(FLO_MAGIC).tobytes())
        fh.write(np.array([flow.width, flow.height], dtype="<i4").tobytes())
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# Depth maps (PFM)
# ---------------------------------------------------------------------------

def _read_pfm_token(blob: bytes, offset: int, path: str):
    """Next whitespace-delimited ASCII token starting at offset."""
    while offset < len(blob) and blob[offset:offset + 1].isspace():
        offset += 1
    start = offset
    while offset < len(blob) and not blob[offset:offset + 1].isspace():
        offset += 1
    if start == offset:
        raise ParseError("truncated header", path=path, offset=start)
    return blob[start:offset], offset


def read_pfm(path, convention: str = "range",
             intrinsics: CameraIntrinsics = None) -> DepthMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    spath = str(path)
    token, offset = _read_pfm_token(blob, 0, spath)
    if token == b"PF":
        raise ParseError("color PFM is not a depth map", path=spath, offset=0)
    if token != b"Pf":
        raise ParseError(f"bad PFM magic {token!r}", path=spath, offset=0)
    wtok, offset = _read_pfm_token(blob, offset, spath)
    htok, offset = _read_pfm_token(blob, offset, spath)
    stok, offset = _read_pfm_token(blob, offset, spath)
    try:
        w, h, scale = int(wtok), int(htok), float(stok)
    except ValueError as exc:
        raise ParseError(f"bad PFM header fields {wtok!r} {htok!r} {stok!r}",
                         path=spath, offset=offset) from exc
    if w <= 0 or h <= 0:
        raise ParseError(f"bad PFM dimensions {w}x{h}", path=spath,
                         offset=offset)
    if scale == 0:
        raise ParseError("PFM scale must be nonzero", path=spath,
                         offset=offset)
    offset += 1  # single whitespace byte terminates the header
    expected = offset + 4 * w * h
    if len(blob) != expected:
        raise ParseError(
            f"PFM payload is {len(blob) - offset} bytes, expected {4 * w * h}",
            path=spath, offset=min(len(blob), expected))
    endian = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(blob, dtype=endian, count=w * h, offset=offset)
    values = data.reshape(h, w)[::-1].astype(np.float64)  # bottom-up rows
    if abs(scale) != 1.0:
        values = values * abs(scale)
    valid = np.isfinite(values) & (values > 0)
    if convention == "z":
        if intrinsics is None:
            raise ConfigurationError(
                "z-depth files need intrinsics to recover range")
        values = np.where(valid, zdepth_to_range(
            values, ray_grid(intrinsics, w, h)[..., 2]), 0.0)
    elif convention != "range":
        raise ConfigurationError(
            f"depth convention must be 'range' or 'z', got {convention!r}")
    return DepthMap(np.where(valid, values, 0.0), valid)


def write_pfm(path, depth: DepthMap, convention: str = "range",
              intrinsics: CameraIntrinsics = None):
    values = depth.values
    if convention == "z":
        if intrinsics is None:
            raise ConfigurationError(
                "z-depth files need intrinsics to project range")
        rays = ray_grid(intrinsics, depth.width, depth.height)
        values = range_to_zdepth(values, rays[..., 2])
    elif convention != "range":
        raise ConfigurationError(
            f"depth convention must be 'range' or 'z', got {convention!r}")
    out = np.where(depth.valid, values, 0.0).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{depth.width} {depth.height}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(out[::-1]).tobytes())


# ---------------------------------------------------------------------------
# Intrinsics and configuration
# ---------------------------------------------------------------------------

def read_intrinsics(path) -> CameraIntrinsics:
    """One whitespace-separated line: fx fy cx cy [skew]."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    tokens = re.split(r"\s+", text.strip())
    if len(tokens) not in (4, 5) or tokens == [""]:
        raise ParseError(
            f"expected 'fx fy cx cy [skew]', got {len(tokens)} fields",
            path=str(path))
    try:
        numbers = [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"non-numeric intrinsics field in {tokens}",
                         path=str(path)) from exc
    return CameraIntrinsics(*numbers)


def write_intrinsics(path, intrinsics: CameraIntrinsics):
    parts = [intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
             intrinsics.skew]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(repr(float(p)) for p in parts) + "\n")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(kind, raw: str):
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def read_config(path) -> RunConfig:
    """Parse ``key=value`` lines into a validated RunConfig."""
    types = config_field_types()
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        offset = 0
        for line_no, raw in enumerate(fh, start=1):
            start = offset
            offset += len(raw.encode("utf-8"))
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"line {line_no} is not key=value",
                                 path=str(path), offset=start)
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ParseError(f"unknown configuration key {key!r}",
                                 path=str(path), offset=start)
            try:
                values[key] = _parse_value(types[key], value)
            except ValueError as exc:
                raise ParseError(f"bad value for {key!r}: {value!r}",
                                 path=str(path), offset=start) from exc
    config = RunConfig(**values)
    config.validate()
    return config


def write_config(path, config: RunConfig):
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(config):
            fh.write(f"{f.name}={_format_value(getattr(config, f.name))}\n")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_csv(path, header, rows):
    """Comma-separated table; floats at full repr precision, NaN as 'nan'."""
    def cell(x):
        if isinstance(x, bool):
            return "true" if x else "false"
        if isinstance(x, (float, np.floating)):
            return repr(float(x))
        return str(x)

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(str(h) for h in header) + "\n")
        for row in rows:
            fh.write(",".join(cell(x) for x in row) + "\n")


def read_csv(path):
    """Inverse of write_csv for numeric tables: (header, float ndarray)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        raise ParseError("empty CSV", path=str(path), offset=0)
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = []
        for tok in line.split(","):
            try:
                cells.append(float(tok))
            except ValueError:
                cells.append(float("nan"))
        rows.append(cells)
    return header, np.array(rows, dtype=np.float64)
