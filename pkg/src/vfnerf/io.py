"""File formats: binary PPM images, raw float depth maps, ASCII PLY clouds, YAML with line numbers."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import yaml

DEPTH_MAGIC = b"VFDEPTH\x00"
_DEPTH_HEADER = struct.Struct("<8sII")  # magic, width, height: 16 bytes


class FormatError(ValueError):
    pass


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    """8-bit binary P6 from an (H, W, 3) float image in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"expected (H, W, 3) image, got {rgb.shape}")
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + to_uint8(rgb).tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    atomic_write(path, encode_ppm(rgb))


def read_ppm(path) -> np.ndarray:
    """(H, W, 3) float image in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


# --------------------------------------------------------------------------
# depth maps
# --------------------------------------------------------------------------


def encode_depth(depth: np.ndarray) -> bytes:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise FormatError(f"expected (H, W) depth map, got {depth.shape}")
    h, w = depth.shape
    return _DEPTH_HEADER.pack(DEPTH_MAGIC, w, h) + depth.astype("<f4").tobytes()


def write_depth(path, depth: np.ndarray) -> None:
    atomic_write(path, encode_depth(depth))


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _DEPTH_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, w, h = _DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad depth magic")
    body = np.frombuffer(data, dtype="<f4", offset=_DEPTH_HEADER.size)
    if body.size != w * h:
        raise FormatError(f"{path}: expected {w * h} values, found {body.size}")
    return body.reshape(h, w).astype(np.float64)


# --------------------------------------------------------------------------
# point clouds
# --------------------------------------------------------------------------


def write_ply(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise FormatError("point cloud contains non-finite coordinates")
    header = f"ply\nformat ascii 1.0\nelement vertex {len(points)}\nproperty double x\nproperty double y\nproperty double z\nend_header\n"
    body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in points.tolist())
    atomic_write(path, (header + body).encode())


def read_ply(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    count = None
    end = None
    for k, line in enumerate(lines):
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"] or parts[:2] == ["format", "binary_big_endian"]:
            raise FormatError(f"{path}: only ASCII PLY supported")
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        if line.strip() == "end_header":
            end = k
            break
    if count is None or end is None:
        raise FormatError(f"{path}: missing vertex element or end_header")
    rows = lines[end + 1 : end + 1 + count]
    if len(rows) != count:
        raise FormatError(f"{path}: expected {count} vertices, found {len(rows)}")
    if count == 0:
        return np.zeros((0, 3))
    return np.array([[float(v) for v in r.split()[:3]] for r in rows], dtype=np.float64)


# --------------------------------------------------------------------------
# YAML with source lines
# --------------------------------------------------------------------------


class LinedDict(dict):
    """Mapping that remembers the source line of the mapping itself and of each key."""

    line: int = 0
    key_lines: dict

    def line_of(self, key) -> int:
        return self.key_lines.get(key, self.line)


class LinedList(list):
    line: int = 0
    item_lines: list


def _convert(node):
    if isinstance(node, yaml.MappingNode):
        out = LinedDict()
        out.line = node.start_mark.line + 1
        out.key_lines = {}
        for k, v in node.value:
            key = _scalar(k)
            out[key] = _convert(v)
            out.key_lines[key] = k.start_mark.line + 1
        return out
    if isinstance(node, yaml.SequenceNode):
        out = LinedList(_convert(v) for v in node.value)
        out.line = node.start_mark.line + 1
        out.item_lines = [v.start_mark.line + 1 for v in node.value]
        return out
    return _scalar(node)


def _scalar(node):
    return yaml.SafeLoader("").construct_object(node, deep=True)


def load_yaml(text: str):
    """Parse YAML keeping line numbers on mappings (``LinedDict``) and sequences (``LinedList``)."""
    node = yaml.compose(text, Loader=yaml.SafeLoader)
    if node is None:
        return LinedDict()
    return _convert(node)
