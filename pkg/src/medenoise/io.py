"""Binary file formats and the flat ``key=value`` config format.

All multi-byte fields are little-endian.

MVOL1 volume::

    b"MVOL1" | u32 dtype code (1 = float32) | u64 nx | u64 ny | u64 nz | f64 intensity_max | body

The body is ``nx * ny * nz`` float32 values with x varying fastest.

DICT1 dictionary::

    b"DICT1" | u64 m | u64 k | m * k float64, column-major

RNET1 network::

    b"RNET1" | u64 depth | u64 filters | u64 kx | u64 ky | u64 kz | u64 skip_period | float64 values

Parameters come first, then buffers, each in layer order.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Union

import numpy as np

from .core import DenoiseConfig, DenoiseError, ImageVolume, Modality
from .dictionary import Dictionary
from .resnet import NetParams, NetSpec

PathLike = Union[str, Path]

VOLUME_MAGIC = b"MVOL1"
DICT_MAGIC = b"DICT1"
NET_MAGIC = b"RNET1"
DTYPE_F32 = 1
_VOL_HEADER = struct.Struct("<5sIQQQd")


class FormatError(DenoiseError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedBody(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class ConfigSyntaxError(FormatError):
    pass


# --- volumes -------------------------------------------------------------------------------

def volume_bytes(vol: ImageVolume) -> bytes:
    nx, ny, nz = vol.shape
    head = _VOL_HEADER.pack(VOLUME_MAGIC, DTYPE_F32, nx, ny, nz, float(vol.intensity_max))
    body = vol.data.astype("<f4").tobytes(order="F")
    return head + body


def volume_from_bytes(buf: bytes, modality: Modality = Modality.SYNTHETIC) -> ImageVolume:
    if buf[:5] != VOLUME_MAGIC:
        raise BadMagic(f"expected {VOLUME_MAGIC!r}, got {buf[:5]!r}")
    if len(buf) < _VOL_HEADER.size:
        raise TruncatedBody(f"header needs {_VOL_HEADER.size} bytes, got {len(buf)}")
    _, dtype, nx, ny, nz, imax = _VOL_HEADER.unpack_from(buf)
    if dtype != DTYPE_F32:
        raise UnsupportedDtype(f"dtype code {dtype} (only {DTYPE_F32} = float32 is supported)")
    n = nx * ny * nz
    body = buf[_VOL_HEADER.size:]
    if len(body) != 4 * n:
        raise TruncatedBody(f"body has {len(body)} bytes, expected {4 * n}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape((nx, ny, nz), order="F")
    return ImageVolume(data, imax, modality)


def write_volume(path: PathLike, vol: ImageVolume) -> None:
    Path(path).write_bytes(volume_bytes(vol))


def read_volume(path: PathLike) -> ImageVolume:
    """Read an MVOL1 file, or a binary PGM (``P5``) as a 2D volume."""
    buf = Path(path).read_bytes()
    if buf[:2] == b"P5":
        return pgm_from_bytes(buf)
    return volume_from_bytes(buf)


# --- PGM -----------------------------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int):
    """First ``count`` header tokens plus the offset just past the single whitespace after them."""
    tokens, i, n = [], 0, len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise TruncatedBody("PGM header ended early")
        tokens.append(buf[i:j])
        i = j
    return tokens, i + 1


def pgm_from_bytes(buf: bytes) -> ImageVolume:
    """8- or 16-bit binary graymap as a 2D volume; rows become axis 0."""
    tokens, off = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise BadMagic(f"expected b'P5', got {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise UnsupportedDtype(f"PGM maxval {maxval} out of range")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    body = buf[off:off + need]
    if len(body) != need:
        raise TruncatedBody(f"PGM body has {len(body)} bytes, expected {need}")
    img = np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.float64)
    imax = 255.0 if maxval < 256 else 65535.0
    return ImageVolume(img, imax, Modality.SYNTHETIC)


def pgm_bytes(img: np.ndarray, maxval: int = 255) -> bytes:
    """Encode a 2D array of values in ``[0, 1]`` as a binary graymap."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"graymap needs a 2D array, got shape {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    dtype = "u1" if maxval < 256 else ">u2"
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    return head + q.astype(dtype).tobytes()


def write_pgm(path: PathLike, img: np.ndarray, maxval: int = 255) -> None:
    Path(path).write_bytes(pgm_bytes(img, maxval))


# --- dictionary ----------------------------------------------------------------------------

def dictionary_bytes(D: Dictionary) -> bytes:
    m, k = D.atoms.shape
    return DICT_MAGIC + struct.pack("<QQ", m, k) + D.atoms.astype("<f8").tobytes(order="F")


def dictionary_from_bytes(buf: bytes, patch_shape=None) -> Dictionary:
    if buf[:5] != DICT_MAGIC:
        raise BadMagic(f"expected {DICT_MAGIC!r}, got {buf[:5]!r}")
    if len(buf) < 21:
        raise TruncatedBody("DICT1 header is 21 bytes")
    m, k = struct.unpack_from("<QQ", buf, 5)
    body = buf[21:]
    if len(body) != 8 * m * k:
        raise TruncatedBody(f"body has {len(body)} bytes, expected {8 * m * k}")
    atoms = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape((m, k), order="F")
    return Dictionary(atoms, None, patch_shape)


def write_dictionary(path: PathLike, D: Dictionary) -> None:
    Path(path).write_bytes(dictionary_bytes(D))


def read_dictionary(path: PathLike, patch_shape=None) -> Dictionary:
    return dictionary_from_bytes(Path(path).read_bytes(), patch_shape)


# --- network -------------------------------------------------------------------------------

_NET_HEADER = struct.Struct("<5s6Q")


def net_bytes(net: NetParams) -> bytes:
    s = net.spec
    head = _NET_HEADER.pack(NET_MAGIC, s.depth, s.filters, *s.kernel, s.skip_period)
    values = [v.astype("<f8").ravel() for v in net.params.values()]
    values += [v.astype("<f8").ravel() for v in net.buffers.values()]
    return head + np.concatenate(values).tobytes()


def net_from_bytes(buf: bytes) -> NetParams:
    if buf[:5] != NET_MAGIC:
        raise BadMagic(f"expected {NET_MAGIC!r}, got {buf[:5]!r}")
    if len(buf) < _NET_HEADER.size:
        raise TruncatedBody(f"RNET1 header is {_NET_HEADER.size} bytes")
    _, depth, filters, kx, ky, kz, period = _NET_HEADER.unpack_from(buf)
    spec = NetSpec(depth, filters, (kx, ky, kz), period)
    shapes = list(spec.param_shapes().items()) + list(spec.buffer_shapes().items())
    total = sum(math.prod(shape) for _, shape in shapes)
    body = buf[_NET_HEADER.size:]
    if len(body) != 8 * total:
        raise TruncatedBody(f"body has {len(body)} bytes, expected {8 * total}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    params, buffers, pos = OrderedDict(), OrderedDict(), 0
    n_params = len(spec.param_shapes())
    for i, (name, shape) in enumerate(shapes):
        size = math.prod(shape)
        (params if i < n_params else buffers)[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    return NetParams(spec, params, buffers)


def write_net(path: PathLike, net: NetParams) -> None:
    Path(path).write_bytes(net_bytes(net))


def read_net(path: PathLike) -> NetParams:
    return net_from_bytes(Path(path).read_bytes())


# --- config --------------------------------------------------------------------------------

CONFIG_ALIASES = {"lambda": "lam"}


def _parse_value(text: str):
    t = text.strip()
    if t.lower() in ("none", ""):
        return None
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    if "," in t or t.startswith("("):
        return tuple(int(x) for x in t.strip("()").split(",") if x.strip())
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t.strip("\"'")


def parse_config(text: str) -> DenoiseConfig:
    """Build a :class:`DenoiseConfig` from ``key = value`` lines.

    ``#`` starts a comment; ``lambda`` is accepted for ``lam``; tuples are
    written ``8,8,1``. Missing keys keep their defaults. Unknown keys raise
    :class:`ConfigSyntaxError`.
    """
    fields = {f.name: f for f in dataclasses.fields(DenoiseConfig)}
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigSyntaxError(f"line {n}: expected key = value, got {raw!r}")
        key, val = (x.strip() for x in line.split("=", 1))
        key = CONFIG_ALIASES.get(key, key)
        if key not in fields:
            raise ConfigSyntaxError(f"line {n}: unknown key {key!r}")
        try:
            values[key] = _parse_value(val)
        except ValueError:
            raise ConfigSyntaxError(f"line {n}: bad value for {key!r}: {val!r}") from None
    for key in ("lam", "mu", "outer_tol", "net_lr", "net_lr_decay", "noise_sigma"):
        if isinstance(values.get(key), int):
            values[key] = float(values[key])
    return DenoiseConfig(**values)


def read_config(path: PathLike) -> DenoiseConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: DenoiseConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
