"""Binary parameter checkpoints.

Layout (little-endian): magic ``MSTK``, version u16, the effective config
text and a metadata text block (each u32 length + UTF-8), a u32 array count,
then per array its name (u16 length + UTF-8), ndim u8, dims u32 each and
float64 values, and finally a CRC32 of everything before it.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .config import load_config
from .errors import FormatError
from .stgcn import MSTGCN
from .training import model_config

MAGIC = b"MSTK"
VERSION = 1


def _text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def model_arrays(model: MSTGCN) -> dict:
    arrays = {k: v.data for k, v in model.params.items()}
    for name, (mean, var) in model.bn_state().items():
        arrays[f"bn.{name}.mean"] = mean
        arrays[f"bn.{name}.var"] = var
    arrays["meta.dc_adjacency"] = model.dc_adjacency
    if model.fixed_adjacency is not None:
        arrays["meta.fixed_adjacency"] = model.fixed_adjacency
    return arrays


def encode_checkpoint(arrays: dict, config_text: str, meta: dict) -> bytes:
    meta_text = "".join(f"{k} = {v}\n" for k, v in meta.items())
    parts = [MAGIC, struct.pack("<H", VERSION), _text(config_text), _text(meta_text),
             struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        value = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> tuple[dict, str, dict]:
    """Arrays, config text and metadata of a checkpoint byte string."""
    if buf[:4] != MAGIC:
        raise FormatError("not a checkpoint: bad magic", 0)
    if len(buf) < 10:
        raise FormatError("truncated checkpoint", len(buf))
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch", len(buf) - 4)
    r = _Reader(body)
    r.take(4, "magic")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    texts = []
    for what in ("config text", "metadata text"):
        (n,) = r.unpack("<I", f"{what} length")
        texts.append(r.take(n, what).decode("utf-8"))
    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "array name length")
        name = r.take(n, "array name").decode("utf-8")
        (ndim,) = r.unpack("<B", "array rank")
        shape = r.unpack(f"<{ndim}I", "array shape")
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * size, f"array {name}"), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise FormatError("trailing bytes after the last array", r.pos)
    meta = {}
    for line in texts[1].splitlines():
        if line.strip():
            key, value = (p.strip() for p in line.split("=", 1))
            meta[key] = value
    return arrays, texts[0], meta


def save_checkpoint(path, model: MSTGCN, config_text: str, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model_arrays(model), config_text, meta or {}))


def load_checkpoint(path):
    """Rebuild ``(model, config, meta)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        arrays, config_text, meta = decode_checkpoint(fh.read())
    config = load_config(config_text)
    dc = arrays.pop("meta.dc_adjacency")
    fixed = arrays.pop("meta.fixed_adjacency", None)
    n_domains = arrays["head.d.b"].shape[0]
    model = MSTGCN(model_config(config, dc.shape[0], n_domains), dc, np.random.default_rng(0),
                   fixed_adjacency=fixed)
    bn = {}
    for name, value in arrays.items():
        if name.startswith("bn."):
            layer, stat = name[3:].rsplit(".", 1)
            bn.setdefault(layer, {})[stat] = value
            continue
        if name not in model.params or model.params[name].shape != value.shape:
            raise FormatError(f"checkpoint array {name!r} does not fit the configured model")
        model.params[name].data = value.copy()
    missing = set(model.params) - set(arrays)
    if missing:
        raise FormatError(f"checkpoint lacks parameters {sorted(missing)[:3]}")
    model.load_bn_state({k: (v["mean"], v["var"]) for k, v in bn.items()})
    return model, config, meta
