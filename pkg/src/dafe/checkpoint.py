"""Binary checkpoint container with named sections.

Layout (little endian)::

    b"DAFE"  u32 version  u32 section_count  u32 header_crc
    per section:
        u16 name_len  name  u64 payload_len  u32 payload_crc  payload

A payload is a JSON document in which arrays are replaced by
``{"__array__": n}`` references, followed by the raw arrays.  Floats inside
the JSON are written with ``repr`` precision, so the round trip is exact.
"""

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .crbm import CdbnStack, CrbmLayer
from .errors import FormatError
from .preproc import PcaModel
from .simhead import PARAM_NAMES, SimilarityHead

MAGIC = b"DAFE"
VERSION = 1


def _encode(obj, arrays):
    if isinstance(obj, np.ndarray):
        arrays.append(np.ascontiguousarray(obj))
        return {"__array__": len(arrays) - 1}
    if isinstance(obj, dict):
        return {str(k): _encode(v, arrays) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v, arrays) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _decode(obj, arrays):
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            return arrays[obj["__array__"]]
        return {k: _decode(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, arrays) for v in obj]
    return obj


def _pack_payload(obj):
    arrays = []
    doc = json.dumps(_encode(obj, arrays)).encode("utf-8")
    parts = [struct.pack("<I", len(doc)), doc, struct.pack("<I", len(arrays))]
    for a in arrays:
        dtype = a.dtype.str.encode("ascii")
        parts.append(struct.pack("<B", len(dtype)) + dtype)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def _unpack_payload(buf, base):
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated section payload", base + pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    (doc_len,) = struct.unpack("<I", take(4))
    try:
        doc = json.loads(take(doc_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad section document: {exc}", base + 4) from exc
    (count,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(count):
        (dlen,) = struct.unpack("<B", take(1))
        try:
            dtype = np.dtype(take(dlen).decode("ascii"))
        except (TypeError, UnicodeDecodeError) as exc:
            raise FormatError("bad array dtype", base + pos) from exc
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays.append(np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy())
    if pos != len(buf):
        raise FormatError("trailing bytes in section payload", base + pos)
    return _decode(doc, arrays)


def save_checkpoint(path, sections):
    """Write ``{name: payload}``; the file is replaced atomically."""
    body = []
    for name, obj in sections.items():
        raw = name.encode("utf-8")
        payload = _pack_payload(obj)
        body.append(struct.pack("<H", len(raw)) + raw
                    + struct.pack("<QI", len(payload), zlib.crc32(payload)) + payload)
    head = MAGIC + struct.pack("<II", VERSION, len(body))
    blob = head + struct.pack("<I", zlib.crc32(head)) + b"".join(body)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_checkpoint_bytes(buf):
    if len(buf) < 16:
        raise FormatError("truncated checkpoint header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, not a checkpoint", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    (crc,) = struct.unpack_from("<I", buf, 12)
    if zlib.crc32(buf[:12]) != crc:
        raise FormatError("header checksum mismatch", 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 16
    sections = {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError("truncated section header", pos)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        if pos + 2 + nlen + 12 > len(buf):
            raise FormatError("truncated section header", pos)
        name = buf[pos + 2:pos + 2 + nlen].decode("utf-8", errors="replace")
        size, pcrc = struct.unpack_from("<QI", buf, pos + 2 + nlen)
        start = pos + 2 + nlen + 12
        if start + size > len(buf):
            raise FormatError(f"truncated section {name!r}", start)
        payload = buf[start:start + size]
        if zlib.crc32(payload) != pcrc:
            raise FormatError(f"checksum mismatch in section {name!r}", start)
        sections[name] = _unpack_payload(payload, start)
        pos = start + size
    if pos != len(buf):
        raise FormatError("trailing bytes after last section", pos)
    return sections


def load_checkpoint(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}", 0) from exc
    return read_checkpoint_bytes(buf)


# -- model objects <-> plain payloads ---------------------------------------

def stack_to_payload(stack):
    return {"input_size": stack.input_size, "trained": stack.trained,
            "layers": [{"W": l.W, "b": l.b, "c": l.c, "pool": l.pool, "visible": l.visible,
                        "velocity": dict(l.velocity)} for l in stack.layers]}


def stack_from_payload(p):
    layers = [CrbmLayer(W=l["W"], b=l["b"], c=l["c"], pool=l["pool"], visible=l["visible"],
                        velocity=dict(l["velocity"])) for l in p["layers"]]
    return CdbnStack(layers=layers, input_size=p["input_size"], trained=p["trained"])


def head_to_payload(head):
    return {name: getattr(head, name) for name in PARAM_NAMES}


def head_from_payload(p):
    return SimilarityHead(**{name: p[name] for name in PARAM_NAMES})


def pca_to_payload(pca):
    if pca is None:
        return {}
    return {"mean": pca.mean, "basis": pca.basis, "explained_variance": pca.explained_variance}


def pca_from_payload(p):
    if not p:
        return None
    return PcaModel(mean=p["mean"], basis=p["basis"], explained_variance=p["explained_variance"])
