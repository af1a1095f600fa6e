"""Single-file CAE model format.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then every parameter array as raw little-endian floats in
manifest order.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .cae import PRECISIONS, CaeSpec, build_cae
from .exceptions import ConfigError, CorruptManifestError, ManifestShapeError, TruncatedPayloadError

MAGIC = b"AOCAE\x00\x01\n"
FORMAT = "astro-outliers-cae/1"
_HEADER = struct.Struct("<Q")


def save_model(model, path):
    path = Path(path)
    params = model.parameters()
    dtype_name = model.dtype.name
    item = np.dtype(dtype_name).itemsize
    entries, offset = [], 0
    for name, arr in params.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * item
    manifest = {
        "format": FORMAT,
        "dtype": dtype_name,
        "spec": model.spec.to_dict(),
        "params": entries,
        "payload_bytes": offset,
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    le = np.dtype(dtype_name).newbyteorder("<")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(len(blob)))
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())
    tmp.replace(path)
    return path


def _read_manifest(data):
    if len(data) < len(MAGIC) + _HEADER.size or data[:len(MAGIC)] != MAGIC:
        raise CorruptManifestError("not a model file (bad magic)")
    (length,) = _HEADER.unpack_from(data, len(MAGIC))
    start = len(MAGIC) + _HEADER.size
    if start + length > len(data):
        raise TruncatedPayloadError("file ends inside the manifest")
    try:
        manifest = json.loads(data[start:start + length].decode())
        if manifest["format"] != FORMAT:
            raise CorruptManifestError(f"unsupported model format {manifest['format']!r}")
        spec = CaeSpec.from_dict(manifest["spec"])
        precision = manifest["dtype"]
        entries = [(e["name"], tuple(e["shape"]), int(e["offset"])) for e in manifest["params"]]
        payload_bytes = int(manifest["payload_bytes"])
        if precision not in PRECISIONS:
            raise CorruptManifestError(f"unsupported dtype {precision!r}")
    except CorruptManifestError:
        raise
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise CorruptManifestError(f"malformed manifest: {e}") from e
    return spec, precision, entries, payload_bytes, start + length


def load_model(path):
    """Read a model written by :func:`save_model`; nothing is returned on any error."""
    data = Path(path).read_bytes()
    spec, precision, entries, payload_bytes, start = _read_manifest(data)
    model = build_cae(spec, seed=0, precision=precision)
    params = model.parameters()
    if [e[0] for e in entries] != list(params):
        missing = sorted(set(params) - {e[0] for e in entries})
        extra = sorted({e[0] for e in entries} - set(params))
        raise CorruptManifestError(f"parameter names differ (missing {missing}, unexpected {extra})")
    item = np.dtype(precision).itemsize
    for name, shape, offset in entries:
        if shape != params[name].shape:
            raise ManifestShapeError(name, params[name].shape, shape)
        if offset < 0 or offset + int(np.prod(shape)) * item > payload_bytes:
            raise CorruptManifestError(f"{name}: offset {offset} outside the payload")
    if len(data) - start < payload_bytes:
        raise TruncatedPayloadError(f"payload has {len(data) - start} bytes, expected {payload_bytes}")
    if len(data) - start > payload_bytes:
        raise CorruptManifestError("trailing bytes after the payload")
    le = np.dtype(precision).newbyteorder("<")
    for name, shape, offset in entries:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=le, count=count, offset=start + offset)
        params[name][...] = arr.reshape(shape)
    return model
