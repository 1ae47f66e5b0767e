"""Flat little-endian binary tensors with plain-text sidecar headers.

Every tensor `name` is stored as two files: `name.bin` (raw C-order bytes,
little endian) and `name.hdr` (one `key: value` per line). The header always
carries `dtype` and `shape`; callers may attach extra metadata lines such as
the CFA tag, channel order, or a flow convention string.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .common import DataError

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "uint8": "|u1",
    "int32": "<i4",
}


def write_tensor(base: str | Path, data: np.ndarray, meta: dict[str, str] | None = None) -> None:
    base = Path(base)
    name = data.dtype.name
    if name not in _DTYPES:
        raise DataError(f"unsupported dtype for tensor io: {name}")
    arr = np.ascontiguousarray(data.astype(_DTYPES[name], copy=False))
    lines = [f"dtype: {name}", "shape: " + " ".join(str(s) for s in arr.shape)]
    for key, value in (meta or {}).items():
        lines.append(f"{key}: {value}")
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(base.suffix + ".bin").write_bytes(arr.tobytes(order="C"))
    base.with_suffix(base.suffix + ".hdr").write_text("\n".join(lines) + "\n")


def read_header(base: str | Path) -> dict[str, str]:
    path = Path(base).with_suffix(Path(base).suffix + ".hdr")
    if not path.exists():
        raise DataError(f"missing tensor header: {path}")
    meta: dict[str, str] = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(":")
        meta[key.strip()] = value.strip()
    return meta


def read_tensor(base: str | Path) -> tuple[np.ndarray, dict[str, str]]:
    base = Path(base)
    meta = read_header(base)
    try:
        dtype = _DTYPES[meta["dtype"]]
        shape = tuple(int(s) for s in meta["shape"].split())
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad tensor header for {base}: {exc}") from exc
    blob = base.with_suffix(base.suffix + ".bin").read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(blob) != expected:
        raise DataError(f"{base}.bin holds {len(blob)} bytes, header implies {expected}")
    arr = np.frombuffer(blob, dtype=dtype).reshape(shape)
    return arr.astype(meta["dtype"]), meta
