"""Binary tensor files: one structured-text header line, then raw payload.

Format (documented bit-exactly):

    tensor dtype=<f32|f64> shape=<d0,d1,...> order=row-major\\n
    <little-endian payload, product(shape) values>

Round trips are bit-exact for float32/float64 arrays of any rank.
"""

from __future__ import annotations

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _NAMES:
        raise ValueError(f"tensor files hold f32/f64 data, got dtype {arr.dtype}")
    name = _NAMES[arr.dtype]
    shape = ",".join(str(int(d)) for d in arr.shape)
    header = f"tensor dtype={name} shape={shape} order=row-major\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr).astype(_DTYPES[name], copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        fields = dict(
            part.split("=", 1) for part in header.split()[1:] if "=" in part
        ) if header.startswith("tensor ") else None
        if not fields or set(fields) != {"dtype", "shape", "order"}:
            raise ValueError(f"{path}: malformed tensor header: {header!r}")
        if fields["order"] != "row-major":
            raise ValueError(f"{path}: unsupported element order {fields['order']!r}")
        if fields["dtype"] not in _DTYPES:
            raise ValueError(f"{path}: unsupported dtype {fields['dtype']!r}")
        shape = tuple(int(d) for d in fields["shape"].split(",") if d)
        dtype = _DTYPES[fields["dtype"]]
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read()
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
