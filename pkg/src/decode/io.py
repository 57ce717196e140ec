"""Binary tensor files (BTF1) and the named-tensor checkpoint container (DCKP).

Both formats are little-endian and row-major; see docs/formats.md.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

BTF_MAGIC = b"BTF"
BTF_VERSION = b"1"
BTF_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

DCKP_MAGIC = b"DCKP"
DCKP_VERSION = 1
DCKP_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_MAX_EXTENT = 1 << 40


class FormatError(ValueError):
    pass


def _dtype_code(table: dict, dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).kind in "fi" else np.dtype(dtype)
    for code, ref in table.items():
        if ref == dt:
            return code
    raise FormatError(f"unsupported dtype {np.dtype(dtype)}; supported: {[str(v) for v in table.values()]}")


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what}: needed {n} bytes at offset {self.pos}, "
                              f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def extents(self, ndim: int) -> tuple[int, ...]:
        shape = self.unpack(f"<{ndim}Q") if ndim else ()
        if any(s > _MAX_EXTENT for s in shape):
            raise FormatError(f"{self.what}: extent overflow in shape {shape}")
        return tuple(int(s) for s in shape)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


# ---------------------------------------------------------------------------
# BTF1
# ---------------------------------------------------------------------------

def encode_btf(array) -> bytes:
    arr = np.asarray(array)
    code = _dtype_code(BTF_DTYPES, arr.dtype)
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    head = BTF_MAGIC + BTF_VERSION + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=BTF_DTYPES[code]).tobytes()


def decode_btf(buf: bytes) -> np.ndarray:
    r = _Reader(buf, "tensor file")
    magic = r.take(4)
    if magic[:3] != BTF_MAGIC:
        raise FormatError("not a BTF tensor file (bad magic)")
    if magic[3:] != BTF_VERSION:
        raise FormatError(f"unsupported version {magic.decode('ascii', 'replace')!r}")
    code, ndim = r.unpack("<BB")
    if code not in BTF_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = r.extents(ndim)
    dt = BTF_DTYPES[code]
    n = int(np.prod(shape, dtype=object)) * dt.itemsize
    data = np.frombuffer(r.take(n), dtype=dt).reshape(shape)
    r.done()
    return data.astype(dt.newbyteorder("="), copy=True)


def write_btf(path, array) -> None:
    Path(path).write_bytes(encode_btf(array))


def read_btf(path) -> np.ndarray:
    return decode_btf(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# DCKP
# ---------------------------------------------------------------------------

def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    """Entries sorted by name; ``meta`` stored as sorted-key JSON under ``__meta__``."""
    entries = dict(tensors)
    if "__meta__" in entries:
        raise FormatError("'__meta__' is reserved")
    entries["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    out = [DCKP_MAGIC, struct.pack("<II", DCKP_VERSION, len(entries))]
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        code = _dtype_code(DCKP_DTYPES, arr.dtype)
        key = name.encode("utf-8")
        if len(key) > 0xFFFF or arr.ndim > 255:
            raise FormatError(f"entry {name!r} too large to encode")
        payload = np.ascontiguousarray(arr, dtype=DCKP_DTYPES[code]).tobytes()
        out.append(struct.pack("<H", len(key)) + key + struct.pack("<BB", code, arr.ndim)
                   + struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf, "checkpoint")
    if len(buf) < 4 or buf[:4] != DCKP_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    r.take(4)
    version, count = r.unpack("<II")
    if version != DCKP_VERSION:
        raise FormatError(f"checkpoint version mismatch: file has {version}, reader supports {DCKP_VERSION}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in DCKP_DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        shape = r.extents(ndim)
        (nbytes,) = r.unpack("<Q")
        dt = DCKP_DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=object)) * dt.itemsize:
            raise FormatError(f"entry {name!r}: payload length {nbytes} does not match shape {shape}")
        if name in tensors:
            raise FormatError(f"duplicate entry {name!r}")
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    r.done()
    if "__meta__" not in tensors:
        raise FormatError("checkpoint has no metadata entry")
    meta = json.loads(tensors.pop("__meta__").tobytes().decode("utf-8"))
    return tensors, meta


def save_checkpoint_file(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors, meta))
    tmp.replace(path)


def load_checkpoint_file(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# trial-set directories
# ---------------------------------------------------------------------------

TRIALS_FILE, LABELS_FILE, INFO_FILE = "trials.btf", "labels.csv", "info.json"


def write_trialset(directory, ts) -> list[Path]:
    """``trials.btf`` (N, T, d) f64 uV, ``labels.csv`` (trial,label,marker_index), ``info.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_btf(d / TRIALS_FILE, np.asarray(ts.trials, dtype=np.float64))
    rows = ["trial,label,marker_index"]
    for i, (lab, m) in enumerate(zip(ts.labels, ts.marker_index)):
        if "," in lab or "\n" in lab:
            raise FormatError(f"label {lab!r} contains a comma or newline")
        rows.append(f"{i},{lab},{int(m)}")
    (d / LABELS_FILE).write_text("\n".join(rows) + "\n", encoding="utf-8")
    info = {"rate_hz": float(ts.rate_hz), "channel_names": list(ts.channel_names)}
    (d / INFO_FILE).write_text(json.dumps(info, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return [d / TRIALS_FILE, d / LABELS_FILE, d / INFO_FILE]


def read_trialset(directory):
    from .prep import TrialSet

    d = Path(directory)
    for name in (TRIALS_FILE, LABELS_FILE, INFO_FILE):
        if not (d / name).is_file():
            raise FileNotFoundError(f"{d}: missing {name}")
    x = read_btf(d / TRIALS_FILE)
    lines = (d / LABELS_FILE).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "trial,label,marker_index":
        raise FormatError(f"{d / LABELS_FILE}: expected header 'trial,label,marker_index'")
    labels, markers = [], []
    for k, line in enumerate(lines[1:], 2):
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"{d / LABELS_FILE}:{k}: expected 3 fields")
        labels.append(parts[1])
        markers.append(int(parts[2]))
    info = json.loads((d / INFO_FILE).read_text(encoding="utf-8"))
    return TrialSet(x, labels, np.array(markers, dtype=np.int64), info["rate_hz"], info["channel_names"])


def file_hashes(paths) -> dict[str, str]:
    return {str(p): sha256_file(p) for p in paths}
