"""Binary file formats and the text manifest/config formats.

MTNF tensor blob:
    bytes 0..3   magic "MTNF"
    u32 LE       version (=1)
    u8           dtype tag: 1 = float32, 2 = float64
    u8           rank
    6 bytes      zero padding (fixed 16-byte header)
    rank x u32   extents, little-endian
    payload      row-major little-endian values

RVQS code matrix:
    magic "RVQS", u32 n, u32 R, then n*R u16 LE indices, row-major.
    Codebooks larger than 65536 entries cannot be serialized.

RVQC codebook:
    magic "RVQC", u32 version, u32 K, u32 d, f32 decay, f32 epsilon,
    then three MTNF blobs: entries (K,d), ema_cluster_size (K,),
    ema_cluster_sum (K,d).

Section container (checkpoints):
    magic "SECT", u32 version, u32 section count, then per section:
    u16 name length, utf-8 name, u64 payload length, payload bytes.
    The final section is named "sha256" and holds the SHA-256 of every
    preceding byte of the file; readers verify it.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MTNF_MAGIC = b"MTNF"
RVQS_MAGIC = b"RVQS"
RVQC_MAGIC = b"RVQC"
SECT_MAGIC = b"SECT"

_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class FormatError(ValueError):
    """Malformed or inconsistent on-disk data."""


# ---------------------------------------------------------------------------
# MTNF
# ---------------------------------------------------------------------------

def write_mtnf_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _TAG_FOR_KIND:
        raise FormatError(f"MTNF supports float32/float64, got {arr.dtype}")
    tag = _TAG_FOR_KIND[arr.dtype]
    out = io.BytesIO()
    out.write(MTNF_MAGIC)
    out.write(struct.pack("<I", 1))
    out.write(struct.pack("<BB", tag, arr.ndim))
    out.write(b"\x00" * 6)
    for extent in arr.shape:
        out.write(struct.pack("<I", extent))
    out.write(arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes())
    return out.getvalue()


def read_mtnf_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 16 or blob[:4] != MTNF_MAGIC:
        raise FormatError("not an MTNF blob")
    version, = struct.unpack_from("<I", blob, 4)
    if version != 1:
        raise FormatError(f"unsupported MTNF version {version}")
    tag, rank = struct.unpack_from("<BB", blob, 8)
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"unknown MTNF dtype tag {tag}")
    offset = 16
    shape = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
    offset += 4 * rank
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(f"MTNF payload size mismatch: have {len(blob)}, "
                          f"expected {expected}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def write_mtnf(path, array: np.ndarray) -> None:
    Path(path).write_bytes(write_mtnf_bytes(array))


def read_mtnf(path) -> np.ndarray:
    return read_mtnf_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# RVQS
# ---------------------------------------------------------------------------

def write_rvqs_bytes(indices: np.ndarray) -> bytes:
    arr = np.asarray(indices)
    if arr.ndim != 2:
        raise FormatError("RVQS expects an (n, R) index matrix")
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
        raise FormatError("RVQS indices must fit u16 (codebook K <= 65536)")
    n, depth = arr.shape
    header = RVQS_MAGIC + struct.pack("<II", n, depth)
    return header + arr.astype("<u2").tobytes()


def read_rvqs_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 12 or blob[:4] != RVQS_MAGIC:
        raise FormatError("not an RVQS blob")
    n, depth = struct.unpack_from("<II", blob, 4)
    expected = 12 + 2 * n * depth
    if len(blob) != expected:
        raise FormatError("RVQS payload size mismatch")
    data = np.frombuffer(blob, dtype="<u2", count=n * depth, offset=12)
    return data.reshape(n, depth).astype(np.int64)


def write_rvqs(path, indices: np.ndarray) -> None:
    Path(path).write_bytes(write_rvqs_bytes(indices))


def read_rvqs(path) -> np.ndarray:
    return read_rvqs_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# RVQC
# ---------------------------------------------------------------------------

def write_rvqc_bytes(entries: np.ndarray, ema_size: np.ndarray,
                     ema_sum: np.ndarray, decay: float, epsilon: float) -> bytes:
    k, d = entries.shape
    out = io.BytesIO()
    out.write(RVQC_MAGIC)
    out.write(struct.pack("<III", 1, k, d))
    out.write(struct.pack("<ff", decay, epsilon))
    for arr in (entries, ema_size, ema_sum):
        blob = write_mtnf_bytes(arr)
        out.write(struct.pack("<Q", len(blob)))
        out.write(blob)
    return out.getvalue()


def read_rvqc_bytes(blob: bytes):
    if len(blob) < 24 or blob[:4] != RVQC_MAGIC:
        raise FormatError("not an RVQC blob")
    version, k, d = struct.unpack_from("<III", blob, 4)
    if version != 1:
        raise FormatError(f"unsupported RVQC version {version}")
    decay, epsilon = struct.unpack_from("<ff", blob, 16)
    offset = 24
    arrays = []
    for _ in range(3):
        size, = struct.unpack_from("<Q", blob, offset)
        offset += 8
        arrays.append(read_mtnf_bytes(blob[offset:offset + size]))
        offset += size
    entries, ema_size, ema_sum = arrays
    if entries.shape != (k, d) or ema_size.shape != (k,) \
            or ema_sum.shape != (k, d):
        raise FormatError("RVQC payload shapes inconsistent with header")
    return entries, ema_size, ema_sum, float(decay), float(epsilon)


# ---------------------------------------------------------------------------
# section container
# ---------------------------------------------------------------------------

def write_sections(path, sections: dict[str, bytes]) -> None:
    """Write named sections plus a trailing sha256 integrity section."""
    out = io.BytesIO()
    out.write(SECT_MAGIC)
    out.write(struct.pack("<II", 1, len(sections) + 1))
    for name, payload in sections.items():
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    body = out.getvalue()
    digest = hashlib.sha256(body).digest()
    tail = io.BytesIO()
    tail.write(struct.pack("<H", 6))
    tail.write(b"sha256")
    tail.write(struct.pack("<Q", len(digest)))
    tail.write(digest)
    Path(path).write_bytes(body + tail.getvalue())


def read_sections(path) -> dict[str, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != SECT_MAGIC:
        raise FormatError("not a section container")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != 1:
        raise FormatError(f"unsupported container version {version}")
    offset = 12
    sections: dict[str, bytes] = {}
    body_end = None
    for _ in range(count):
        name_len, = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        size, = struct.unpack_from("<Q", blob, offset)
        offset += 8
        if name == "sha256":
            body_end = offset - 10 - name_len
        sections[name] = blob[offset:offset + size]
        offset += size
    if offset != len(blob):
        raise FormatError("trailing bytes after final section")
    digest = sections.pop("sha256", None)
    if digest is None or body_end is None:
        raise FormatError("missing sha256 section")
    if hashlib.sha256(blob[:body_end]).digest() != digest:
        raise FormatError("checkpoint integrity check failed")
    return sections


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    motion_path: Path
    embedding_path: Path
    caption: str


@dataclass
class Manifest:
    records: list[ManifestRecord]
    split: str = "train"

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def write_manifest(path, records: list[tuple[str, str, str]]) -> None:
    lines = [f"{m}\t{e}\t{c}" for m, e, c in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                          encoding="utf-8", newline="\n")


def read_manifest(path, split: str = "train") -> Manifest:
    """Tab-separated records; relative paths resolve against the manifest dir."""
    path = Path(path)
    base = path.parent
    records = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{line_no}: expected 3 tab-separated "
                              f"fields, got {len(parts)}")
        motion, embedding, caption = parts
        records.append(ManifestRecord(
            motion_path=(base / motion) if not Path(motion).is_absolute() else Path(motion),
            embedding_path=(base / embedding) if not Path(embedding).is_absolute() else Path(embedding),
            caption=caption))
    return Manifest(records=records, split=split)


# ---------------------------------------------------------------------------
# key=value config files
# ---------------------------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {line_no}: expected key=value, "
                              f"got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def read_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def write_config(path, values: dict) -> None:
    lines = [f"{k}={v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8",
                          newline="\n")
