"""Reader/writer for the VGGW1 binary weight container.

Layout:

    magic "VGGW" | u32 version=1 | u32 record count
    per record:  u32 name length | UTF-8 name | u32 rank | u32 dims[rank]
                 | float32 little-endian payload
    trailer:     3 float32 channel means | u32 CRC32

All integers are little-endian.  The CRC32 covers every byte after the
magic + version header up to (excluding) the CRC itself.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"VGGW"
VERSION = 1


class FormatError(ValueError):
    pass


def write_vggw1(records: list[tuple[str, np.ndarray]], channel_means, path) -> None:
    """Write named float arrays plus the channel means; records keep order."""
    means = np.asarray(channel_means, dtype="<f4")
    if means.shape != (3,):
        raise FormatError(f"channel means must have 3 entries, got shape {means.shape}")
    payload = bytearray()
    payload += struct.pack("<I", len(records))
    for name, arr in records:
        arr = np.asarray(arr)
        encoded = name.encode()
        payload += struct.pack("<I", len(encoded)) + encoded
        payload += struct.pack("<I", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    payload += means.tobytes()
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION) + payload + struct.pack("<I", crc))


def read_vggw1(path) -> tuple[list[tuple[str, np.ndarray]], np.ndarray]:
    """Read back ``(records, channel_means)``; verifies magic, version, CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a VGGW1 file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = blob[8:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise FormatError(f"{path}: CRC32 mismatch, file corrupt")

    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(payload):
            raise FormatError(f"{path}: truncated while reading {what}")
        chunk = payload[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "record count"))
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "record name").decode()
        (rank,) = struct.unpack("<I", take(4, f"{name} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        n_vals = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * n_vals, f"{name} data"), dtype="<f4")
        records.append((name, data.reshape(dims).astype(np.float64)))
    means = np.frombuffer(take(12, "channel means"), dtype="<f4").astype(np.float64)
    if off != len(payload):
        raise FormatError(f"{path}: {len(payload) - off} trailing bytes")
    return records, means
