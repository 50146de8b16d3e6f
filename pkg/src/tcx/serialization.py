"""Binary checkpoint format and the CRC-64 used by all binary artifacts.

Checkpoint layout ("TCKP"): magic, u32 version=1, u32 dense-layer count, then
per layer u32 rows, u32 cols, row-major little-endian float64 W then b, and a
trailing 8-byte CRC-64 of everything after the magic.  The layer structure
itself travels in a sidecar text file (one layer per line) so a checkpoint is
self-describing.
"""

import struct

import numpy as np

from tcx import nn

CHECKPOINT_MAGIC = b"TCKP"

# CRC-64/XZ (reflected ECMA-182 polynomial)
_CRC64_POLY = 0xC96C5795D7870F42


def _crc64_table():
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table[i] = crc
    return table


_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    table = _TABLE
    for b in data:
        crc = int(table[(crc ^ b) & 0xFF]) ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


class CorruptFileError(ValueError):
    pass


def save_checkpoint(path, net):
    """Write <path> (binary params) and <path>.spec (layer lines)."""
    payload = bytearray()
    payload += struct.pack("<II", 1, len(net.weights))
    for w, b in zip(net.weights, net.biases):
        rows, cols = w.shape
        payload += struct.pack("<II", rows, cols)
        payload += np.ascontiguousarray(w, dtype="<f8").tobytes()
        payload += np.ascontiguousarray(b, dtype="<f8").tobytes()
    blob = CHECKPOINT_MAGIC + bytes(payload) + struct.pack("<Q", crc64(bytes(payload)))
    with open(path, "wb") as fh:
        fh.write(blob)
    with open(str(path) + ".spec", "w") as fh:
        fh.write("\n".join(nn.format_spec_text(net.spec)) + "\n")


def load_checkpoint(path, seed=0, frozen=False):
    """Rebuild a Network from <path> + <path>.spec, verifying the CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptFileError(f"bad checkpoint magic {blob[:4]!r}")
    payload, (stored_crc,) = blob[4:-8], struct.unpack("<Q", blob[-8:])
    if crc64(payload) != stored_crc:
        raise CorruptFileError("checkpoint CRC mismatch")
    version, n_layers = struct.unpack_from("<II", payload, 0)
    if version != 1:
        raise CorruptFileError(f"unsupported checkpoint version {version}")
    off = 8
    weights, biases = [], []
    for _ in range(n_layers):
        if off + 8 > len(payload):
            raise CorruptFileError("truncated checkpoint")
        rows, cols = struct.unpack_from("<II", payload, off)
        off += 8
        wn = rows * cols * 8
        if off + wn + rows * 8 > len(payload):
            raise CorruptFileError("truncated checkpoint")
        w = np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=off)
        off += wn
        b = np.frombuffer(payload, dtype="<f8", count=rows, offset=off)
        off += rows * 8
        weights.append(w.reshape(rows, cols).copy())
        biases.append(b.copy())
    with open(str(path) + ".spec") as fh:
        spec = nn.parse_spec_text(fh.read().splitlines())
    nn.validate_spec(spec)
    if len(weights) != sum(1 for l in spec if l.kind == "dense"):
        raise CorruptFileError("checkpoint layer count does not match spec file")
    net = nn.Network(spec=spec, weights=weights, biases=biases, seed=int(seed),
                     frozen=frozen)
    net._rng = np.random.default_rng(int(seed))
    return net
