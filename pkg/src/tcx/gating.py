"""Binary gating-state extraction and persistence.

A GateMatrix holds one gating layer's states over an analysis set as
bit-packed rows (LSB-first).  A GateRecord stacks the matrices of all gating
layers for one pass, tagged with whether dropout sampling was live
(stochastic_pass) or removed (deterministic_pass).
"""

import struct
from dataclasses import dataclass

import numpy as np

from tcx import nn
from tcx.serialization import CorruptFileError, crc64

GATE_DUMP_MAGIC = b"TCGD"

LAYER_KIND_CODES = {"relu": 0, "swish_hardened": 1, "dropout": 2, "maxpool": 3}
LAYER_KIND_NAMES = {v: k for k, v in LAYER_KIND_CODES.items()}

STOCHASTIC_PASS = "stochastic_pass"
DETERMINISTIC_PASS = "deterministic_pass"


@dataclass(frozen=True)
class GateMatrix:
    layer_id: int
    n: int
    D: int
    bits: np.ndarray            # (n, ceil(D/8)) uint8, LSB-first per row
    layer_kind: str

    @classmethod
    def from_dense(cls, layer_id, dense_bits, layer_kind):
        dense_bits = np.asarray(dense_bits)
        if dense_bits.ndim != 2:
            raise ValueError("gate matrix must be 2-D")
        n, d = dense_bits.shape
        if n == 0 or d == 0:
            raise ValueError("gate matrix must be non-empty")
        if layer_kind not in LAYER_KIND_CODES:
            raise ValueError(f"unknown layer kind {layer_kind!r}")
        packed = np.packbits(dense_bits.astype(bool), axis=1, bitorder="little")
        return cls(layer_id=int(layer_id), n=n, D=d,
                   bits=np.ascontiguousarray(packed), layer_kind=layer_kind)

    def toarray(self):
        """Unpacked (n, D) uint8 view of the gates."""
        dense = np.unpackbits(self.bits, axis=1, bitorder="little")
        return dense[:, : self.D]

    def packed_words(self):
        """Rows as little-endian uint64 words (zero padded) for the kernels."""
        n_bytes = self.bits.shape[1]
        n_words = (n_bytes + 7) // 8
        padded = np.zeros((self.n, n_words * 8), dtype=np.uint8)
        padded[:, :n_bytes] = self.bits
        return np.ascontiguousarray(padded).view(np.uint64)

    def select_rows(self, idx):
        return GateMatrix(self.layer_id, len(idx), self.D,
                          np.ascontiguousarray(self.bits[idx]), self.layer_kind)

    def activation_rates(self):
        return self.toarray().mean(axis=0)


@dataclass(frozen=True)
class GateRecord:
    layers: tuple          # GateMatrix per gating layer, layer_ids increasing
    provenance: str

    def __post_init__(self):
        if self.provenance not in (STOCHASTIC_PASS, DETERMINISTIC_PASS):
            raise ValueError(f"bad provenance {self.provenance!r}")
        ns = {g.n for g in self.layers}
        if len(ns) > 1:
            raise ValueError("gate matrices disagree on sample count")
        ids = [g.layer_id for g in self.layers]
        if ids != sorted(set(ids)):
            raise ValueError("layer_ids must be strictly increasing")

    @property
    def n(self):
        return self.layers[0].n

    def concat(self, which=None):
        """Concatenate the dense bits of the selected layers column-wise."""
        mats = self.layers if which is None else [self.layers[i] for i in which]
        dense = np.concatenate([g.toarray() for g in mats], axis=1)
        return GateMatrix.from_dense(mats[0].layer_id, dense, mats[0].layer_kind)


def extract_relu_gates(pre_activation, layer_id=0, hardened=False):
    """bit = 1 iff the pre-activation entry is strictly positive."""
    h = np.asarray(pre_activation, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite pre-activations")
    kind = "swish_hardened" if hardened else "relu"
    return GateMatrix.from_dense(layer_id, h > 0, kind)


def extract_dropout_gates(mask, layer_id=0):
    """bit = kept indicator; the mask comes from a train-mode pass."""
    if mask is None:
        raise ValueError("no dropout mask captured (eval-mode trace?)")
    return GateMatrix.from_dense(layer_id, np.asarray(mask) > 0, "dropout")


def extract_maxpool_gates(inputs, regions, layer_id=0):
    """Flattened selection matrix: bit (r, d) = 1 iff d is region r's argmax.

    Ties go to the lowest index.  Row layout is region-major, so each sample
    contributes len(regions)*D bits.
    """
    x = np.asarray(inputs, dtype=np.float64)
    n, d = x.shape
    regions = [np.asarray(r) for r in regions]
    if any(len(r) == 0 for r in regions):
        raise ValueError("empty maxpool region")
    sel = np.zeros((n, len(regions), d), dtype=bool)
    rows = np.arange(n)
    for ri, r in enumerate(regions):
        am = r[np.argmax(x[:, r], axis=1)]
        sel[rows, ri, am] = True
    return GateMatrix.from_dense(layer_id, sel.reshape(n, -1), "maxpool")


def record_from_trace(trace, spec):
    """Build per-gating-layer GateMatrix list from a captured forward trace."""
    mats = []
    for t in trace.layers:
        if t.kind in ("relu", "swish"):
            hardened = t.kind == "swish" or t.s is not None
            mats.append(extract_relu_gates(t.x, layer_id=t.index,
                                           hardened=hardened))
        elif t.kind == "dropout":
            mats.append(GateMatrix.from_dense(t.index, t.gates, "dropout"))
        elif t.kind == "maxpool":
            mats.append(extract_maxpool_gates(t.x, spec[t.index].regions,
                                              layer_id=t.index))
    return mats


def capture_record(net, analysis_set, provenance, seed=0):
    """One forward pass over the analysis set, gates captured per layer.

    deterministic_pass runs in eval mode, which removes dropout sampling
    (dropout gates come back all-ones); stochastic_pass keeps it live.
    """
    if not nn.gating_layer_indices(net.spec):
        raise ValueError("network has no gating layers")
    mode = "eval" if provenance == DETERMINISTIC_PASS else "train"
    rng = np.random.default_rng(seed)
    _, trace = nn.forward(net, analysis_set, mode=mode, capture=True, rng=rng)
    return GateRecord(layers=tuple(record_from_trace(trace, net.spec)),
                      provenance=provenance)


# ---------------------------------------------------------------------------
# gate dump format

def _matrix_blob(g):
    payload = bytearray()
    payload += struct.pack("<II", 1, g.layer_id)
    payload += struct.pack("<B", LAYER_KIND_CODES[g.layer_kind])
    payload += struct.pack("<II", g.n, g.D)
    payload += g.bits.tobytes()
    return GATE_DUMP_MAGIC + bytes(payload) + struct.pack("<Q", crc64(bytes(payload)))


def _read_matrix_blob(buf, off):
    if buf[off:off + 4] != GATE_DUMP_MAGIC:
        raise CorruptFileError(f"bad gate dump magic {buf[off:off + 4]!r}")
    off += 4
    version, layer_id = struct.unpack_from("<II", buf, off)
    if version != 1:
        raise CorruptFileError(f"unsupported gate dump version {version}")
    (kind_code,) = struct.unpack_from("<B", buf, off + 8)
    n, d = struct.unpack_from("<II", buf, off + 9)
    header_len = 17
    row_bytes = (d + 7) // 8
    body_len = header_len + n * row_bytes
    payload = buf[off:off + body_len]
    if len(payload) != body_len or off + body_len + 8 > len(buf):
        raise CorruptFileError("truncated gate dump")
    (stored_crc,) = struct.unpack_from("<Q", buf, off + body_len)
    if crc64(payload) != stored_crc:
        raise CorruptFileError("gate dump CRC mismatch")
    bits = np.frombuffer(buf, dtype=np.uint8, count=n * row_bytes,
                         offset=off + header_len).reshape(n, row_bytes).copy()
    if kind_code not in LAYER_KIND_NAMES:
        raise CorruptFileError(f"unknown layer kind code {kind_code}")
    g = GateMatrix(layer_id=layer_id, n=n, D=d, bits=bits,
                   layer_kind=LAYER_KIND_NAMES[kind_code])
    return g, off + body_len + 8


def save_gate_dump(path, matrices, provenance=STOCHASTIC_PASS):
    """Write one or more GateMatrix blobs back-to-back (also takes a record)."""
    if isinstance(matrices, GateRecord):
        provenance = matrices.provenance
        matrices = matrices.layers
    elif isinstance(matrices, GateMatrix):
        matrices = [matrices]
    with open(path, "wb") as fh:
        for g in matrices:
            fh.write(_matrix_blob(g))
    return provenance


def load_gate_dump(path, provenance=STOCHASTIC_PASS):
    """Read all GateMatrix blobs from a dump; returns a GateRecord."""
    with open(path, "rb") as fh:
        buf = fh.read()
    mats, off = [], 0
    while off < len(buf):
        g, off = _read_matrix_blob(buf, off)
        mats.append(g)
    if not mats:
        raise CorruptFileError("empty gate dump")
    return GateRecord(layers=tuple(mats), provenance=provenance)
