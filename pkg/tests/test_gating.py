import numpy as np
import pytest

from tcx import gating, nn
from tcx.gating import (DETERMINISTIC_PASS, STOCHASTIC_PASS, GateMatrix,
                        capture_record, extract_dropout_gates,
                        extract_maxpool_gates, extract_relu_gates,
                        load_gate_dump, save_gate_dump)
from tcx.serialization import CorruptFileError


def test_relu_gates_strict_positive():
    g = extract_relu_gates(np.array([[-1.0, 0.0, 2.0]]))
    assert np.array_equal(g.toarray(), [[0, 0, 1]])


def test_relu_gates_all_positive_row():
    g = extract_relu_gates(np.full((3, 5), 0.25))
    assert np.array_equal(g.toarray(), np.ones((3, 5)))


def test_relu_gates_match_sign_oracle(rng):
    h = rng.normal(size=(40, 23))
    g = extract_relu_gates(h)
    oracle = (np.sign(h) > 0).astype(np.uint8)
    assert np.array_equal(g.toarray(), oracle)


def test_relu_gates_reject_nonfinite():
    with pytest.raises(ValueError):
        extract_relu_gates(np.array([[np.inf, 1.0]]))


def test_dropout_keep_all():
    g = extract_dropout_gates(np.ones((4, 6)))
    assert np.array_equal(g.toarray(), np.ones((4, 6)))
    assert g.layer_kind == "dropout"


def test_dropout_missing_mask_errors():
    with pytest.raises(ValueError):
        extract_dropout_gates(None)


def test_dropout_rate_statistics():
    net = nn.init_network([nn.dense(8, 64), nn.dropout(0.5)], 0)
    x = np.random.default_rng(1).normal(size=(2000, 8))
    _, trace = nn.forward(net, x, mode="train", capture=True,
                          rng=np.random.default_rng(7))
    g = extract_dropout_gates(trace.layers[1].gates)
    rate = g.toarray().mean()
    sigma = np.sqrt(0.25 / (2000 * 64))
    assert abs(rate - 0.5) < 3 * sigma


def test_dropout_same_seed_identical():
    net = nn.init_network([nn.dense(4, 16), nn.dropout(0.3)], 0)
    x = np.ones((10, 4))

    def capture():
        _, tr = nn.forward(net, x, mode="train", capture=True,
                           rng=np.random.default_rng(11))
        return extract_dropout_gates(tr.layers[1].gates)

    assert np.array_equal(capture().bits, capture().bits)


def test_maxpool_selects_argmax():
    g = extract_maxpool_gates(np.array([[5.0, 1.0, 2.0, 9.0]]),
                              [(0, 1), (2, 3)])
    dense = g.toarray().reshape(1, 2, 4)
    assert np.array_equal(dense[0, 0], [1, 0, 0, 0])   # index 0 wins region 1
    assert np.array_equal(dense[0, 1], [0, 0, 0, 1])   # index 3 wins region 2


def test_maxpool_tie_goes_to_lowest_index():
    g = extract_maxpool_gates(np.array([[3.0, 3.0]]), [(0, 1)])
    assert np.array_equal(g.toarray(), [[1, 0]])


def test_maxpool_matches_bruteforce_oracle(rng):
    x = rng.normal(size=(30, 9))
    regions = [(0, 1, 2), (3, 4), (5, 6, 7, 8)]
    g = extract_maxpool_gates(x, regions)
    dense = g.toarray().reshape(30, 3, 9)
    for i in range(30):
        for ri, r in enumerate(regions):
            best = min(d for d in r if x[i, d] == max(x[i, list(r)]))
            expected = np.zeros(9)
            expected[best] = 1
            assert np.array_equal(dense[i, ri], expected)


def test_maxpool_empty_region_rejected():
    with pytest.raises(ValueError):
        extract_maxpool_gates(np.ones((2, 4)), [(0, 1, 2, 3), ()])


def test_capture_record_dropout_free_passes_agree():
    net = nn.init_network(nn.stacked_mlp_spec([5, 8, 8, 3]), 1)
    x = np.random.default_rng(0).normal(size=(20, 5))
    stoch = capture_record(net, x, STOCHASTIC_PASS)
    det = capture_record(net, x, DETERMINISTIC_PASS)
    for a, b in zip(stoch.layers, det.layers):
        assert np.array_equal(a.bits, b.bits)


def test_capture_record_deterministic_dropout_all_ones():
    net = nn.init_network([nn.dense(5, 8), nn.relu(), nn.dropout(0.4),
                           nn.dense(8, 2)], 1)
    x = np.random.default_rng(0).normal(size=(15, 5))
    det = capture_record(net, x, DETERMINISTIC_PASS)
    dropout_gate = [g for g in det.layers if g.layer_kind == "dropout"][0]
    assert np.array_equal(dropout_gate.toarray(), np.ones((15, 8)))


def test_capture_record_analysis_set_size():
    net = nn.init_network(nn.stacked_mlp_spec([4, 6, 3]), 3)
    x = np.random.default_rng(2).normal(size=(2000, 4))
    rec = capture_record(net, x, STOCHASTIC_PASS)
    assert all(g.n == 2000 for g in rec.layers)


def test_capture_record_requires_gating_layer():
    net = nn.init_network([nn.dense(3, 2)], 0)
    with pytest.raises(ValueError):
        capture_record(net, np.ones((2, 3)), STOCHASTIC_PASS)


def test_concat_dimension_is_sum():
    net = nn.init_network(nn.stacked_mlp_spec([4, 6, 5, 3]), 3)
    x = np.random.default_rng(2).normal(size=(10, 4))
    rec = capture_record(net, x, STOCHASTIC_PASS)
    assert rec.concat().D == sum(g.D for g in rec.layers)


def test_gate_dump_roundtrip(tmp_path, rng):
    mats = []
    for li, d in ((1, 7), (3, 16), (5, 21)):
        bits = rng.random((12, d)) < 0.4
        mats.append(GateMatrix.from_dense(li, bits, "relu"))
    rec = gating.GateRecord(layers=tuple(mats), provenance=STOCHASTIC_PASS)
    path = tmp_path / "gates.tcgd"
    save_gate_dump(path, rec)
    back = load_gate_dump(path)
    assert len(back.layers) == 3
    for a, b in zip(rec.layers, back.layers):
        assert a.layer_id == b.layer_id
        assert a.layer_kind == b.layer_kind
        assert np.array_equal(a.bits, b.bits)
        assert (a.n, a.D) == (b.n, b.D)


def test_gate_dump_detects_corruption(tmp_path, rng):
    g = GateMatrix.from_dense(0, rng.random((5, 9)) < 0.5, "dropout")
    path = tmp_path / "g.tcgd"
    save_gate_dump(path, g)
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptFileError):
        load_gate_dump(path)


def test_gate_dump_bad_magic(tmp_path):
    path = tmp_path / "bad.tcgd"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(CorruptFileError):
        load_gate_dump(path)


def test_record_rejects_mismatched_n():
    a = GateMatrix.from_dense(0, np.ones((3, 2), dtype=bool), "relu")
    b = GateMatrix.from_dense(1, np.ones((4, 2), dtype=bool), "relu")
    with pytest.raises(ValueError):
        gating.GateRecord(layers=(a, b), provenance=STOCHASTIC_PASS)
