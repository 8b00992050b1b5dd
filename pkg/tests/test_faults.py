import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from gnnrobust.exceptions import ConfigurationError
from gnnrobust.faults import (BitFlipInjector, EmbeddingInjector, FaultSpec, distinct_positions, flip_word,
                              inject_adjacency, inject_matrix, inject_store, toggle_edges)
from gnnrobust.graph import synth_planted_partition
from gnnrobust.models import GNN

from conftest import make_graph


def popcount_diff(a, b):
    x = np.bitwise_xor(np.asarray(a, np.float32).view(np.uint32), np.asarray(b, np.float32).view(np.uint32))
    return int(np.unpackbits(x.view(np.uint8)).sum())


def test_flip_word_examples():
    assert flip_word(1.0, 0x80000000) == -1.0
    assert flip_word(1.0, 1 << 30) == np.inf
    x = np.float32(3.1415927)
    assert flip_word(x, 0).view(np.uint32) == x.view(np.uint32)


def test_inject_matrix_extremes():
    m = np.random.default_rng(0).standard_normal((8, 5)).astype(np.float32)
    out, rep = inject_matrix(m, 0.0, np.random.default_rng(1))
    assert out.tobytes() == m.tobytes() and rep.bits_flipped == 0
    out, rep = inject_matrix(m, 1.0, np.random.default_rng(1))
    np.testing.assert_array_equal(out.view(np.uint32), ~m.view(np.uint32))
    assert rep.bits_flipped == rep.bits_total == 8 * 5 * 32


def test_inject_matrix_leaves_input_and_counts_flips():
    m = np.zeros((100, 100), np.float32)
    before = m.copy()
    out, rep = inject_matrix(m, 1e-3, np.random.default_rng(5))
    np.testing.assert_array_equal(m, before)
    assert popcount_diff(m, out) == rep.bits_flipped
    assert rep.words_affected == int(np.count_nonzero(out.view(np.uint32)))


def test_flip_count_mean_within_three_sigma():
    m = np.zeros(31250, np.float32)  # 10^6 bits
    rng = np.random.default_rng(11)
    counts = [inject_matrix(m, 1e-3, rng)[1].bits_flipped for _ in range(1000)]
    sigma_mean = np.sqrt(1e6 * 1e-3 * (1 - 1e-3)) / np.sqrt(1000)
    assert abs(np.mean(counts) - 1000) < 3 * sigma_mean


def test_determinism_and_site_independence():
    g = synth_planted_partition(40, 2, 0.3, 0.05, 8, 0.3, seed=0)
    m = np.random.default_rng(0).standard_normal((20, 20)).astype(np.float32)
    a, _ = inject_matrix(m, 1e-2, FaultSpec("weights", 1e-2, seed=4).rng())
    b, _ = inject_matrix(m, 1e-2, FaultSpec("weights", 1e-2, seed=4).rng())
    assert a.tobytes() == b.tobytes()
    g1 = inject_adjacency(g, 1e-2, np.random.default_rng(3))
    g2 = inject_adjacency(g, 1e-2, np.random.default_rng(3))
    np.testing.assert_array_equal(g1.indices, g2.indices)
    # adjacency faults never touch features, weight faults never touch the graph
    np.testing.assert_array_equal(g1.features, g.features)
    store = {"w": m}
    inject_store(store, 1e-2, np.random.default_rng(0))
    np.testing.assert_array_equal(store["w"], m)


def test_fault_spec_validation():
    with pytest.raises(ConfigurationError):
        FaultSpec("registers", 1e-3)
    with pytest.raises(ConfigurationError):
        FaultSpec("weights", 2.0)


@given(st.integers(1, 500), st.data())
def test_distinct_positions(total, data):
    count = data.draw(st.integers(0, total))
    pos = distinct_positions(total, count, np.random.default_rng(data.draw(st.integers(0, 99))))
    assert pos.size == count
    assert np.unique(pos).size == count
    assert pos.size == 0 or (pos.min() >= 0 and pos.max() < total)


def test_inject_store_is_one_store():
    store = {"a": np.zeros((3, 3), np.float32), "b": np.zeros(5, np.float32)}
    out, rep = inject_store(store, 1.0, np.random.default_rng(0))
    assert rep.bits_total == 14 * 32
    assert out["b"].shape == (5,)
    assert np.all(out["a"].view(np.uint32) == 0xFFFFFFFF)


def test_adjacency_examples():
    g = make_graph(5, [(0, 1), (2, 3)])
    same = inject_adjacency(g, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(same.indices, g.indices)
    two = make_graph(2, [(0, 1)])
    assert toggle_edges(two, [0], [1]).num_edges == 0
    full = inject_adjacency(make_graph(6, []), 1.0, np.random.default_rng(0))
    assert full.num_edges == 6 * 5 and full.is_symmetric()


def test_adjacency_directed_toggles_single_entry():
    g = make_graph(3, [], directed=True)
    h = toggle_edges(g, [0], [2])
    assert h.neighbors(0).tolist() == [2] and h.neighbors(2).tolist() == []
    full = inject_adjacency(g, 1.0, np.random.default_rng(0))
    assert full.num_edges == 6


def test_adjacency_new_edge_rate():
    g = make_graph(100, [])
    rng = np.random.default_rng(7)
    counts = [inject_adjacency(g, 1e-3, rng).num_edges // 2 for _ in range(500)]
    sigma_mean = np.sqrt(4950 * 1e-3 * (1 - 1e-3)) / np.sqrt(500)
    assert abs(np.mean(counts) - 4.95) < 3 * sigma_mean


def _model_and_graph():
    g = make_graph(6, [(0, 1), (1, 2), (3, 4)], dim=5, seed=1)
    return GNN("gcn", 5, 8, 2, n_layers=2, dropout=0.0, seed=0), g


def test_embedding_hook_fires_once_per_buffer():
    model, g = _model_and_graph()
    inj = EmbeddingInjector(0.0, np.random.default_rng(0)).attach(model)
    out = model.predict_logits(g, hooks=[inj])
    assert inj.fired == 3
    assert out.tobytes() == model.predict_logits(g).tobytes()


def test_embedding_hook_needs_layers():
    class NoLayers:
        n_layers = 0
    with pytest.raises(ConfigurationError):
        EmbeddingInjector(1e-3, np.random.default_rng(0)).attach(NoLayers())


def test_sign_flip_propagates_one_hop():
    g = make_graph(6, [(0, 1), (1, 2), (2, 3), (4, 5)], dim=5, seed=2)
    model = GNN("gcn", 5, 2, 2, n_layers=1, dropout=0.0, seed=3)
    clean = model.predict_logits(g)

    def flip(stage, h):
        if stage == 0:
            h = h.copy()
            h[1, 0] = flip_word(h[1, 0], 0x80000000)
        return h

    faulty = model.predict_logits(g, hooks=[flip])
    changed = np.flatnonzero(np.any(clean != faulty, axis=1))
    assert changed.tolist() == [0, 1, 2]


def test_bitflip_transformer():
    X = np.random.default_rng(0).standard_normal((10, 4)).astype(np.float32)
    t = BitFlipInjector(ber=0.01, seed=3).fit(X)
    a, b = t.transform(X), t.transform(X)
    assert a.tobytes() == b.tobytes()
    assert t.get_params() == {"ber": 0.01, "seed": 3}
    assert BitFlipInjector(ber=0.0).fit_transform(X).tobytes() == X.tobytes()
    with pytest.raises(ConfigurationError):
        BitFlipInjector(ber=-1).fit(X)
