import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sstats

from gnnrobust import autodiff as ad
from gnnrobust.aggregators import (KINDS, AggregatorConfig, LayerStats, Neighborhood, aggregate, aggregate_layer,
                                   cosine_prune, distribution_aggregate, dynamic_weights, median_aggregate,
                                   soft_median_aggregate, trimmed_mean_aggregate)
from gnnrobust.aggregators.reference import activation_clip, cosine_similarity
from gnnrobust.exceptions import ConfigurationError, ShapeError
from gnnrobust.faults import toggle_edges
from gnnrobust.graph import synth_planted_partition
from gnnrobust.models import GNN, ForwardTrace
from gnnrobust.trainer import calibrate

from conftest import make_graph, numeric_grad

ALL_KINDS = [k for k in KINDS]


# --- per-target definitions --------------------------------------------------

def test_basic_examples():
    np.testing.assert_allclose(aggregate("mean", [[1, 2], [3, 4]], [0, 0]), [2, 3])
    assert median_aggregate([[1], [2], [100]])[0] == 2
    assert median_aggregate([[1], [3]])[0] == 2
    assert trimmed_mean_aggregate([[1], [2], [100]], 1 / 3)[0] == 2
    assert activation_clip([[-5], [0.5], [9]], 0.0, 1.0)[0] == pytest.approx(0.5)


def test_distribution_examples():
    out, discarded = distribution_aggregate([[0.5], [2.9], [3.5], [-4]], 0.0, 1.0, 3, 3)
    assert out[0] == pytest.approx(1.7) and discarded == 2
    rows = np.random.default_rng(0).standard_normal((7, 3))
    wide, d = distribution_aggregate(rows, 0.0, 1.0, 1e9, 1e9)
    np.testing.assert_allclose(wide, rows.mean(0), atol=1e-12)
    assert d == 0
    out, _ = distribution_aggregate([[np.inf], [np.nan], [1.0]], 0.0, 1e30, 1e9, 1e9)
    assert out[0] == 1.0


def test_distribution_gaussian_discard_rate():
    x = np.random.default_rng(0).standard_normal((1_000_000, 1))
    _, discarded = distribution_aggregate(x, 0.0, 1.0, 3, 3)
    assert abs(discarded / x.size - 2 * sstats.norm.cdf(-3)) < 1e-3


def test_dynamic_weight_examples():
    w = dynamic_weights([[0.0, 0.0], [1.0, math.sqrt(2.0)], [np.nan, 0.0]], [0.0, 0.0])
    np.testing.assert_allclose(w, [1.0, 0.25, 0.0])
    rows = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])  # all at distance 1 from origin
    np.testing.assert_allclose(aggregate("dynamic_weight", rows, [0, 0], center=[0, 0]), rows.mean(0))


def test_soft_median_examples():
    rows = np.array([[0.0], [1.0], [10.0]])
    assert soft_median_aggregate(rows, 1e-6)[0] == pytest.approx(1.0)
    same = np.tile([[2.0, -1.0]], (4, 1))
    np.testing.assert_allclose(soft_median_aggregate(same, 1.0), [2.0, -1.0])
    np.testing.assert_allclose(soft_median_aggregate([[3.0, 4.0]], 1.0), [3.0, 4.0])


def test_cosine_similarity_examples():
    assert cosine_similarity([1.0, 0.0], [[0.0, 1.0]])[0] == 0.0
    v = np.random.default_rng(3).standard_normal(16)
    assert cosine_similarity(v, [v])[0] == 1.0
    assert cosine_similarity([0.0, 0.0], [[1.0, 1.0]])[0] == 0.0
    out = aggregate("cosine:alpha=0.5", [[0.0, 1.0], [2.0, 0.0]], [1.0, 0.0])
    np.testing.assert_allclose(out, [2.0, 0.0])
    # every neighbor pruned -> own embedding
    np.testing.assert_allclose(aggregate("cosine:alpha=0.5", [[0.0, 1.0]], [1.0, 0.0]), [1.0, 0.0])


def test_empty_neighborhood_falls_back_to_self():
    st_ = LayerStats.from_samples(np.random.default_rng(0).standard_normal((10, 2)))
    for kind in ALL_KINDS:
        out = aggregate(kind, np.zeros((0, 2)), [3.0, -1.0], stats=st_, center=[0, 0])
        np.testing.assert_allclose(out, [3.0, -1.0], err_msg=kind)


def test_errors():
    with pytest.raises(ShapeError):
        aggregate("mean", np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ConfigurationError):
        aggregate("distribution", np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ConfigurationError):
        aggregate("dynamic_weight", np.zeros((2, 2)), np.zeros(2))
    for bad in ("nope", "distribution:a=0", "trimmed_mean:beta=0.5", "soft_median:temperature=0",
                "cosine:alpha=2", "mean:bogus=1"):
        with pytest.raises(ConfigurationError):
            AggregatorConfig.parse(bad)
    with pytest.raises(ConfigurationError):
        LayerStats.from_samples(np.zeros((1, 3)))


def test_config_parse_roundtrip():
    cfg = AggregatorConfig.parse("distribution:a=2.5,b=4")
    assert (cfg.kind, cfg.a, cfg.b) == ("distribution", 2.5, 4.0)
    assert AggregatorConfig.parse(cfg.to_string()) == cfg
    assert AggregatorConfig.parse("mean").to_string() == "mean"


def test_stats_examples():
    s = LayerStats.from_samples(np.full((5, 2), 3.0))
    np.testing.assert_array_equal(s.sigma, [0.0, 0.0])
    s = LayerStats.from_samples(np.array([[0.0], [2.0]]))
    assert s.mu[0] == 1.0 and s.sigma[0] == pytest.approx(math.sqrt(2.0))


# --- vectorized layer vs per-target definitions -------------------------------

def random_case(seed, n=12, dim=3, p=0.35, nan_rows=0):
    rng = np.random.default_rng(seed)
    edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    g = make_graph(n, edges, dim=dim, seed=seed)
    H = g.features.astype(np.float32).copy()
    if nan_rows:
        H[rng.choice(n, nan_rows, replace=False)] = np.nan
    stats = LayerStats.from_samples(rng.standard_normal((50, dim)) * 0.8)
    center = rng.standard_normal((1, dim)).astype(np.float32) * 0.3
    scalars = np.array([[0.5, -0.2, 0.7]], np.float32)
    return g, H, stats, center, scalars


def layer_output(kind, g, H, stats, center, scalars, track=False):
    nb = Neighborhood.plain(g)
    Ht = ad.Tensor(H, requires_grad=track)
    res = aggregate_layer(kind, Ht, nb, stats=stats, center=ad.Tensor(center, requires_grad=track),
                          scalars=ad.Tensor(scalars, requires_grad=track))
    return res.out.value, res.discarded, res.total


def reference_output(kind, g, H, stats, center, scalars):
    rows, discarded = [], 0
    for v in range(g.num_nodes):
        out, d = aggregate(kind, H[g.neighbors(v)], H[v], stats=stats, center=center, scalars=scalars,
                           return_discarded=True)
        rows.append(out)
        discarded += d
    return np.array(rows), discarded


@pytest.mark.parametrize("kind", ALL_KINDS + ["trimmed_mean:beta=0.3", "cosine:alpha=0.3",
                                              "soft_median:temperature=0.2", "distribution:a=1,b=0.5"])
@pytest.mark.parametrize("seed", range(4))
def test_layer_matches_reference(kind, seed):
    g, H, stats, center, scalars = random_case(seed)
    ref, ref_disc = reference_output(kind, g, H, stats, center, scalars)
    for track in (False, True):
        out, disc, total = layer_output(kind, g, H, stats, center, scalars, track)
        np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5, err_msg=f"{kind} track={track}")
        assert disc == ref_disc
        assert total == g.num_edges * H.shape[1] * (2 if kind == "combined" else 1)


@pytest.mark.parametrize("kind", ["mean", "max", "median", "trimmed_mean", "soft_median", "distribution",
                                  "dynamic_weight", "cosine", "activation_clip"])
def test_layer_matches_reference_with_nan_rows(kind):
    g, H, stats, center, scalars = random_case(7, n=15, p=0.4, nan_rows=2)
    ref, _ = reference_output(kind, g, H, stats, center, scalars)
    for track in (False, True):
        out, _, _ = layer_output(kind, g, H, stats, center, scalars, track)
        np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5, err_msg=kind)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_relabeling_invariance(kind):
    g, H, stats, center, scalars = random_case(3, n=10, p=0.5)
    perm = np.random.default_rng(0).permutation(g.num_nodes)  # new id of old node i is perm[i]
    src, dst = g.edge_index()
    gp = make_graph(g.num_nodes, list(zip(perm[src], perm[dst])), dim=H.shape[1])
    Hp = np.empty_like(H)
    Hp[perm] = H
    out, _, _ = layer_output(kind, g, H, stats, center, scalars)
    outp, _, _ = layer_output(kind, gp, Hp, stats, center, scalars)
    np.testing.assert_allclose(outp[perm], out, rtol=1e-6, atol=1e-6)


@given(st.integers(1, 9), st.integers(0, 10_000), st.sampled_from(ALL_KINDS))
def test_neighbor_order_invariance(n, seed, kind):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((n, 3))
    target = rng.standard_normal(3)
    stats = LayerStats.from_samples(rng.standard_normal((20, 3)))
    kw = dict(stats=stats, center=rng.standard_normal(3), scalars=[0.2, 0.3, 0.5])
    a = aggregate(kind, rows, target, **kw)
    b = aggregate(kind, rows[rng.permutation(n)], target, **kw)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)


@given(st.integers(1, 9), st.integers(0, 10_000))
def test_robust_kinds_bounded_by_inputs(n, seed):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((n, 4)) * 3
    target = rng.standard_normal(4)
    # calibration covering the inputs: clipping is then the identity
    stats = LayerStats.from_samples(np.vstack([rows, target, rng.standard_normal((10, 4))]))
    lo = np.minimum(rows.min(0), target)
    hi = np.maximum(rows.max(0), target)
    for kind in ("median", "trimmed_mean", "distribution", "activation_clip"):
        out = aggregate(kind, rows, target, stats=stats)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12), kind


def test_activation_clip_bounded_by_clipped_inputs():
    rows = np.array([[5.0], [6.0], [9.0]])
    stats = LayerStats(np.zeros(1, np.float32), np.ones(1, np.float32), np.full(1, -1.0, np.float32),
                       np.ones(1, np.float32), 10)
    assert aggregate("activation_clip", rows, [0.0], stats=stats)[0] == 1.0


@given(st.lists(st.lists(st.integers(-50, 50), min_size=2, max_size=2), min_size=1, max_size=11),
       st.sampled_from([0.0, 0.1, 0.2, 0.34, 0.49]))
def test_median_and_trimmed_equal_full_sort(values, beta):
    rows = np.array(values, dtype=np.float64)
    n = rows.shape[0]
    g = make_graph(n + 1, [(0, v) for v in range(1, n + 1)], features=np.vstack([[0, 0], rows]))
    nb = Neighborhood.plain(g)
    med = aggregate_layer("median", g.features, nb).out.value[0]
    trim = aggregate_layer(f"trimmed_mean:beta={beta}", g.features, nb).out.value[0]
    t = int(math.floor(beta * n + 1e-9))
    for j in range(2):
        col = sorted(values[i][j] for i in range(n))
        assert med[j] == (col[(n - 1) // 2] + col[n // 2]) / 2
        kept = col[t:n - t]
        assert trim[j] == pytest.approx(sum(kept) / len(kept), rel=1e-6, abs=1e-6)


def star(d, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((d + 1, dim)).astype(np.float32)
    feats[1] = np.nan
    return make_graph(d + 1, [(0, v) for v in range(1, d + 1)], features=feats)


@pytest.mark.parametrize("d", range(3, 11))
def test_nan_containment(d):
    g = star(d, seed=d)
    nb = Neighborhood.plain(g)
    clean = np.delete(g.features, 1, axis=0)
    stats = LayerStats.from_samples(clean)
    center = ad.Tensor(np.nanmean(clean, axis=0, keepdims=True))
    for kind in ("distribution", "dynamic_weight", "median", f"trimmed_mean:beta={1 / d}", "soft_median"):
        out = aggregate_layer(kind, g.features, nb, stats=stats, center=center).out.value[0]
        assert not np.isnan(out).any(), (kind, d)
    assert np.isnan(aggregate_layer("mean", g.features, nb).out.value[0]).any()


# --- degenerate reductions --------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_degenerate_reductions(seed):
    g, H, stats, center, _ = random_case(seed, n=14, p=0.4)
    nb = Neighborhood.plain(g)
    mean = aggregate_layer("mean", H, nb).out.value
    wide = aggregate_layer("distribution:a=1e9,b=1e9", H, nb, stats=stats).out.value
    np.testing.assert_allclose(wide, mean, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(aggregate_layer("trimmed_mean:beta=0", H, nb).out.value, mean, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(aggregate_layer("cosine:alpha=-1", H, nb).out.value, mean, rtol=1e-6, atol=1e-6)
    for s, kind in (((1, 0, 0), "distribution"), ((0, 1, 0), "dynamic_weight"), ((0, 0, 1), "cosine")):
        comb = aggregate_layer("combined", H, nb, stats=stats, center=center,
                               scalars=np.array([s], np.float32)).out.value
        single = aggregate_layer(kind, H, nb, stats=stats, center=center).out.value
        np.testing.assert_allclose(comb, single, rtol=1e-6, atol=1e-6)


def test_dynamic_equal_distances_is_mean():
    # every row on the unit sphere around the center
    rng = np.random.default_rng(0)
    v = rng.standard_normal((10, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    g = make_graph(10, [(i, j) for i in range(10) for j in range(i + 1, 10) if (i + j) % 3], features=v)
    nb = Neighborhood.plain(g)
    dyn = aggregate_layer("dynamic_weight", g.features, nb, center=np.zeros((1, 3), np.float32)).out.value
    np.testing.assert_allclose(dyn, aggregate_layer("mean", g.features, nb).out.value, atol=1e-6)


# --- cosine pruning ---------------------------------------------------------

def test_cosine_prunes_spurious_edges_only():
    g = synth_planted_partition(200, 2, 0.1, 0.0, 32, 0.0, seed=0)
    rng = np.random.default_rng(0)
    spurious = set()
    while len(spurious) < 50:
        u, v = int(rng.integers(0, 100)), int(rng.integers(100, 200))
        spurious.add((u, v))
    rows, cols = zip(*spurious)
    noisy = toggle_edges(g, rows, cols)
    kept = cosine_prune(noisy, noisy.features, 0.5)
    for u, v in spurious:
        assert v not in kept[u] and u not in kept[v]
    for v in range(200):
        assert set(kept[v]) == set(g.neighbors(v).tolist())
    # the stored graph is untouched
    assert noisy.num_edges == g.num_edges + 100


def test_gcn_cosine_keeps_self_loop():
    g = make_graph(3, [(0, 1), (1, 2)], features=np.array([[1, 0], [0, 1], [1, 0]], np.float32))
    nb = Neighborhood.gcn(g)
    out = aggregate_layer("cosine:alpha=0.5", g.features, nb)
    # every cross edge is orthogonal: each node only keeps itself
    np.testing.assert_allclose(out.out.value, g.features)
    assert out.discarded == 4 * 2


# --- trim accounting ----------------------------------------------------------

def circulant(n, half):
    return make_graph(n, [(i, (i + k) % n) for i in range(n) for k in range(1, half + 1)], dim=8)


def test_trimmed_fraction_degree_ten():
    g = circulant(30, 5)
    assert np.all(g.degrees() == 10)
    res = aggregate_layer("trimmed_mean:beta=0.1", g.features, Neighborhood.plain(g))
    assert res.discarded / res.total == pytest.approx(0.2)
    assert aggregate_layer("mean", g.features, Neighborhood.plain(g)).discarded == 0


def test_distribution_trim_rate_on_clean_data():
    g = synth_planted_partition(400, 2, 0.05, 0.005, 64, 1.0, seed=1)
    stats = LayerStats.from_samples(g.features)
    res = aggregate_layer("distribution", g.features, Neighborhood.plain(g), stats=stats)
    assert res.discarded / res.total < 0.01


def test_calibrated_first_layer_inputs_are_near_gaussian():
    g = synth_planted_partition(400, 2, 0.05, 0.005, 64, 0.5, seed=1)
    model = GNN("gcn", 64, 16, 2, aggregator="distribution", seed=0)
    stats = calibrate(model, g)
    trace = ForwardTrace()
    model.fitting = True
    model.predict_logits(g, trace=trace)
    first = trace.layer_inputs[0][:, 0]
    assert abs(sstats.skew(first)) < 1
    assert stats[0].mu[0] == pytest.approx(first.mean(), abs=1e-6)


# --- gradients ----------------------------------------------------------------

def test_dynamic_weight_center_gradient():
    g, H, stats, center, _ = random_case(2, n=10, p=0.5)
    H = H.astype(np.float64)
    c = center.astype(np.float64)
    nb = Neighborhood.plain(g)
    coef = np.random.default_rng(0).standard_normal(H.shape)

    def loss(ct):
        out = aggregate_layer("dynamic_weight", ad.Tensor(H, dtype=np.float64), nb, center=ct).out
        return ad.sum_(ad.mul(out, coef))

    ct = ad.Tensor(c, requires_grad=True, dtype=np.float64)
    grad = ad.backward(loss(ct), [ct])[ct]
    num = numeric_grad(lambda: float(loss(ad.Tensor(c, dtype=np.float64)).value), c)
    np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-8)
    assert np.linalg.norm(grad) > 0


def test_combined_scalar_gradient():
    g, H, stats, center, _ = random_case(5, n=10, p=0.5)
    H = H.astype(np.float64)
    s = np.array([[0.4, 0.3, 0.3]])
    nb = Neighborhood.plain(g)
    coef = np.random.default_rng(1).standard_normal(H.shape)

    def loss(st_):
        out = aggregate_layer("combined", ad.Tensor(H, dtype=np.float64), nb, stats=stats,
                              center=ad.Tensor(center, dtype=np.float64), scalars=st_).out
        return ad.sum_(ad.mul(out, coef))

    t = ad.Tensor(s, requires_grad=True, dtype=np.float64)
    grad = ad.backward(loss(t), [t])[t]
    num = numeric_grad(lambda: float(loss(ad.Tensor(s, dtype=np.float64)).value), s)
    np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("kind", ["mean", "median", "trimmed_mean", "distribution", "dynamic_weight",
                                  "cosine", "soft_median", "max", "activation_clip"])
def test_embedding_gradients(kind):
    g, H, stats, center, _ = random_case(9, n=8, p=0.6)
    H = H.astype(np.float64)
    nb = Neighborhood.plain(g)
    coef = np.random.default_rng(2).standard_normal(H.shape)
    cen = ad.Tensor(center, dtype=np.float64)

    def loss(Ht):
        out = aggregate_layer(kind, Ht, nb, stats=stats, center=cen).out
        return ad.sum_(ad.mul(out, coef))

    Ht = ad.Tensor(H, requires_grad=True, dtype=np.float64)
    grad = ad.backward(loss(Ht), [Ht])[Ht]
    num = numeric_grad(lambda: float(loss(ad.Tensor(H, dtype=np.float64)).value), H, eps=1e-7)
    np.testing.assert_allclose(grad, num, rtol=1e-4, atol=1e-6)
