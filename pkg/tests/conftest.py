import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gnnrobust.graph import Graph, csr_from_edges

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_graph(n, edges, features=None, labels=None, num_classes=2, directed=False, dim=4, seed=0,
               masks=None):
    """Small graph helper; every node is in train unless masks are given."""
    rng = np.random.default_rng(seed)
    src = [u for u, _ in edges]
    dst = [v for _, v in edges]
    indptr, indices = csr_from_edges(n, src, dst, directed)
    if features is None:
        features = rng.standard_normal((n, dim)).astype(np.float32)
    if labels is None:
        labels = np.arange(n) % num_classes
    if masks is None:
        masks = (np.ones(n, bool), np.zeros(n, bool), np.zeros(n, bool))
    return Graph(features, indptr, indices, labels, *masks, num_classes=num_classes, directed=directed)


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f()`` with respect to array ``x`` (edited in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
