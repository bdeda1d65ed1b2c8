import numpy as np
import pytest

from fairmig.graph import Graph, build_adjacency, make_splits


def random_graph(rng, n=8, n_features=4, p_edge=0.35, sensitive_index=0, split=False):
    """Small random graph with both groups and both labels present."""
    while True:
        iu = np.triu_indices(n, 1)
        keep = rng.random(iu[0].size) < p_edge
        edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
        x = rng.standard_normal((n, n_features))
        s = rng.integers(0, 2, n)
        y = rng.integers(0, 2, n)
        if min(np.bincount(s, minlength=2)) >= 2 and min(np.bincount(y, minlength=2)) >= 2:
            break
    x[:, sensitive_index] = s
    g = Graph(build_adjacency(n, edges), x, sensitive_index, y)
    return make_splits(g, seed=int(rng.integers(1 << 30))) if split else g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
