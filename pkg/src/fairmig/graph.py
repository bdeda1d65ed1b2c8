"""Graph data model, dataset ingestion, splits, counterfactual views and
synthetic biased-graph generation."""
from __future__ import annotations

import configparser
import csv
import functools
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, SchemaError, ValidationError

TRAIN, VAL, TEST, UNLABELED = 0, 1, 2, -1
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


@dataclass(eq=False)
class Graph:
    adjacency: sp.csr_matrix
    features: np.ndarray
    sensitive_index: int
    labels: np.ndarray
    split: np.ndarray | None = None
    feature_names: tuple = ()
    name: str = "graph"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=np.int64)
        validate_graph(self)

    @property
    def n_nodes(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def sensitive(self):
        return self.features[:, self.sensitive_index].astype(np.int64)

    @property
    def labeled(self):
        return self.labels != UNLABELED

    @property
    def n_edges(self):
        return self.adjacency.nnz // 2

    @functools.cached_property
    def norm_adj(self):
        return normalize_adjacency(self.adjacency)

    def without_sensitive(self):
        """Attribute matrix with the sensitive column removed."""
        return np.delete(self.features, self.sensitive_index, axis=1)

    def masked_features(self):
        x = self.features.copy()
        x[:, self.sensitive_index] = 0.0
        return x

    def mask(self, which):
        if self.split is None:
            raise ValidationError("graph has no split; call make_splits first")
        return self.split == SPLIT_NAMES[which]


@dataclass(frozen=True)
class CounterfactualViews:
    view0: np.ndarray
    view1: np.ndarray


@dataclass(frozen=True)
class SyntheticSpec:
    n_nodes: int = 2000
    group_fractions: tuple = (0.6, 0.4)
    label_skew_per_group: tuple = (0.8, 0.3)
    homophily: float = 0.8
    feature_dim: int = 8
    sensitive_feature_leakage: float = 0.8
    seed: int = 0
    avg_degree: float = 10.0
    label_signal: float = 0.3

    def __post_init__(self):
        probs = [*self.group_fractions, *self.label_skew_per_group, self.homophily,
                 self.sensitive_feature_leakage]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("synthetic probabilities must lie in [0, 1]")
        if len(self.group_fractions) != 2 or not np.isclose(sum(self.group_fractions), 1.0):
            raise ConfigError("group fractions must be a pair summing to 1")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if self.n_nodes < 10:
            raise ConfigError("n_nodes must be >= 10")
        if self.avg_degree <= 0:
            raise ConfigError("avg_degree must be positive")


def validate_graph(g):
    a = g.adjacency
    n = g.features.shape[0]
    if a.shape != (n, n):
        raise ValidationError(f"adjacency shape {a.shape} does not match {n} nodes")
    if a.nnz:
        if not np.all(a.data == 1):
            raise ValidationError("adjacency entries must be binary")
        if a.diagonal().any():
            raise ValidationError("adjacency must have a zero diagonal")
        if (a != a.T).nnz:
            raise ValidationError("adjacency must be symmetric")
    if not 0 <= g.sensitive_index < g.features.shape[1]:
        raise ValidationError("sensitive_index out of range")
    s = g.features[:, g.sensitive_index]
    if not np.isin(s, (0.0, 1.0)).all():
        raise ValidationError("sensitive column must be binary")
    if g.labels.shape != (n,):
        raise ValidationError("labels must have one entry per node")
    if not np.isin(g.labels, (0, 1, UNLABELED)).all():
        raise ValidationError("labels must be 0, 1 or unlabeled")
    if g.split is not None:
        lab = g.labels != UNLABELED
        if g.split.shape != (n,):
            raise ValidationError("split must have one entry per node")
        if not np.isin(g.split[lab], (TRAIN, VAL, TEST)).all():
            raise ValidationError("every labeled node needs a split tag")
        if (g.split[~lab] != UNLABELED).any():
            raise ValidationError("unlabeled nodes cannot carry a split tag")
        for tag in (TRAIN, VAL, TEST):
            if not (g.split == tag).any():
                raise ValidationError("every split set must be non-empty")


def build_adjacency(n, edges):
    """Undirected, deduplicated, self-loop-free binary CSR adjacency."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        bad = edges[(edges < 0) | (edges >= n)][0]
        raise ValidationError(f"edge endpoint {bad} outside 0..{n - 1}")
    edges = edges[edges[:, 0] != edges[:, 1]]
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    a.sort_indices()
    return a


def normalize_adjacency(adj):
    """D^-1/2 (A + I) D^-1/2 in CSR form."""
    a = sp.csr_matrix(adj, dtype=np.float64) + sp.identity(adj.shape[0], format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    d = sp.diags(1.0 / np.sqrt(deg))
    out = sp.csr_matrix(d @ a @ d)
    out.sort_indices()
    return out


# --------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class DatasetConfig:
    nodes: str
    edges: str
    sensitive: str
    label: str
    sensitive_threshold: float | None = None
    id_column: str | None = None
    name: str = "dataset"


def read_dataset_config(path):
    path = Path(path)
    parser = configparser.ConfigParser()
    parser.read_string("[dataset]\n" + path.read_text())
    sec = parser["dataset"]
    try:
        thr = sec.get("sensitive_threshold")
        return DatasetConfig(
            nodes=str(path.parent / sec.get("nodes", "nodes.csv")),
            edges=str(path.parent / sec.get("edges", "edges.txt")),
            sensitive=sec["sensitive"],
            label=sec["label"],
            sensitive_threshold=float(thr) if thr not in (None, "") else None,
            id_column=sec.get("id_column") or None,
            name=sec.get("name", path.parent.name),
        )
    except KeyError as exc:
        raise SchemaError(f"dataset config missing key {exc}") from None


def load_dataset(path, schema=None):
    """Read a node CSV and an edge list into a Graph.

    ``path`` is either a dataset config file or a directory holding
    ``dataset.cfg``; ``schema`` (a DatasetConfig) overrides the file.
    """
    path = Path(path)
    if schema is None:
        schema = read_dataset_config(path / "dataset.cfg" if path.is_dir() else path)
    with open(schema.nodes, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError("node file is empty")
    header, body = rows[0], rows[1:]
    for col in (schema.sensitive, schema.label, schema.id_column):
        if col is not None and col not in header:
            raise SchemaError(f"node file has no column {col!r}")
    table = np.array(body, dtype=object).reshape(len(body), len(header))
    if schema.id_column is not None:
        ids = table[:, header.index(schema.id_column)].astype(np.int64)
        if sorted(ids.tolist()) != list(range(len(ids))):
            raise ValidationError("node ids must be exactly 0..n-1")
        order = np.argsort(ids)
        table = table[order]
    raw_labels = table[:, header.index(schema.label)]
    labels = np.array([UNLABELED if v.strip() in ("", "-1", "nan", "NaN") else int(float(v))
                       for v in raw_labels], dtype=np.int64)
    feat_cols = [c for c in header if c not in (schema.label, schema.id_column)]
    x = table[:, [header.index(c) for c in feat_cols]].astype(np.float64)
    q = feat_cols.index(schema.sensitive)
    if schema.sensitive_threshold is not None:
        x[:, q] = (x[:, q] > schema.sensitive_threshold).astype(np.float64)
    if not np.isin(x[:, q], (0.0, 1.0)).all():
        raise ValidationError("sensitive column is not binary after binarization")
    n = x.shape[0]
    edges = np.loadtxt(schema.edges, dtype=np.int64, ndmin=2) if Path(schema.edges).stat().st_size else \
        np.zeros((0, 2), dtype=np.int64)
    return Graph(build_adjacency(n, edges), x, q, labels, feature_names=tuple(feat_cols),
                 name=schema.name)


def save_dataset(g, directory, sensitive_threshold=None):
    """Write ``g`` in the node-CSV / edge-list format with a dataset.cfg."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(g.feature_names) or [f"x{j}" for j in range(g.n_features)]
    if not g.feature_names:
        names[g.sensitive_index] = "sensitive"
    with open(directory / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*names, "label"])
        for i in range(g.n_nodes):
            w.writerow([repr(float(v)) for v in g.features[i]] + [int(g.labels[i])])
    upper = sp.triu(g.adjacency, k=1).tocoo()
    with open(directory / "edges.txt", "w") as fh:
        for u, v in zip(upper.row, upper.col):
            fh.write(f"{u} {v}\n")
    lines = [f"name = {g.name}", "nodes = nodes.csv", "edges = edges.txt",
             f"sensitive = {names[g.sensitive_index]}", "label = label"]
    if sensitive_threshold is not None:
        lines.append(f"sensitive_threshold = {sensitive_threshold}")
    (directory / "dataset.cfg").write_text("\n".join(lines) + "\n")
    return directory


# --------------------------------------------------------------------------
# splits and views


def _check_fractions(fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or not np.isclose(sum(fractions), 1.0):
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    return fractions


def make_splits(g, fractions=(0.5, 0.25, 0.25), seed=0):
    """Stratified train/val/test tags over (S, Y) cells; returns a new Graph."""
    f_train, f_val, _ = _check_fractions(fractions)
    rng = np.random.default_rng(seed)
    split = np.full(g.n_nodes, UNLABELED, dtype=np.int64)
    s = g.sensitive
    for sv in (0, 1):
        for yv in (0, 1):
            members = np.flatnonzero((s == sv) & (g.labels == yv))
            m = members.size
            if m == 0:
                continue
            members = rng.permutation(members)
            n_train = max(1, int(round(f_train * m)))
            n_val = int(round(f_val * m))
            if m >= 3:
                n_val = max(1, n_val)
                n_train = min(n_train, m - n_val - 1)
            n_val = min(n_val, m - n_train)
            split[members[:n_train]] = TRAIN
            split[members[n_train:n_train + n_val]] = VAL
            split[members[n_train + n_val:]] = TEST
    return replace(g, split=split)


def counterfactual_views(g):
    x0 = g.features.copy()
    x1 = g.features.copy()
    x0[:, g.sensitive_index] = 0.0
    x1[:, g.sensitive_index] = 1.0
    return CounterfactualViews(x0, x1)


# --------------------------------------------------------------------------
# synthetic generator


def _sample_block(rng, rows, cols, p, same):
    """Bernoulli(p) edges between node sets ``rows`` x ``cols``."""
    if same:
        n_pairs = rows.size * (rows.size - 1) // 2
    else:
        n_pairs = rows.size * cols.size
    m = rng.binomial(n_pairs, min(p, 1.0)) if n_pairs else 0
    if m == 0:
        return np.zeros((0, 2), dtype=np.int64)
    chosen = np.empty((0, 2), dtype=np.int64)
    while chosen.shape[0] < m:
        k = int((m - chosen.shape[0]) * 1.2) + 8
        u = rows[rng.integers(0, rows.size, k)]
        v = cols[rng.integers(0, cols.size, k)]
        cand = np.stack([np.minimum(u, v), np.maximum(u, v)], axis=1)
        cand = cand[cand[:, 0] != cand[:, 1]]
        merged = np.concatenate([chosen, cand])
        _, first = np.unique(merged, axis=0, return_index=True)
        chosen = merged[np.sort(first)]
    return chosen[:m]


def generate_synthetic(spec: SyntheticSpec) -> Graph:
    """Two-group graph with skewed labels, homophilous edges and a proxy feature.

    Column 0 is the sensitive attribute, column 1 a proxy correlated with it at
    ``sensitive_feature_leakage``; the remaining columns carry label signal.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_nodes
    n0 = int(round(spec.group_fractions[0] * n))
    s = np.zeros(n, dtype=np.int64)
    s[rng.permutation(n)[n0:]] = 1
    y = (rng.random(n) < np.asarray(spec.label_skew_per_group)[s]).astype(np.int64)

    p_bar = spec.avg_degree / (n - 1)
    p_in = 2.0 * spec.homophily * p_bar
    p_out = 2.0 * (1.0 - spec.homophily) * p_bar
    g0, g1 = np.flatnonzero(s == 0), np.flatnonzero(s == 1)
    edges = np.concatenate([
        _sample_block(rng, g0, g0, p_in, True),
        _sample_block(rng, g1, g1, p_in, True),
        _sample_block(rng, g0, g1, p_out, False),
    ])

    x = np.empty((n, spec.feature_dim))
    x[:, 0] = s
    p1 = s.mean()
    z_s = (s - p1) / np.sqrt(p1 * (1 - p1)) if 0 < p1 < 1 else np.zeros(n)
    rho = spec.sensitive_feature_leakage
    x[:, 1] = rho * z_s + np.sqrt(1.0 - rho ** 2) * rng.standard_normal(n)
    if spec.feature_dim > 2:
        k = spec.feature_dim - 2
        x[:, 2:] = spec.label_signal * (2 * y - 1)[:, None] + rng.standard_normal((n, k))
    names = ("sensitive", "proxy", *(f"f{j}" for j in range(spec.feature_dim - 2)))
    return Graph(build_adjacency(n, edges), x, 0, y, feature_names=names, name="synthetic")


def edge_rates(g, groups=None):
    """(within-group, cross-group) edge probability per node pair."""
    s = g.sensitive if groups is None else np.asarray(groups)
    coo = sp.triu(g.adjacency, k=1).tocoo()
    same = s[coo.row] == s[coo.col]
    n0, n1 = int((s == 0).sum()), int((s == 1).sum())
    pairs_in = n0 * (n0 - 1) // 2 + n1 * (n1 - 1) // 2
    pairs_out = n0 * n1
    return same.sum() / max(pairs_in, 1), (~same).sum() / max(pairs_out, 1)
