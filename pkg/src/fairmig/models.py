"""GNN encoders, perceptron heads and the optimizer.

Every component holds a flat ``params`` dict of float64 arrays and exposes
``forward(...) -> (out, cache)`` and ``backward(cache, grad_out)``; gradients
are hand-derived reverse mode and checked against finite differences in the
test suite.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import _accel
from .errors import ContractError, NumericError
from .graph import normalize_adjacency

BACKBONES = ("GCN", "JK", "APPNP")


def _act(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "identity":
        return x
    if name == "sigmoid":
        return _sigmoid(x)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, pre, out, g):
    if name == "relu":
        return g * (pre > 0)
    if name == "identity":
        return g
    if name == "sigmoid":
        return g * out * (1.0 - out)
    raise ValueError(f"unknown activation {name!r}")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _check_finite(arr, **where):
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite activation", **where)


def copy_params(params):
    return {k: v.copy() for k, v in params.items()}


# --------------------------------------------------------------------------
# encoders


class Encoder:
    backbone = None

    def __init__(self, params, **hyper):
        self.params = params
        self.hyper = hyper

    def forward(self, adj, x):
        raise NotImplementedError

    def backward(self, cache, dz):
        raise NotImplementedError

    def __call__(self, adj, x):
        return self.forward(adj, x)[0]

    @property
    def out_dim(self):
        return self.hyper["out_dim"]

    def config(self):
        return {"backbone": self.backbone, **self.hyper}


class GCNEncoder(Encoder):
    backbone = "GCN"

    @classmethod
    def init(cls, rng, in_dim, hidden_dim=16, out_dim=16, n_layers=2, out_act="relu"):
        dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [out_dim]
        params = {}
        for layer in range(n_layers):
            params[f"W{layer}"] = glorot(rng, dims[layer], dims[layer + 1])
            params[f"b{layer}"] = np.zeros(dims[layer + 1])
        return cls(params, in_dim=in_dim, hidden_dim=hidden_dim, out_dim=out_dim,
                   n_layers=n_layers, out_act=out_act)

    def _acts(self):
        n = self.hyper["n_layers"]
        return ["relu"] * (n - 1) + [self.hyper["out_act"]]

    def forward(self, adj, x):
        h = x
        cache = []
        for layer, act in enumerate(self._acts()):
            pre = _accel.spmm(adj, h @ self.params[f"W{layer}"]) + self.params[f"b{layer}"]
            out = _act(act, pre)
            _check_finite(out, layer=layer)
            cache.append((h, pre, out))
            h = out
        return h, (adj, cache)

    def backward(self, cache, dz):
        adj, layers = cache
        grads = {}
        g = dz
        acts = self._acts()
        for layer in reversed(range(len(layers))):
            h_in, pre, out = layers[layer]
            g = _act_grad(acts[layer], pre, out, g)
            grads[f"b{layer}"] = g.sum(axis=0)
            ag = _accel.spmm(adj, g)
            grads[f"W{layer}"] = h_in.T @ ag
            g = ag @ self.params[f"W{layer}"].T
        return grads


class JKEncoder(Encoder):
    """Stacked GCN layers whose outputs are concatenated then projected."""

    backbone = "JK"

    @classmethod
    def init(cls, rng, in_dim, hidden_dim=16, out_dim=16, n_layers=2, out_act="relu"):
        params = {}
        dims = [in_dim] + [hidden_dim] * n_layers
        for layer in range(n_layers):
            params[f"W{layer}"] = glorot(rng, dims[layer], hidden_dim)
            params[f"b{layer}"] = np.zeros(hidden_dim)
        params["W_out"] = glorot(rng, hidden_dim * n_layers, out_dim)
        params["b_out"] = np.zeros(out_dim)
        return cls(params, in_dim=in_dim, hidden_dim=hidden_dim, out_dim=out_dim,
                   n_layers=n_layers, out_act=out_act)

    def forward(self, adj, x, override=None):
        # override: {layer: array} replaces a layer's output (sensitivity probes)
        h = x
        cache = []
        outs = []
        for layer in range(self.hyper["n_layers"]):
            pre = _accel.spmm(adj, h @ self.params[f"W{layer}"]) + self.params[f"b{layer}"]
            out = _act("relu", pre)
            if override and layer in override:
                out = override[layer]
            _check_finite(out, layer=layer)
            cache.append((h, pre))
            outs.append(out)
            h = out
        cat = np.concatenate(outs, axis=1)
        pre_z = cat @ self.params["W_out"] + self.params["b_out"]
        z = _act(self.hyper["out_act"], pre_z)
        _check_finite(z, layer=self.hyper["n_layers"])
        return z, (adj, cache, cat, pre_z, z)

    def backward(self, cache, dz):
        adj, layers, cat, pre_z, z = cache
        hd = self.hyper["hidden_dim"]
        g = _act_grad(self.hyper["out_act"], pre_z, z, dz)
        grads = {"W_out": cat.T @ g, "b_out": g.sum(axis=0)}
        dcat = g @ self.params["W_out"].T
        carry = np.zeros((dz.shape[0], hd))
        for layer in reversed(range(len(layers))):
            h_in, pre = layers[layer]
            gl = (carry + dcat[:, layer * hd:(layer + 1) * hd]) * (pre > 0)
            grads[f"b{layer}"] = gl.sum(axis=0)
            ag = _accel.spmm(adj, gl)
            grads[f"W{layer}"] = h_in.T @ ag
            carry = ag @ self.params[f"W{layer}"].T
        return grads


class APPNPEncoder(Encoder):
    """Two-layer perceptron followed by personalized-PageRank propagation."""

    backbone = "APPNP"

    @classmethod
    def init(cls, rng, in_dim, hidden_dim=16, out_dim=16, n_layers=2, out_act="relu",
             teleport=0.1, iterations=10):
        if not 0.0 < teleport <= 1.0:
            raise ContractError("APPNP teleport must lie in (0, 1]")
        dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [out_dim]
        params = {}
        for layer in range(n_layers):
            params[f"W{layer}"] = glorot(rng, dims[layer], dims[layer + 1])
            params[f"b{layer}"] = np.zeros(dims[layer + 1])
        return cls(params, in_dim=in_dim, hidden_dim=hidden_dim, out_dim=out_dim,
                   n_layers=n_layers, out_act=out_act, teleport=teleport, iterations=iterations)

    def forward(self, adj, x):
        n_layers = self.hyper["n_layers"]
        h = x
        cache = []
        for layer in range(n_layers):
            pre = h @ self.params[f"W{layer}"] + self.params[f"b{layer}"]
            out = _act("relu", pre) if layer < n_layers - 1 else pre
            _check_finite(out, layer=layer)
            cache.append((h, pre))
            h = out
        alpha = self.hyper["teleport"]
        h0 = h
        for _ in range(self.hyper["iterations"]):
            h = (1.0 - alpha) * _accel.spmm(adj, h) + alpha * h0
        _check_finite(h, layer=n_layers)
        z = _act(self.hyper["out_act"], h)
        return z, (adj, cache, h, z)

    def backward(self, cache, dz):
        adj, layers, prop, z = cache
        alpha = self.hyper["teleport"]
        g = _act_grad(self.hyper["out_act"], prop, z, dz)
        dh0 = np.zeros_like(g)
        for _ in range(self.hyper["iterations"]):
            dh0 += alpha * g
            g = (1.0 - alpha) * _accel.spmm(adj, g)
        g = dh0 + g
        grads = {}
        for layer in reversed(range(len(layers))):
            h_in, pre = layers[layer]
            if layer < len(layers) - 1:
                g = g * (pre > 0)
            grads[f"b{layer}"] = g.sum(axis=0)
            grads[f"W{layer}"] = h_in.T @ g
            g = g @ self.params[f"W{layer}"].T
        return grads


ENCODERS = {"GCN": GCNEncoder, "JK": JKEncoder, "APPNP": APPNPEncoder}


def make_encoder(backbone, rng, in_dim, **kw):
    try:
        cls = ENCODERS[backbone.upper()]
    except KeyError:
        raise ContractError(f"unknown backbone {backbone!r}; expected one of {BACKBONES}") from None
    if cls is not APPNPEncoder:
        kw.pop("teleport", None)
        kw.pop("iterations", None)
    return cls.init(rng, in_dim, **kw)


def encode(encoder, adjacency, x):
    """Embeddings from a raw (unnormalized) adjacency."""
    return encoder(normalize_adjacency(adjacency), x)


# --------------------------------------------------------------------------
# heads


class MLP:
    """Row-wise perceptron stack; row i of the output depends only on row i."""

    def __init__(self, params, dims, out_act="identity"):
        self.params = params
        self.dims = list(dims)
        self.out_act = out_act

    @classmethod
    def init(cls, rng, dims, out_act="identity"):
        params = {}
        for layer in range(len(dims) - 1):
            params[f"W{layer}"] = glorot(rng, dims[layer], dims[layer + 1])
            params[f"b{layer}"] = np.zeros(dims[layer + 1])
        return cls(params, dims, out_act)

    def _check(self, z):
        if z.ndim != 2 or z.shape[1] != self.dims[0]:
            raise ContractError(f"expected input with {self.dims[0]} columns, got shape {z.shape}")

    def forward(self, z):
        self._check(z)
        n_layers = len(self.dims) - 1
        h = z
        cache = []
        for layer in range(n_layers):
            pre = h @ self.params[f"W{layer}"] + self.params[f"b{layer}"]
            act = "relu" if layer < n_layers - 1 else self.out_act
            out = _act(act, pre)
            cache.append((h, pre, out, act))
            h = out
        return h, cache

    def backward(self, cache, dout):
        grads = {}
        g = dout
        for layer in reversed(range(len(cache))):
            h_in, pre, out, act = cache[layer]
            g = _act_grad(act, pre, out, g)
            grads[f"b{layer}"] = g.sum(axis=0)
            grads[f"W{layer}"] = h_in.T @ g
            g = g @ self.params[f"W{layer}"].T
        return grads, g

    def __call__(self, z):
        return self.forward(z)[0]

    def config(self):
        return {"dims": self.dims, "out_act": self.out_act}


class SensitiveEstimator:
    """One-layer GCN on the masked attribute matrix with a logistic output."""

    def __init__(self, params, in_dim, sensitive_index):
        self.params = params
        self.in_dim = in_dim
        self.sensitive_index = sensitive_index

    @classmethod
    def init(cls, rng, in_dim, sensitive_index):
        return cls({"W0": glorot(rng, in_dim, 1), "b0": np.zeros(1)}, in_dim, sensitive_index)

    def forward(self, adj, x_masked):
        if np.any(x_masked[:, self.sensitive_index] != 0):
            raise ContractError("estimator input must have the sensitive column zeroed")
        ax = _accel.spmm(adj, x_masked)
        out = _sigmoid(ax @ self.params["W0"] + self.params["b0"])[:, 0]
        return out, (ax, out)

    def backward(self, cache, dout):
        ax, out = cache
        g = (dout * out * (1.0 - out))[:, None]
        return {"W0": ax.T @ g, "b0": g.sum(axis=0)}

    def __call__(self, adj, x_masked):
        return self.forward(adj, x_masked)[0]

    def config(self):
        return {"in_dim": self.in_dim, "sensitive_index": self.sensitive_index}


def decode(decoder, z):
    return decoder(z)


def classify(classifier, z):
    return classifier(z)[:, 0]


def estimate_sensitive(estimator, adjacency, x_masked):
    return estimator(normalize_adjacency(adjacency), x_masked)


def adversary_predict(adversary, z):
    return adversary(z)[:, 0]


@dataclass
class ModelBundle:
    encoder: Encoder
    decoder: MLP
    classifier: MLP
    estimator: SensitiveEstimator
    adversary: MLP

    COMPONENTS = ("encoder", "decoder", "classifier", "estimator", "adversary")

    @classmethod
    def init(cls, rng, in_dim, sensitive_index, backbone="GCN", hidden_dim=16, out_dim=16,
             n_layers=2, out_act="relu", teleport=0.1, iterations=10):
        enc = make_encoder(backbone, rng, in_dim, hidden_dim=hidden_dim, out_dim=out_dim,
                           n_layers=n_layers, out_act=out_act, teleport=teleport,
                           iterations=iterations)
        return cls(
            encoder=enc,
            decoder=MLP.init(rng, [out_dim, in_dim]),
            classifier=MLP.init(rng, [out_dim, 1], "sigmoid"),
            estimator=SensitiveEstimator.init(rng, in_dim, sensitive_index),
            adversary=MLP.init(rng, [out_dim, 1], "sigmoid"),
        )

    def component(self, name):
        return getattr(self, name)

    def snapshot(self, names=COMPONENTS):
        return {n: copy_params(getattr(self, n).params) for n in names}

    def restore(self, snap):
        for n, params in snap.items():
            getattr(self, n).params = copy_params(params)


# --------------------------------------------------------------------------
# optimizer


def init_optimizer_state(params):
    return {"t": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def step(params, grads, state, lr=1e-3, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are not mutated.

    Parameters without an entry in ``grads`` are left untouched, including
    their moment estimates.
    """
    for k, g in grads.items():
        if k not in params:
            raise ContractError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", parameter=k)
    b1, b2 = betas
    t = state["t"] + 1
    new_params = dict(params)
    m = dict(state["m"])
    v = dict(state["v"])
    for k, g in grads.items():
        g = g + weight_decay * params[k] if weight_decay else g
        m[k] = b1 * m[k] + (1.0 - b1) * g
        v[k] = b2 * v[k] + (1.0 - b2) * g * g
        m_hat = m[k] / (1.0 - b1 ** t)
        v_hat = v[k] / (1.0 - b2 ** t)
        new_params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, {"t": t, "m": m, "v": v}


class Adam:
    """Holds optimizer state for one component and applies ``step`` in place."""

    def __init__(self, component, lr=1e-3, weight_decay=1e-5):
        self.component = component
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = init_optimizer_state(component.params)

    def __call__(self, grads, ascend=False):
        if ascend:
            grads = {k: -g for k, g in grads.items()}
        self.component.params, self.state = step(self.component.params, grads, self.state,
                                                 lr=self.lr, weight_decay=self.weight_decay)


def add_grads(*dicts):
    out = {}
    for d in dicts:
        for k, g in d.items():
            out[k] = out[k] + g if k in out else g
    return out


def scale_grads(grads, c):
    return {k: c * g for k, g in grads.items()}


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, bundle, optimizers=None, seed=None, extra=None):
    """npz container: flattened arrays plus a JSON header with shapes and configs."""
    arrays = {}
    header = {"schema_version": CHECKPOINT_VERSION, "seed": seed, "extra": extra or {},
              "components": {}, "optimizers": {}}
    for name in ModelBundle.COMPONENTS:
        comp = getattr(bundle, name)
        header["components"][name] = {"config": comp.config(),
                                      "shapes": {k: list(v.shape) for k, v in comp.params.items()}}
        for k, v in comp.params.items():
            arrays[f"{name}/{k}"] = v
    for name, opt in (optimizers or {}).items():
        header["optimizers"][name] = {"t": opt.state["t"], "lr": opt.lr,
                                      "weight_decay": opt.weight_decay}
        for k in opt.state["m"]:
            arrays[f"opt/{name}/m/{k}"] = opt.state["m"][k]
            arrays[f"opt/{name}/v/{k}"] = opt.state["v"][k]
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Returns ``(bundle, optimizer_states, header)``."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__header__"}

    def params_of(name):
        shapes = header["components"][name]["shapes"]
        return {k: arrays[f"{name}/{k}"].reshape(shapes[k]) for k in shapes}

    comps = header["components"]
    enc_cfg = dict(comps["encoder"]["config"])
    enc_cls = ENCODERS[enc_cfg.pop("backbone")]
    encoder = enc_cls(params_of("encoder"), **enc_cfg)
    mlp = lambda n: MLP(params_of(n), comps[n]["config"]["dims"], comps[n]["config"]["out_act"])  # noqa: E731
    est_cfg = comps["estimator"]["config"]
    bundle = ModelBundle(encoder, mlp("decoder"), mlp("classifier"),
                         SensitiveEstimator(params_of("estimator"), **est_cfg), mlp("adversary"))
    opt_states = {}
    for name, meta in header["optimizers"].items():
        keys = header["components"][name]["shapes"]
        opt_states[name] = {"t": meta["t"],
                            "m": {k: arrays[f"opt/{name}/m/{k}"] for k in keys},
                            "v": {k: arrays[f"opt/{name}/v/{k}"] for k in keys},
                            "lr": meta["lr"], "weight_decay": meta["weight_decay"]}
    return bundle, opt_states, header


def dense(adj):
    return adj.toarray() if sp.issparse(adj) else np.asarray(adj)
