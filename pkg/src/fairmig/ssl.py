"""Self-supervised stage: counterfactual contrastive and personalized
reconstruction losses, group prototypes, outlier migration and reweighting."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import _accel
from .errors import ConfigError, ContractError, MigrationDegeneracyError, NumericError
from .graph import counterfactual_views
from .models import Adam, add_grads

log = logging.getLogger(__name__)

EPS = 1e-12
TRACE_COLUMNS = ("epoch", "mu0", "sigma0", "mu1", "sigma1", "n_flips_0to1", "n_flips_1to0",
                 "n_skipped")


@dataclass(frozen=True)
class GroupStats:
    count: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class MigrationState:
    P: np.ndarray
    T: np.ndarray | None = None
    Q: np.ndarray | None = None
    group_stats: GroupStats | None = None
    O: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    frozen: bool = False
    min_group_size: int = 2
    history: list = field(default_factory=list)

    @classmethod
    def start(cls, s, min_group_size=None):
        s = np.asarray(s, dtype=np.int64)
        if min_group_size is None:
            min_group_size = default_min_group_size(s.size)
        return cls(P=s.copy(), min_group_size=min_group_size)

    def freeze(self):
        return replace(self, P=self.P.copy(), frozen=True, history=list(self.history))

    def p_hash(self):
        return hashlib.sha256(np.ascontiguousarray(self.P).tobytes()).hexdigest()


def default_min_group_size(n):
    return int(max(2, int(np.ceil(0.01 * n))))


def cosine_rows(a, b):
    """Row-wise guarded cosine similarity."""
    return _accel.row_cosine(a, b, EPS)[0]


# --------------------------------------------------------------------------
# losses


def contrastive_loss(z0, z1, w, perm):
    """Reweighted counterfactual contrastive loss.

    Returns ``(loss, dz0, dz1)``.
    """
    n = z0.shape[0]
    perm = np.asarray(perm)
    z1p = z1[perm]
    c, na, nb, la, lb = _accel.row_cosine(z0, z1, EPS)
    cs, nas, nbs, las, lbs = _accel.row_cosine(z0, z1p, EPS)
    loss = float(np.sum(w * ((1.0 - c) + cs)) / n)
    da, db = _accel.row_cosine_backward(z0, z1, c, na, nb, la, lb, -w / n)
    das, dbs = _accel.row_cosine_backward(z0, z1p, cs, nas, nbs, las, lbs, w / n)
    dz0 = da + das
    dz1 = db
    dz1[perm] += dbs
    return loss, dz0, dz1


def reconstruction_loss(x, x_rec, q, w):
    """Personalized reconstruction loss; returns ``(loss, dx_rec)``.

    Non-sensitive columns use a per-row mean squared error; the reconstructed
    sensitive column is pulled toward both 0 and 1.
    """
    if x.shape != x_rec.shape:
        raise ContractError(f"reconstruction shape {x_rec.shape} != {x.shape}")
    n, k = x.shape
    keep = np.ones(k, dtype=bool)
    keep[q] = False
    diff = x_rec - x
    diff[:, q] = 0.0
    n_u = k - 1
    mse_u = (diff ** 2).sum(axis=1) / n_u if n_u else np.zeros(n)
    s_rec = x_rec[:, q]
    sens = s_rec ** 2 + (s_rec - 1.0) ** 2
    loss = float(np.sum(w * (mse_u + sens)) / n)
    grad = np.zeros_like(x_rec)
    if n_u:
        grad[:, keep] = (w / n * 2.0 / n_u)[:, None] * diff[:, keep]
    grad[:, q] = w / n * (4.0 * s_rec - 2.0)
    return loss, grad


def ssl_loss(l_con, l_rec, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * l_con + (1.0 - alpha) * l_rec


def reweight(s):
    """Per-node weight max group size / own raw-group size."""
    s = np.asarray(s, dtype=np.int64)
    counts = np.bincount(s, minlength=2)
    if counts.size != 2 or counts.min() == 0:
        raise ConfigError("both sensitive groups must be non-empty to reweight")
    return counts.max() / counts[s]


# --------------------------------------------------------------------------
# prototypes and migration


def group_prototypes(z, p):
    p = np.asarray(p, dtype=np.int64)
    counts = np.bincount(p, minlength=2)
    if counts.min() == 0:
        raise MigrationDegeneracyError(f"empty pseudo-group (sizes {counts.tolist()})")
    return _accel.group_sums(z, p, 2)


def group_similarities(z, t, p):
    """Cosine of each node to its own group's prototype plus per-group (mu, sigma)."""
    p = np.asarray(p, dtype=np.int64)
    q = cosine_rows(z, t[p])
    counts, mu, sigma = _accel.group_mean_std(q, p, 2)
    return q, GroupStats(counts, mu, sigma)


def group_similarity_stats(z, groups):
    t = group_prototypes(z, groups)
    return group_similarities(z, t, groups)[1]


def detect_outliers(q, stats, p):
    p = np.asarray(p, dtype=np.int64)
    threshold = stats.mu[p] - 2.0 * stats.sigma[p]
    return np.flatnonzero(q < threshold)


def migrate_groups(state, outliers, epoch=None, stats=None):
    """Flip the pseudo-group of each outlier, skipping flips that would shrink
    a group below ``state.min_group_size``. Returns a new state."""
    if state.frozen:
        raise ContractError("pseudo-groups are frozen; migration is not allowed")
    p = state.P.copy()
    counts = np.bincount(p, minlength=2)
    flips = np.zeros(2, dtype=np.int64)
    skipped = 0
    for i in np.sort(np.asarray(outliers, dtype=np.int64)):
        g = p[i]
        if counts[g] - 1 < state.min_group_size:
            skipped += 1
            continue
        p[i] = 1 - g
        counts[g] -= 1
        counts[1 - g] += 1
        flips[g] += 1
    stats = stats if stats is not None else state.group_stats
    mu = stats.mu if stats is not None else np.full(2, np.nan)
    sigma = stats.sigma if stats is not None else np.full(2, np.nan)
    record = {"epoch": len(state.history) if epoch is None else epoch,
              "mu0": float(mu[0]), "sigma0": float(sigma[0]),
              "mu1": float(mu[1]), "sigma1": float(sigma[1]),
              "n_flips_0to1": int(flips[0]), "n_flips_1to0": int(flips[1]),
              "n_skipped": int(skipped)}
    return replace(state, P=p, O=np.asarray(outliers, dtype=np.int64),
                   history=state.history + [record])


def migration_loss(z, t, p, outliers, w):
    """Mean weighted (1 - cos) between each outlier and the opposite prototype.

    Prototypes are constants. Returns ``(loss, dz)``; zero when there are no outliers.
    """
    dz = np.zeros_like(z)
    outliers = np.asarray(outliers, dtype=np.int64)
    if outliers.size == 0:
        return 0.0, dz
    zo = z[outliers]
    target = t[1 - np.asarray(p)[outliers]]
    wo = np.asarray(w)[outliers]
    c, na, nb, la, lb = _accel.row_cosine(zo, target, EPS)
    m = outliers.size
    loss = float(np.sum(wo * (1.0 - c)) / m)
    dzo, _ = _accel.row_cosine_backward(zo, target, c, na, nb, la, lb, -wo / m)
    dz[outliers] = dzo
    return loss, dz


def migration_round(z, p):
    """Prototypes, similarities and outliers for embedding ``z`` under groups ``p``."""
    t = group_prototypes(z, p)
    q, stats = group_similarities(z, t, p)
    return t, q, stats, detect_outliers(q, stats, p)


def migrate_until_stable(z, state, max_rounds=50):
    """Repeat detect/migrate on a fixed embedding.

    Returns ``(state, status, rounds)`` with status ``"fixed_point"``,
    ``"cycle"`` or ``"max_rounds"``.
    """
    seen = {state.p_hash()}
    for r in range(1, max_rounds + 1):
        t, q, stats, outliers = migration_round(z, state.P)
        new = migrate_groups(replace(state, T=t, Q=q, group_stats=stats), outliers, stats=stats)
        if np.array_equal(new.P, state.P):
            return new, "fixed_point", r
        key = new.p_hash()
        state = new
        if key in seen:
            return state, "cycle", r
        seen.add(key)
    return state, "max_rounds", max_rounds


def derangement(rng, n):
    """Seeded permutation with no fixed point when possible; never the identity."""
    if n < 2:
        return np.arange(n)
    for _ in range(100):
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm
    while True:
        perm = rng.permutation(n)
        if not np.array_equal(perm, np.arange(n)):
            return perm


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SSLConfig:
    alpha: float = 0.6
    gamma: float = 0.6
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-5
    migrate: bool = True
    migration_every: int = 1
    reweight: bool = True
    min_group_size: int | None = None

    def __post_init__(self):
        for name in ("alpha", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.epochs < 0 or self.migration_every < 1:
            raise ConfigError("epochs must be >= 0 and migration_every >= 1")


@dataclass
class SSLResult:
    state: MigrationState
    losses: list


def ssl_stage_train(g, bundle, cfg, rng):
    """Pretrain encoder and decoder; returns an SSLResult with frozen pseudo-groups."""
    adj = g.norm_adj
    x = g.features
    views = counterfactual_views(g)
    q_idx = g.sensitive_index
    s = g.sensitive
    w = reweight(s) if cfg.reweight else np.ones(g.n_nodes)
    state = MigrationState.start(s, cfg.min_group_size)
    enc_opt = Adam(bundle.encoder, cfg.lr, cfg.weight_decay)
    dec_opt = Adam(bundle.decoder, cfg.lr, cfg.weight_decay)
    losses = []
    for epoch in range(cfg.epochs):
        try:
            z, cache = bundle.encoder.forward(adj, x)
            z0, cache0 = bundle.encoder.forward(adj, views.view0)
            z1, cache1 = bundle.encoder.forward(adj, views.view1)
        except NumericError as exc:
            raise NumericError(str(exc), epoch=epoch) from exc
        perm = derangement(rng, g.n_nodes)
        l_con, dz0, dz1 = contrastive_loss(z0, z1, w, perm)
        x_rec, dec_cache = bundle.decoder.forward(z)
        l_rec, dx_rec = reconstruction_loss(x, x_rec, q_idx, w)
        l_ssl = ssl_loss(l_con, l_rec, cfg.alpha)

        t, q, stats, outliers = migration_round(z, state.P)
        state = replace(state, T=t, Q=q, group_stats=stats)
        if cfg.migrate:
            l_mig, dz_mig = migration_loss(z, t, state.P, outliers, w)
        else:
            outliers = outliers[:0]
            l_mig, dz_mig = 0.0, None
        total = l_mig + cfg.gamma * l_ssl
        if not np.isfinite(total):
            raise NumericError("non-finite pretraining loss", epoch=epoch)
        losses.append({"epoch": epoch, "loss_con": l_con, "loss_rec": l_rec, "loss_mig": l_mig,
                       "loss_pre": total})

        if cfg.gamma > 0 or outliers.size:
            dz = np.zeros_like(z) if dz_mig is None else dz_mig
            enc_grads = {}
            if cfg.gamma > 0:
                c_ssl = cfg.gamma
                dec_grads, dz_dec = bundle.decoder.backward(dec_cache, c_ssl * (1 - cfg.alpha) * dx_rec)
                dz = dz + dz_dec
                enc_grads = add_grads(
                    bundle.encoder.backward(cache0, c_ssl * cfg.alpha * dz0),
                    bundle.encoder.backward(cache1, c_ssl * cfg.alpha * dz1),
                )
                dec_opt(dec_grads)
            enc_grads = add_grads(enc_grads, bundle.encoder.backward(cache, dz))
            enc_opt(enc_grads)

        if cfg.migrate and epoch % cfg.migration_every == 0:
            state = migrate_groups(state, outliers, epoch=epoch, stats=stats)
        else:
            state = migrate_groups(state, outliers[:0], epoch=epoch, stats=stats)
        rec = state.history[-1]
        log.debug("ssl epoch %d loss %.5f flips %d/%d", epoch, total,
                  rec["n_flips_0to1"], rec["n_flips_1to0"])
    return SSLResult(state.freeze(), losses)


def frozen_start(s):
    """Frozen state that keeps raw sensitive groups (no pretraining)."""
    return MigrationState.start(s).freeze()
