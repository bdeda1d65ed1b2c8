"""Supervised stage: cross-entropy, frozen pseudo-group constraint, sensitive
attribute estimator and adversary, trained by alternating updates."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .metrics import safe_metrics
from .models import Adam
from .ssl import group_similarity_stats, migration_loss, migration_round, reweight

log = logging.getLogger(__name__)

CLAMP = 1e-7
ADVERSARY_OBJECTIVES = ("verbatim", "standard")
EPOCH_LOG_COLUMNS = ("epoch", "loss_ce", "loss_mig", "loss_adv", "loss_est", "val_auc",
                     "val_dsp", "val_deo", "mu0", "sigma0", "mu1", "sigma1", "n_outliers")


def _clamp(p):
    p = np.asarray(p, dtype=np.float64)
    return np.clip(p, CLAMP, 1.0 - CLAMP), (p > CLAMP) & (p < 1.0 - CLAMP)


def _bce(p, target):
    """Mean binary cross-entropy and its gradient w.r.t. ``p``."""
    pc, live = _clamp(p)
    n = pc.size
    loss = -float(np.sum(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc)) / n)
    grad = -(target / pc - (1.0 - target) / (1.0 - pc)) / n * live
    return loss, grad


def ce_loss(y_prob, y, mask):
    """Mean cross-entropy over ``mask``; returns ``(loss, d_y_prob)``."""
    idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
    if idx.size == 0:
        raise ContractError("cross-entropy mask is empty")
    loss, g = _bce(np.asarray(y_prob)[idx], np.asarray(y, dtype=np.float64)[idx])
    grad = np.zeros(np.shape(y_prob))
    grad[idx] = g
    return loss, grad


def estimator_loss(s_p, s_a):
    """Cross-entropy of the estimate against the adversary output (a constant target).

    Returns ``(loss, d_s_p)``.
    """
    return _bce(s_p, np.clip(np.asarray(s_a, dtype=np.float64), CLAMP, 1.0 - CLAMP))


def adversarial_loss(s_p, s_a):
    """Symmetric adversarial loss, evaluated term by term.

    The S^A terms cancel, so the returned gradient w.r.t. ``s_a`` is exactly
    zero. Returns ``(loss, d_s_a)``.
    """
    sp, _ = _clamp(s_p)
    sa = np.clip(np.asarray(s_a, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    n = sp.size
    lp, lq = np.log(sp), np.log(1.0 - sp)
    total = sa * lp + (1.0 - sa) * lq + (1.0 - sa) * lp + sa * lq
    loss = -float(np.sum(total) / (2.0 * n))
    live = (np.asarray(s_a) > CLAMP) & (np.asarray(s_a) < 1.0 - CLAMP)
    grad = -((lp - lq) + (-lp + lq)) / (2.0 * n) * live
    return loss, grad


def adversarial_loss_simplified(s_p):
    sp, _ = _clamp(s_p)
    return -float(np.sum(np.log(sp) + np.log(1.0 - sp)) / (2.0 * sp.size))


def adversary_recovery_loss(s_a, s):
    """Plain cross-entropy of the adversary output against the raw sensitive vector."""
    return _bce(s_a, np.asarray(s, dtype=np.float64))


def frozen_migration_loss(z, frozen_p, w):
    """Migration loss under frozen pseudo-groups: prototypes and outliers are
    recomputed from ``z`` but no flip is ever applied.

    Returns ``(loss, dz, outliers)``.
    """
    t, _, _, outliers = migration_round(z, frozen_p)
    loss, dz = migration_loss(z, t, frozen_p, outliers, w)
    return loss, dz, outliers


@dataclass(frozen=True)
class SupConfig:
    lam: float = 10.0
    beta: float = 0.1
    epochs: int = 500
    adversary_steps: int = 1
    lr: float = 1e-3
    lr_estimator: float = 1e-3
    lr_adversary: float = 1e-3
    weight_decay: float = 1e-5
    adversary_objective: str = "verbatim"
    threshold: float = 0.5
    reweight: bool = True
    select_best: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ConfigError("lambda and beta must be non-negative")
        if self.adversary_objective not in ADVERSARY_OBJECTIVES:
            raise ConfigError(f"adversary_objective must be one of {ADVERSARY_OBJECTIVES}")
        if self.epochs < 1 or self.adversary_steps < 0:
            raise ConfigError("epochs must be >= 1 and adversary_steps >= 0")


@dataclass
class SupResult:
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: tuple = ()


def _better(cand, best):
    """Higher val AUC wins; ties go to the lower val dSP + dEO."""
    auc_c, fair_c = cand
    if np.isnan(auc_c):
        return False
    if best is None:
        return True
    auc_b, fair_b = best
    if auc_c != auc_b:
        return auc_c > auc_b
    return (0.0 if np.isnan(fair_c) else fair_c) < (0.0 if np.isnan(fair_b) else fair_b)


def sup_stage_train(g, bundle, frozen_state, cfg):
    """Alternating min-max training; restores the best-validation encoder and classifier."""
    if not frozen_state.frozen:
        raise ContractError("supervised stage needs frozen pseudo-groups")
    adj = g.norm_adj
    x = g.features
    x_masked = g.masked_features()
    s = g.sensitive
    y = g.labels
    train = g.mask("train")
    val = g.mask("val")
    p = frozen_state.P
    w = reweight(s) if cfg.reweight else np.ones(g.n_nodes)

    enc_opt = Adam(bundle.encoder, cfg.lr, cfg.weight_decay)
    clf_opt = Adam(bundle.classifier, cfg.lr, cfg.weight_decay)
    est_opt = Adam(bundle.estimator, cfg.lr_estimator, cfg.weight_decay)
    adv_opt = Adam(bundle.adversary, cfg.lr_adversary, cfg.weight_decay)
    result = SupResult()
    best_key = None
    best_snap = None

    for epoch in range(cfg.epochs):
        phase = "a"
        try:
            # (a) estimator follows the adversary's current output
            z_const = bundle.encoder(adj, x)
            s_a = bundle.adversary(z_const)[:, 0]
            s_p, est_cache = bundle.estimator.forward(adj, x_masked)
            l_est, d_sp = estimator_loss(s_p, s_a)
            est_opt(bundle.estimator.backward(est_cache, d_sp))
            s_p = bundle.estimator(adj, x_masked)

            # (b) adversary: lowers its own recovery loss, i.e. raises L_sup
            phase = "b"
            for _ in range(cfg.adversary_steps):
                s_a, adv_cache = bundle.adversary.forward(z_const)
                if cfg.adversary_objective == "verbatim":
                    _, d_sa = adversarial_loss(s_p, s_a[:, 0])
                else:
                    _, d_sa = adversary_recovery_loss(s_a[:, 0], s)
                adv_grads, _ = bundle.adversary.backward(adv_cache, d_sa[:, None])
                adv_opt(adv_grads)

            # (c) encoder + classifier descend L_CE + lam L_mig - beta L_A
            phase = "c"
            z, enc_cache = bundle.encoder.forward(adj, x)
            y_prob, clf_cache = bundle.classifier.forward(z)
            l_ce, d_y = ce_loss(y_prob[:, 0], y, train)
            clf_grads, dz = bundle.classifier.backward(clf_cache, d_y[:, None])
            l_mig, dz_mig, outliers = frozen_migration_loss(z, p, w)
            if cfg.lam > 0:
                dz = dz + cfg.lam * dz_mig
            s_a, adv_cache = bundle.adversary.forward(z)
            if cfg.adversary_objective == "verbatim":
                l_adv, d_sa = adversarial_loss(s_p, s_a[:, 0])
            else:
                l_adv, d_sa = adversary_recovery_loss(s_a[:, 0], s)
            if cfg.beta > 0:
                _, dz_adv = bundle.adversary.backward(adv_cache, d_sa[:, None])
                dz = dz - cfg.beta * dz_adv
            enc_opt(bundle.encoder.backward(enc_cache, dz))
            clf_opt(clf_grads)
        except NumericError as exc:
            raise NumericError(str(exc), phase=phase, epoch=epoch) from exc
        if not all(np.isfinite(v) for v in (l_ce, l_mig, l_adv, l_est)):
            raise NumericError("non-finite supervised loss", phase="c", epoch=epoch)

        z = bundle.encoder(adj, x)
        scores = bundle.classifier(z)[:, 0]
        v_auc, v_sp, v_eo = safe_metrics(scores, y, s, val, cfg.threshold)
        gs = group_similarity_stats(z, s)
        result.log.append({
            "epoch": epoch, "loss_ce": l_ce, "loss_mig": l_mig, "loss_adv": l_adv,
            "loss_est": l_est, "val_auc": v_auc, "val_dsp": v_sp, "val_deo": v_eo,
            "mu0": float(gs.mu[0]), "sigma0": float(gs.sigma[0]),
            "mu1": float(gs.mu[1]), "sigma1": float(gs.sigma[1]),
            "n_outliers": int(outliers.size),
        })
        key = (v_auc, v_sp + v_eo)
        if cfg.select_best and _better(key, best_key):
            best_key = key
            best_snap = bundle.snapshot(("encoder", "classifier"))
            result.best_epoch = epoch
    if cfg.select_best and best_snap is not None:
        bundle.restore(best_snap)
        result.best_val = best_key
    else:
        result.best_epoch = cfg.epochs - 1
    return result


def train_plain_ce(g, encoder, classifier, epochs, lr=1e-3, weight_decay=1e-5):
    """Reference trainer: cross-entropy only. Returns the per-epoch loss list."""
    adj = g.norm_adj
    train = g.mask("train")
    enc_opt = Adam(encoder, lr, weight_decay)
    clf_opt = Adam(classifier, lr, weight_decay)
    losses = []
    for _ in range(epochs):
        z, enc_cache = encoder.forward(adj, g.features)
        y_prob, clf_cache = classifier.forward(z)
        loss, d_y = ce_loss(y_prob[:, 0], g.labels, train)
        clf_grads, dz = classifier.backward(clf_cache, d_y[:, None])
        enc_opt(encoder.backward(enc_cache, dz))
        clf_opt(clf_grads)
        losses.append(loss)
    return losses
