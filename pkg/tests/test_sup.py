import hashlib
import math

import numpy as np
import pytest

from fairmig import models
from fairmig.errors import ContractError
from fairmig.graph import SyntheticSpec, generate_synthetic, make_splits
from fairmig.models import ModelBundle
from fairmig.ssl import MigrationState, group_prototypes, migration_loss
from fairmig.sup import (EPOCH_LOG_COLUMNS, SupConfig, adversarial_loss,
                         adversarial_loss_simplified, ce_loss, estimator_loss,
                         frozen_migration_loss, sup_stage_train, train_plain_ce)

LN2 = math.log(2.0)


def test_ce_examples():
    y = np.array([1, 0, 1, 0])
    assert ce_loss(y.astype(float), y, np.ones(4, bool))[0] == pytest.approx(0.0, abs=1e-6)
    assert ce_loss(np.full(4, 0.5), y, np.ones(4, bool))[0] == pytest.approx(LN2)
    with pytest.raises(ContractError):
        ce_loss(np.full(4, 0.5), y, np.zeros(4, bool))


def test_ce_scalar_oracle():
    rng = np.random.default_rng(0)
    p = rng.random(6)
    y = rng.integers(0, 2, 6)
    mask = np.array([1, 1, 0, 1, 0, 1], bool)
    idx = [i for i in range(6) if mask[i]]
    expect = -sum(y[i] * math.log(p[i]) + (1 - y[i]) * math.log(1 - p[i]) for i in idx) / len(idx)
    assert ce_loss(p, y, mask)[0] == pytest.approx(expect, abs=1e-8)


def test_estimator_examples():
    assert estimator_loss(np.full(3, 0.5), np.full(3, 0.5))[0] == pytest.approx(LN2)
    assert estimator_loss(np.full(3, 1 - 1e-9), np.ones(3))[0] < 1e-5  # clamping keeps it just above 0
    rng = np.random.default_rng(1)
    sp_, sa = rng.random(5), rng.random(5)
    expect = -sum(sa[i] * math.log(sp_[i]) + (1 - sa[i]) * math.log(1 - sp_[i]) for i in range(5)) / 5
    assert estimator_loss(sp_, sa)[0] == pytest.approx(expect, abs=1e-8)


def test_adversarial_examples():
    rng = np.random.default_rng(2)
    for sa in (np.zeros(4), np.ones(4), rng.random(4)):
        assert adversarial_loss(np.full(4, 0.5), sa)[0] == pytest.approx(LN2, abs=1e-12)
    for sa in (0.0, 0.3, 1.0):
        val = adversarial_loss(np.array([0.9]), np.array([sa]))[0]
        assert val == pytest.approx(-(math.log(0.9) + math.log(0.1)) / 2, abs=1e-12)
        assert val == pytest.approx(1.2040, abs=1e-4)
    sp_ = rng.random(7)
    assert adversarial_loss(sp_, rng.random(7))[0] == pytest.approx(adversarial_loss_simplified(sp_), abs=1e-12)


def test_adversarial_gradient_is_zero():
    rng = np.random.default_rng(3)
    sp_, sa = rng.random(6), rng.random(6)
    loss, grad = adversarial_loss(sp_, sa)
    assert np.all(grad == 0.0)


def test_frozen_migration_loss_matches_stage_one_formula():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((30, 4))
    p = rng.integers(0, 2, 30)
    w = rng.random(30) + 0.5
    loss, dz, out = frozen_migration_loss(z, p, w)
    ref, ref_dz = migration_loss(z, group_prototypes(z, p), p, out, w)
    assert loss == ref
    np.testing.assert_array_equal(dz, ref_dz)
    tight = np.array([[1.0, 0.0]] * 4 + [[0.0, 1.0]] * 4)
    assert frozen_migration_loss(tight, np.array([0] * 4 + [1] * 4), np.ones(8))[0] == 0.0


# --------------------------------------------------------------------------
# stage loop


def setup(seed=0, n=150):
    g = generate_synthetic(SyntheticSpec(n_nodes=n, seed=seed))
    g = make_splits(g, seed=seed)
    bundle = ModelBundle.init(np.random.default_rng(seed), g.n_features, 0, hidden_dim=8, out_dim=8)
    return g, bundle


def frozen_for(g):
    return MigrationState.start(g.sensitive).freeze()


def test_requires_frozen_state():
    g, bundle = setup()
    with pytest.raises(ContractError):
        sup_stage_train(g, bundle, MigrationState.start(g.sensitive), SupConfig(epochs=1))


def test_log_columns_and_finite():
    g, bundle = setup()
    res = sup_stage_train(g, bundle, frozen_for(g), SupConfig(epochs=20))
    assert len(res.log) == 20 and set(res.log[0]) == set(EPOCH_LOG_COLUMNS)
    for row in res.log:
        assert all(np.isfinite(row[k]) for k in ("loss_ce", "loss_mig", "loss_adv", "loss_est"))
    assert 0 <= res.best_epoch < 20


def test_zero_coefficients_match_plain_trainer():
    g, bundle = setup(seed=5)
    g2, bundle2 = setup(seed=5)
    res = sup_stage_train(g, bundle, frozen_for(g), SupConfig(lam=0.0, beta=0.0, epochs=30, select_best=False))
    ref = train_plain_ce(g2, bundle2.encoder, bundle2.classifier, 30)
    assert [r["loss_ce"] for r in res.log] == ref
    for k in bundle.encoder.params:
        np.testing.assert_array_equal(bundle.encoder.params[k], bundle2.encoder.params[k])


def _hash(component):
    h = hashlib.sha256()
    for k in sorted(component.params):
        h.update(component.params[k].tobytes())
    return h.hexdigest()


def test_phase_alternation(monkeypatch):
    g, bundle = setup()
    calls = []
    original = models.Adam.__call__

    def spy(self, grads, ascend=False):
        before = {n: _hash(getattr(bundle, n)) for n in bundle.COMPONENTS}
        original(self, grads, ascend)
        after = {n: _hash(getattr(bundle, n)) for n in bundle.COMPONENTS}
        changed = {n for n in before if before[n] != after[n]}
        name = next(n for n in bundle.COMPONENTS if getattr(bundle, n) is self.component)
        assert changed <= {name}
        calls.append(name)

    monkeypatch.setattr(models.Adam, "__call__", spy)
    sup_stage_train(g, bundle, frozen_for(g), SupConfig(epochs=3, adversary_steps=2))
    per_epoch = ["estimator", "adversary", "adversary", "encoder", "classifier"]
    assert calls == per_epoch * 3


def test_beta_zero_adversary_has_no_effect():
    finals = []
    for objective in ("verbatim", "standard"):
        g, bundle = setup(seed=2)
        sup_stage_train(g, bundle, frozen_for(g),
                        SupConfig(beta=0.0, epochs=15, adversary_objective=objective, select_best=False))
        finals.append(bundle.encoder.params["W0"].copy())
    np.testing.assert_array_equal(finals[0], finals[1])


def test_standard_objective_trains_adversary_and_moves_encoder():
    finals = []
    for objective in ("verbatim", "standard"):
        g, bundle = setup(seed=2)
        sup_stage_train(g, bundle, frozen_for(g),
                        SupConfig(beta=0.5, epochs=15, adversary_objective=objective, select_best=False))
        finals.append(bundle.encoder.params["W0"].copy())
    assert not np.array_equal(finals[0], finals[1])


def test_frozen_groups_never_change():
    g, bundle = setup()
    state = MigrationState.start(np.where(np.arange(g.n_nodes) % 7 == 0, 1 - g.sensitive, g.sensitive)).freeze()
    before = state.p_hash()
    p_copy = state.P.copy()
    sup_stage_train(g, bundle, state, SupConfig(epochs=100))
    assert state.p_hash() == before
    np.testing.assert_array_equal(state.P, p_copy)


def test_model_selection_restores_best():
    g, bundle = setup(seed=1)
    res = sup_stage_train(g, bundle, frozen_for(g), SupConfig(epochs=40))
    best = max(r["val_auc"] for r in res.log)
    assert res.best_val[0] == best
    assert res.log[res.best_epoch]["val_auc"] == best
    from fairmig.metrics import safe_metrics
    z = bundle.encoder(g.norm_adj, g.features)
    auc = safe_metrics(bundle.classifier(z)[:, 0], g.labels, g.sensitive, g.mask("val"))[0]
    assert auc == best
