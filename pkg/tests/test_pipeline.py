import numpy as np
import pytest

from prusc import evaluation as ev
from prusc import pipeline as P
from prusc.config import PipelineConfig
from prusc.datasets import SyntheticImageConfig, gen_synthetic_images, split


def _tiny_cfg(seed=0):
    cfg = PipelineConfig(seed=seed, hidden=[16, 16])
    cfg.erm.epochs = 3
    cfg.masking.epochs = 3
    cfg.finetune.epochs = 1
    cfg.taskdata.fraction = 0.3
    cfg.clustering.k = 4
    return cfg


@pytest.fixture(scope="module")
def data():
    cfg = SyntheticImageConfig(per_class=100, seed=0)
    for a in cfg.attributes:
        a.rho = 0.8
    ds = gen_synthetic_images(cfg)
    return split(ds, (0.6, 0.1, 0.3), seed=0)


@pytest.fixture(scope="module")
def base(data):
    return P.prepare_base(data[0], _tiny_cfg())


def _weights(net):
    return [np.concatenate([l.weight.data.ravel(), l.bias.data.ravel()]) for l in net.layers]


def test_stage_seeds_are_stable_and_distinct():
    assert P.stage_seed(3, "init") == P.stage_seed(3, "init")
    assert len({P.stage_seed(s, st) for s in range(4) for st in ("init", "kmeans", "taskdata")}) == 12
    assert 0 <= P.stage_seed(0, "init") < 2**63


def test_erm_is_bitwise_reproducible(data):
    tr = data[0]
    cfg = _tiny_cfg()
    a, ca = P.train_erm(tr.inputs, tr.labels, cfg.hidden, cfg.erm, seed=1)
    b, cb = P.train_erm(tr.inputs, tr.labels, cfg.hidden, cfg.erm, seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(_weights(a), _weights(b)))
    assert ca == cb and len(ca) == cfg.erm.epochs
    assert all(0 <= r["train_acc"] <= 1 for r in ca)


def test_erm_divergence_is_reported(data):
    tr = data[0]
    cfg = _tiny_cfg()
    X = tr.inputs.copy()
    X[0, 0] = np.nan
    with pytest.raises(P.TrainingDiverged):
        P.train_erm(X, tr.labels, cfg.hidden, cfg.erm)


def test_mask_training_leaves_base_weights_untouched(data, base):
    tr = data[0]
    cfg = _tiny_cfg()
    before = _weights(base.erm)
    mm, curves = P.train_mask(base.erm, tr.inputs, tr.labels, base.clusters.assignments, base.task,
                              cfg.masking, cfg.taskdata, cfg.seed)
    assert all(np.array_equal(x, y) for x, y in zip(before, _weights(base.erm)))
    assert len(curves) == cfg.masking.epochs
    assert any(not np.allclose(l, cfg.masking.init) for l in (m.data for m in mm.masks.logits))


def test_pipeline_ignores_attribute_labels(data):
    tr = data[0]
    scrambled = tr.subset(np.arange(len(tr)))
    rng = np.random.default_rng(7)
    for k in scrambled.attributes:
        scrambled.attributes[k] = rng.permutation(scrambled.attributes[k])
    a = P.run_pipeline(tr, None, _tiny_cfg())
    b = P.run_pipeline(scrambled, None, _tiny_cfg())
    assert all(np.array_equal(x, y) for x, y in zip(_weights(a.model), _weights(b.model)))


def test_settings_table_shape():
    assert set(P.SETTINGS) == set(range(1, 8))
    assert all(len(v) == 5 for v in P.SETTINGS.values())
    with pytest.raises(ValueError):
        P.run_setting(None, None, _tiny_cfg(), 8)


def test_unpruned_settings_keep_everything(data, base):
    run = P.run_setting(base, data[0], _tiny_cfg(), 6)
    assert run.mask_model is None and run.keep_ratio == 1.0


def test_last_layer_setting_only_moves_the_head(data, base):
    run = P.run_setting(base, data[0], _tiny_cfg(), 7)
    w0, w1 = _weights(base.erm), _weights(run.model)
    assert all(np.array_equal(x, y) for x, y in zip(w0[:-1], w1[:-1]))
    assert not np.array_equal(w0[-1], w1[-1])


def test_prune_without_finetune_is_the_extracted_subnetwork(data, base):
    cfg = _tiny_cfg()
    run = P.run_setting(base, data[0], cfg, 4)
    assert abs(run.keep_ratio - (1 - cfg.masking.prune_ratio)) < 0.01
    for l in run.model.layers:
        assert np.all(l.weight.data[l.mask == 0] == 0)


def test_finetune_keeps_pruned_weights_at_zero(data, base):
    run = P.run_setting(base, data[0], _tiny_cfg(), 2)
    for l in run.model.layers:
        if l.mask is not None:
            assert np.all(l.weight.data[l.mask == 0] == 0)
    assert 0 < run.keep_ratio < 1


def test_reports_attach_for_both_models(data):
    tr, _, te = data
    run = P.run_pipeline(tr, te, _tiny_cfg())
    assert set(run.reports) == {"erm", "final"}
    assert set(run.reports["final"]["attributes"]) == set(te.attributes)


def test_sweep_hits_requested_ratios(data, base):
    tr, _, te = data
    cfg = _tiny_cfg()
    attr = list(te.attributes)[0]
    rows = P.sweep_pruning_ratio(base, tr, te, cfg, [0.2, 0.8], attr)
    assert [round(1 - r["keep_ratio"], 1) for r in rows] == [0.2, 0.8]
    with pytest.raises(ValueError):
        P.sweep_pruning_ratio(base, tr, te, cfg, [1.0], attr)


def test_sweep_near_zero_ratio_is_the_unpruned_model(data, base):
    tr, _, te = data
    attr = list(te.attributes)[0]
    (row,) = P.sweep_pruning_ratio(base, tr, te, _tiny_cfg(), [1e-9], attr)
    assert row["keep_ratio"] == 1.0
    assert row["AVG"] == ev.evaluate(base.erm, te, [attr])["AVG"]


def test_random_mask_network_density():
    net = P.random_mask_network([2, 200, 200, 2], seed=0)
    dens = [l.mask.mean() for l in net.layers]
    assert all(abs(d - 0.5) < 0.05 for d in dens)
    again = P.random_mask_network([2, 200, 200, 2], seed=0)
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(net.layers, again.layers))
