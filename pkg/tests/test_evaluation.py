import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prusc.autodiff import DenseNetwork
from prusc.datasets import (MOONS_ATTRIBUTE, LabeledDataset, SpuriousMoonsConfig, SyntheticImageConfig,
                            gen_synthetic_images, gen_two_moons)
from prusc.evaluation import (GroupTable, decision_boundary_raster, evaluate, group_accuracy, group_counts, mga,
                              pca_project, spurious_flip_rate, uag, unbiased_accuracy, wga, intervention_for)


def _ds(y, a, split="test"):
    y = np.asarray(y)
    return LabeledDataset(np.arange(len(y), dtype=float)[:, None], y, {"a": np.asarray(a)}, split=split)


def _lookup(pred):
    pred = np.asarray(pred)
    return lambda X: pred[X[:, 0].astype(int)]


def test_constant_classifier_cells():
    ds = _ds([0, 0, 1, 1, 0, 1], [0, 1, 0, 1, 1, 1])
    t = group_accuracy(lambda X: np.zeros(len(X), int), ds, "a")
    assert t.accuracy.tolist() == [[1.0, 1.0], [0.0, 0.0]]
    assert t.counts.tolist() == [[1, 2], [1, 2]]
    assert t.n == len(ds)


def test_unknown_attribute_is_an_error():
    with pytest.raises(KeyError):
        group_accuracy(lambda X: np.zeros(len(X), int), _ds([0], [0]), "b")


def test_wga_and_mga_definitions():
    t = GroupTable("a", np.array([[10, 5], [5, 10]]), np.array([[9, 2], [4, 10]]))
    assert wga(t) == 0.4
    assert mga(t, np.array([[100, 3], [20, 100]])) == 0.4
    assert mga(t, np.array([[100, 30], [2, 100]])) == 0.8


def test_wga_skips_empty_groups(caplog):
    t = GroupTable("a", np.array([[10, 0], [5, 10]]), np.array([[9, 0], [4, 10]]))
    assert wga(t) == 0.8
    assert caplog.records


def test_equal_group_accuracy_gives_zero_gap():
    # equal-size groups: the balanced subsample is the whole split
    y = np.repeat([0, 1], 40)
    a = np.tile(np.repeat([0, 1], 20), 2)
    ds = _ds(y, a)
    pred = y.copy()
    for g in np.unique(ds.groups("a")):
        idx = np.flatnonzero(ds.groups("a") == g)
        pred[idx[::2]] = 1 - y[idx[::2]]
    rep = evaluate(_lookup(pred), ds, ["a"])
    assert rep["AVG"] == 0.5
    assert rep["attributes"]["a"]["UAG"] == 0.0


def test_perfect_classifier_has_zero_gap_on_skewed_groups():
    y = np.repeat([0, 1], 40)
    a = np.where(np.arange(80) % 10 == 0, 1 - y, y)
    rep = evaluate(_lookup(y), _ds(y, a), ["a"])
    assert rep["attributes"]["a"]["UAG"] == 0.0


def test_unbiased_accuracy_agrees_with_group_mean_within_binomial_band():
    rng = np.random.default_rng(0)
    for seed in range(10):
        n = 2000
        y = rng.integers(0, 2, n)
        a = np.where(rng.random(n) < 0.8, y, 1 - y)
        p_correct = np.array([[0.95, 0.4], [0.6, 0.9]])[y, a]
        pred = np.where(rng.random(n) < p_correct, y, 1 - y)
        ds = _ds(y, a)
        table = group_accuracy(None, ds, "a", predictions=pred)
        oracle = float(np.nanmean(table.accuracy))
        ua = unbiased_accuracy(None, ds, "a", seed=seed, predictions=pred)
        m = table.counts.min() * 4
        assert abs(ua - oracle) <= 3 * np.sqrt(0.25 / m)


def test_ua_names_the_empty_group():
    with pytest.raises(ValueError, match="y=1, a=1"):
        unbiased_accuracy(None, _ds([0, 0, 1], [0, 1, 0]), "a", predictions=np.zeros(3, int))


def test_uag_is_difference():
    assert uag(0.9, 0.7) == pytest.approx(0.2, abs=1e-15)


def test_report_shape():
    ds = _ds([0, 1, 0, 1], [0, 1, 1, 0])
    rep = evaluate(_lookup([0, 1, 1, 1]), ds, train_counts={"a": np.array([[5, 1], [1, 5]])}, keep=0.5)
    assert rep["AVG"] == 0.75 and rep["keep_ratio"] == 0.5
    e = rep["attributes"]["a"]
    assert set(e) >= {"WGA", "MGA", "UA", "UAG", "groups", "counts"}
    assert e["WGA"] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_group_table_counts_conserve(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 200))
    ds = _ds(rng.integers(0, 3, n), rng.integers(0, 2, n))
    t = group_accuracy(None, ds, "a", predictions=rng.integers(0, 3, n))
    assert t.n == n and np.array_equal(group_counts(ds, "a"), t.counts)
    acc = t.accuracy[t.counts > 0]
    assert np.all((acc >= 0) & (acc <= 1))


def test_group_table_csv(tmp_path):
    t = GroupTable("a", np.array([[2, 1], [1, 2]]), np.array([[1, 1], [0, 2]]))
    t.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "attribute,y,a,count,correct,accuracy" and len(lines) == 5


# --- interventions and flip rate ---------------------------------------------------------


def test_moons_intervention_is_an_involution():
    ds = gen_two_moons(SpuriousMoonsConfig(n=200, seed=1, spur_shift=1.5))
    iv = intervention_for(ds, MOONS_ATTRIBUTE)
    once, twice = iv(ds), iv(iv(ds))
    a = ds.attributes[MOONS_ATTRIBUTE]
    moved = np.abs(once.inputs[:, 0] - ds.inputs[:, 0])
    assert np.allclose(moved[a == 1], 3.0, atol=1e-12) and np.all(moved[a == 0] == 0)
    assert np.allclose(twice.inputs, ds.inputs, atol=1e-12)


def test_image_intervention_swaps_marker():
    cfg = SyntheticImageConfig(per_class=20, seed=2)
    ds = gen_synthetic_images(cfg)
    spec = cfg.attributes[0]
    out = intervention_for(ds, spec.name)(ds)
    rows, cols = spec.region(cfg.grid)
    patch = out.inputs.reshape(-1, cfg.grid, cfg.grid)[:, rows, cols][:, 0, 0]
    assert np.array_equal(patch, 1.0 - ds.attributes[spec.name])
    other = np.ones((cfg.grid, cfg.grid), bool)
    other[rows, cols] = False
    assert np.array_equal(out.inputs.reshape(-1, cfg.grid, cfg.grid)[:, other],
                          ds.inputs.reshape(-1, cfg.grid, cfg.grid)[:, other])


def test_missing_intervention_is_an_error():
    with pytest.raises(KeyError):
        intervention_for(_ds([0], [0]), "a")


def test_flip_rate_of_spurious_only_and_blind_models():
    ds = gen_two_moons(SpuriousMoonsConfig(n=400, seed=3, spur_shift=2.0))
    x1_only = lambda X: (X[:, 0] > 0.5).astype(int)
    blind = lambda X: (X[:, 1] < 0.25).astype(int)
    assert spurious_flip_rate(blind, ds, MOONS_ATTRIBUTE) == 0.0
    assert spurious_flip_rate(x1_only, ds, MOONS_ATTRIBUTE) > 0.5


# --- figure data -----------------------------------------------------------------------------


def test_raster_orientation():
    r = decision_boundary_raster(lambda X: (X[:, 0] > 0).astype(int), bounds=(-1, 1, -1, 1), resolution=4)
    assert r.tolist() == [[0, 0, 1, 1]] * 4
    with pytest.raises(ValueError):
        decision_boundary_raster(DenseNetwork.init([3, 4, 2]))


def test_pca_recovers_dominant_axis(rng):
    E = np.column_stack([rng.normal(0, 10, 300), rng.normal(0, 1, 300), rng.normal(0, 0.1, 300)])
    coords, comps = pca_project(E, 2)
    assert abs(abs(comps[0, 0]) - 1) < 1e-2 and abs(abs(comps[1, 1]) - 1) < 1e-2
    assert np.all(comps[np.arange(2), np.abs(comps).argmax(1)] > 0)
    assert np.allclose(coords.mean(0), 0, atol=1e-12)
    assert coords[:, 0].var() > coords[:, 1].var()
