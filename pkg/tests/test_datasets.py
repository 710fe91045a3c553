import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prusc.datasets import (MOONS_ATTRIBUTE, AttributeSpec, DatasetFormatError, LabeledDataset, SpuriousMoonsConfig,
                            SyntheticImageConfig, balanced_indices, gen_synthetic_images, gen_two_moons,
                            load_dataset, save_dataset, split)


def _three_sigma(n, p):
    return 3 * np.sqrt(n * p * (1 - p))


# --- two moons ---------------------------------------------------------------


def test_moons_perfect_correlation_is_separable_by_x1():
    ds = gen_two_moons(SpuriousMoonsConfig(rho=1.0, spur_shift=3.0, noise=0.1, seed=1))
    x1 = ds.inputs[:, 0]
    assert x1[ds.labels == 0].max() < x1[ds.labels == 1].min()
    g = ds.groups(MOONS_ATTRIBUTE)
    assert set(np.unique(g)) == {1, 3}


def test_moons_zero_correlation_never_displaces():
    ds = gen_two_moons(SpuriousMoonsConfig(rho=0.0, seed=2))
    assert np.all(ds.attributes[MOONS_ATTRIBUTE] == 0)


@pytest.mark.parametrize("seed", range(5))
def test_moons_minority_fraction_within_binomial_band(seed):
    ds = gen_two_moons(SpuriousMoonsConfig(n=2000, rho=0.95, seed=seed))
    minority = int((ds.attributes[MOONS_ATTRIBUTE] == 0).sum())
    assert abs(minority - 100) <= _three_sigma(2000, 0.05)


def test_moons_classes_balanced_and_deterministic():
    a = gen_two_moons(SpuriousMoonsConfig(seed=3))
    b = gen_two_moons(SpuriousMoonsConfig(seed=3))
    assert np.bincount(a.labels).tolist() == [1000, 1000]
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)


@pytest.mark.parametrize("kw", [{"rho": 1.5}, {"rho": -0.1}, {"n": 2}, {"spur_shift": 0.0}, {"noise": -1.0}])
def test_moons_config_validation(kw):
    with pytest.raises(ValueError):
        SpuriousMoonsConfig(**kw)


# --- image grids ----------------------------------------------------------------


def test_images_perfect_correlation_copies_the_label():
    ds = gen_synthetic_images(SyntheticImageConfig(per_class=100, attributes=[
        AttributeSpec("corner", 1.0, "corner", "tl"), AttributeSpec("border", 1.0, "border", "right")]))
    for a in ds.attributes.values():
        assert np.array_equal(a, ds.labels)


def test_images_pixels_in_unit_interval():
    ds = gen_synthetic_images(SyntheticImageConfig(per_class=50, seed=4))
    assert ds.inputs.shape == (100, 144)
    assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0


@pytest.mark.parametrize("seed", range(5))
def test_images_group_count_within_binomial_band(seed):
    ds = gen_synthetic_images(SyntheticImageConfig(per_class=500, seed=seed))
    for a in ds.attributes.values():
        count = int(((ds.labels == 1) & (a == 0)).sum())
        assert abs(count - 25) <= _three_sigma(500, 0.05)


def test_images_independent_attributes_pass_chi_square():
    pvals = []
    for seed in range(5):
        ds = gen_synthetic_images(SyntheticImageConfig(per_class=500, seed=seed, attributes=[
            AttributeSpec("corner", 0.5, "corner", "tl"), AttributeSpec("border", 0.5, "border", "right")]))
        for a in ds.attributes.values():
            obs = np.array([[np.sum((ds.labels == y) & (a == v)) for v in (0, 1)] for y in (0, 1)], float)
            exp = obs.sum(1, keepdims=True) * obs.sum(0, keepdims=True) / obs.sum()
            stat = float(((obs - exp) ** 2 / exp).sum())
            pvals.append(math.erfc(math.sqrt(stat / 2)))  # chi-square sf, one dof
    assert min(pvals) > 0.01


def test_images_markers_render_attribute_value():
    cfg = SyntheticImageConfig(per_class=100, seed=5)
    ds = gen_synthetic_images(cfg)
    imgs = ds.inputs.reshape(-1, cfg.grid, cfg.grid)
    for spec in cfg.attributes:
        rows, cols = spec.region(cfg.grid)
        patch = imgs[:, rows, cols].reshape(len(ds), -1)
        assert np.all(patch == patch[:, :1])
        assert np.array_equal(patch[:, 0], ds.attributes[spec.name].astype(float))


def test_images_multiclass_attribute_values():
    ds = gen_synthetic_images(SyntheticImageConfig(classes=3, per_class=200, seed=6))
    assert ds.n_classes == 3
    for a in ds.attributes.values():
        assert set(np.unique(a)) <= {0, 1, 2}


def test_overlapping_attribute_regions_rejected():
    with pytest.raises(ValueError):
        SyntheticImageConfig(attributes=[AttributeSpec("a", 0.9, "corner", "tr"),
                                         AttributeSpec("b", 0.9, "corner", "tr")])


def test_attribute_rho_validated():
    with pytest.raises(ValueError):
        SyntheticImageConfig(attributes=[AttributeSpec("a", 1.2)])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_spuriousness_calibration(seed, rho):
    ds = gen_synthetic_images(SyntheticImageConfig(per_class=300, seed=seed, attributes=[
        AttributeSpec("corner", rho, "corner", "tl")]))
    aligned = int((ds.attributes["corner"] == ds.labels).sum())
    assert abs(aligned - 600 * rho) <= _three_sigma(600, rho) + 1


# --- groups, split, balance -------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_group_counts_sum_to_n(seed):
    ds = gen_synthetic_images(SyntheticImageConfig(per_class=50, seed=seed, classes=3))
    for name in ds.attributes:
        assert np.bincount(ds.groups(name)).sum() == len(ds)


def test_unknown_attribute_raises():
    ds = gen_two_moons(SpuriousMoonsConfig(n=20))
    with pytest.raises(KeyError):
        ds.groups("nope")


def test_split_is_deterministic_and_partitions():
    ds = gen_two_moons(SpuriousMoonsConfig(n=200, seed=7))
    ds.inputs[:, 1] = np.arange(200)
    a = split(ds, (0.6, 0.2, 0.2), seed=3)
    b = split(ds, (0.6, 0.2, 0.2), seed=3)
    for u, v in zip(a, b):
        assert np.array_equal(u.inputs, v.inputs)
    ids = np.concatenate([p.inputs[:, 1] for p in a])
    assert sorted(ids.tolist()) == list(range(200))
    assert [len(p) for p in a] == [120, 40, 40]
    assert [p.split for p in a] == ["train", "val", "test"]


def test_balanced_test_split_has_equal_groups():
    y = np.repeat([0, 1], 100)
    a = np.concatenate([np.r_[np.zeros(70), np.ones(30)], np.r_[np.zeros(40), np.ones(60)]])
    ds = LabeledDataset(np.zeros((200, 1)), y, {"a": a})
    idx = balanced_indices(ds, "a", seed=0)
    assert len(idx) == 120
    assert np.bincount(ds.groups("a")[idx]).tolist() == [30, 30, 30, 30]
    _, _, te = split(ds, (0.0, 0.0, 1.0), seed=1, balanced_test_attribute="a")
    assert np.bincount(te.groups("a")).tolist() == [30, 30, 30, 30]


def test_balancing_an_empty_group_names_it():
    ds = LabeledDataset(np.zeros((4, 1)), [0, 0, 1, 1], {"a": [0, 1, 1, 1]})
    with pytest.raises(ValueError, match=r"y=1, a=0"):
        balanced_indices(ds, "a")


def test_split_fraction_validation():
    ds = gen_two_moons(SpuriousMoonsConfig(n=20))
    with pytest.raises(ValueError):
        split(ds, (0.5, 0.5, 0.5))


def test_dataset_rejects_misaligned_attribute():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((3, 2)), [0, 1, 0], {"a": [0, 1]})


# --- persistence ------------------------------------------------------------------


def test_csv_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(8)
    X = rng.normal(size=(50, 5)) * 10.0 ** rng.integers(-300, 300, size=(50, 5))
    ds = LabeledDataset(X, rng.integers(0, 3, 50), {"a": rng.integers(0, 2, 50), "b": rng.integers(0, 3, 50)},
                        clusters=rng.integers(0, 8, 50), meta={"n_classes": 3})
    save_dataset(ds, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv", attributes=["a", "b"])
    assert np.array_equal(back.inputs, ds.inputs)
    assert np.array_equal(back.labels, ds.labels)
    assert all(np.array_equal(back.attributes[k], ds.attributes[k]) for k in ds.attributes)
    assert np.array_equal(back.clusters, ds.clusters)
    assert back.meta == ds.meta


def test_csv_header_layout(tmp_path):
    ds = LabeledDataset(np.ones((1, 2)), [1], {"a": [0]})
    save_dataset(ds, tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x_0,x_1,y,a"


def test_empty_dataset_round_trip(tmp_path):
    ds = LabeledDataset(np.zeros((0, 3)), np.zeros(0, int), {"a": np.zeros(0, int)})
    save_dataset(ds, tmp_path / "e.csv")
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 1
    assert len(load_dataset(tmp_path / "e.csv")) == 0


def test_missing_attribute_column_is_an_error(tmp_path):
    save_dataset(LabeledDataset(np.ones((2, 1)), [0, 1]), tmp_path / "d.csv")
    with pytest.raises(DatasetFormatError, match="'a'"):
        load_dataset(tmp_path / "d.csv", attributes=["a"])


def test_malformed_row_reports_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x_0,y\n1.0,0\nabc,1\n")
    with pytest.raises(DatasetFormatError, match="line 3"):
        load_dataset(p)
