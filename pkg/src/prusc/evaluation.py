"""Group-robustness metrics, spurious-reliance probes and figure data."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .autodiff import DenseNetwork, predict
from .datasets import MOONS_ATTRIBUTE, AttributeSpec, LabeledDataset, balanced_indices, marker_levels

log = logging.getLogger(__name__)


def predictor(model):
    """Turn a network, masked model or callable into ``X -> class ids``."""
    if isinstance(model, DenseNetwork):
        return lambda X: predict(model, X)
    from .masking import MaskedModel, finalize_subnetwork, freeze
    if isinstance(model, MaskedModel):
        masks = model.masks if model.masks.mode == "frozen" else freeze(model.masks)
        net = finalize_subnetwork(MaskedModel(model.base, masks, model.seed))
        return lambda X: predict(net, X)
    if callable(model):
        return model
    raise TypeError(f"cannot predict with {type(model).__name__}")


@dataclass
class GroupTable:
    attribute: str
    counts: np.ndarray  # (classes, attribute values)
    correct: np.ndarray
    split: str = "test"

    @property
    def accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.correct / np.maximum(self.counts, 1), np.nan)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def rows(self):
        acc = self.accuracy
        for (y, a), cnt in np.ndenumerate(self.counts):
            yield {"attribute": self.attribute, "y": y, "a": a, "count": int(cnt),
                   "correct": int(self.correct[y, a]), "accuracy": float(acc[y, a])}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["attribute", "y", "a", "count", "correct", "accuracy"])
            w.writeheader()
            w.writerows(self.rows())


def group_counts(ds: LabeledDataset, attribute: str) -> np.ndarray:
    t = _table(ds, attribute, np.ones(len(ds), dtype=bool))
    return t.counts


def _table(ds, attribute, correct) -> GroupTable:
    if attribute not in ds.attributes:
        raise KeyError(f"unknown attribute {attribute!r}")
    k = max(ds.n_classes, 1)
    n_attr = ds.attribute_values(attribute)
    counts, hits = kernels.group_counts(ds.labels, ds.attributes[attribute], np.asarray(correct, dtype=np.bool_),
                                        k, n_attr)
    return GroupTable(attribute, counts, hits, ds.split)


def group_accuracy(model, ds: LabeledDataset, attribute: str, predictions=None) -> GroupTable:
    pred = predictor(model)(ds.inputs) if predictions is None else np.asarray(predictions)
    return _table(ds, attribute, pred == ds.labels)


def wga(table: GroupTable) -> float:
    acc = table.accuracy
    if np.isnan(acc).any():
        log.warning("empty groups excluded from worst-group accuracy for %s", table.attribute)
    return float(np.nanmin(acc))


def mga(table: GroupTable, train_counts) -> float:
    """Test accuracy of the group with the fewest training samples."""
    train_counts = np.asarray(train_counts, dtype=float)
    live = table.counts > 0
    if not live.all():
        log.warning("empty test groups excluded from minority-group accuracy for %s", table.attribute)
    masked = np.where(live, train_counts, np.inf)
    y, a = np.unravel_index(np.argmin(masked), masked.shape)
    return float(table.accuracy[y, a])


def unbiased_accuracy(model, ds: LabeledDataset, attribute: str, seed: int = 0, predictions=None) -> float:
    """Accuracy on an exactly group-balanced subsample."""
    idx = balanced_indices(ds, attribute, seed)
    pred = predictor(model)(ds.inputs[idx]) if predictions is None else np.asarray(predictions)[idx]
    return float((pred == ds.labels[idx]).mean())


def uag(avg: float, ua: float) -> float:
    return avg - ua


def evaluate(model, ds: LabeledDataset, attributes=None, train_counts: dict | None = None,
             seed: int = 0, keep: float | None = None) -> dict:
    """Metrics report: AVG plus WGA, MGA, UA, UAG per attribute."""
    pred = predictor(model)(ds.inputs)
    avg = float((pred == ds.labels).mean()) if len(ds) else float("nan")
    report = {"AVG": avg, "n": len(ds), "attributes": {}}
    if keep is not None:
        report["keep_ratio"] = keep
    for attr in attributes if attributes is not None else list(ds.attributes):
        table = group_accuracy(None, ds, attr, predictions=pred)
        ua = unbiased_accuracy(None, ds, attr, seed, predictions=pred)
        entry = {"WGA": wga(table), "UA": ua, "UAG": uag(avg, ua),
                 "groups": table.accuracy.tolist(), "counts": table.counts.tolist()}
        if train_counts is not None and attr in train_counts:
            entry["MGA"] = mga(table, train_counts[attr])
        report["attributes"][attr] = entry
    return report


# --- spurious reliance --------------------------------------------------------


class MoonsShiftFlip:
    """Negate the x1 displacement of displaced samples (toggle)."""

    def __init__(self, shift: float, attribute: str = MOONS_ATTRIBUTE):
        self.shift = shift
        self.attribute = attribute

    def __call__(self, ds: LabeledDataset) -> LabeledDataset:
        sign = ds.meta.get("x1_sign", 1.0)
        d = sign * ds.attributes[self.attribute] * (2 * ds.labels - 1) * self.shift
        X = ds.inputs.copy()
        X[:, 0] = X[:, 0] - 2.0 * d
        return replace(ds, inputs=X, meta={**ds.meta, "x1_sign": -sign})


class MarkerSwap:
    """Re-render an image attribute marker with the opposite value."""

    def __init__(self, spec: AttributeSpec, grid: int, n_classes: int = 2):
        self.spec, self.grid, self.k = spec, grid, n_classes

    def __call__(self, ds: LabeledDataset) -> LabeledDataset:
        a = ds.attributes[self.spec.name]
        flipped = (self.k - 1) - a
        imgs = ds.inputs.reshape(len(ds), self.grid, self.grid).copy()
        rows, cols = self.spec.region(self.grid)
        imgs[:, rows, cols] = marker_levels(self.spec.levels, self.k)[flipped][:, None, None]
        attrs = {**ds.attributes, self.spec.name: flipped}
        return replace(ds, inputs=imgs.reshape(len(ds), -1), attributes=attrs)


def intervention_for(ds: LabeledDataset, attribute: str):
    gen = ds.meta.get("generator")
    if gen == "moons" and attribute == MOONS_ATTRIBUTE:
        return MoonsShiftFlip(ds.meta["spur_shift"], attribute)
    if gen == "images" and attribute in ds.meta.get("attribute_specs", {}):
        s = ds.meta["attribute_specs"][attribute]
        spec = AttributeSpec(attribute, kind=s["kind"], where=s["where"], size=s["size"], levels=tuple(s["levels"]))
        return MarkerSwap(spec, ds.meta["grid"], ds.n_classes)
    raise KeyError(f"no intervention registered for attribute {attribute!r}")


def spurious_flip_rate(model, ds: LabeledDataset, attribute: str, intervention=None) -> float:
    """Fraction of samples whose prediction changes under the intervention."""
    intervention = intervention or intervention_for(ds, attribute)
    f = predictor(model)
    if len(ds) == 0:
        return 0.0
    return float((f(ds.inputs) != f(intervention(ds).inputs)).mean())


# --- figure data ------------------------------------------------------------


def decision_boundary_raster(model, bounds=(-3.0, 4.0, -2.0, 2.5), resolution: int = 100) -> np.ndarray:
    """Row-major class grid; row i is x2 = ys[i], column j is x1 = xs[j]."""
    if isinstance(model, DenseNetwork) and model.sizes[0] != 2:
        raise ValueError("decision boundaries need a 2-D input model")
    x0, x1, y0, y1 = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return predictor(model)(grid).reshape(resolution, resolution)


def pca_project(E, dims: int = 2):
    """Project centred rows onto the top principal directions.

    Each direction is signed so its largest-magnitude entry is positive.
    Returns ``(coords, components)``.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.shape[0] < dims:
        raise ValueError("need at least `dims` samples")
    Xc = E - E.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:dims]
    signs = np.sign(comps[np.arange(dims), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    return Xc @ comps.T, comps
