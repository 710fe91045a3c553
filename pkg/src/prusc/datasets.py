"""Synthetic datasets with controllable spurious attributes.

Attribute labels ride along for evaluation only; training code receives
``inputs`` and ``labels`` and nothing else.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CLUSTER_COLUMN = "cluster"


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    attributes: dict[str, np.ndarray] = field(default_factory=dict)
    clusters: np.ndarray | None = None
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            self.inputs = self.inputs.reshape(len(self.labels), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.attributes = {k: np.asarray(v, dtype=np.int64) for k, v in self.attributes.items()}
        n = len(self.labels)
        for name, v in self.attributes.items():
            if len(v) != n:
                raise ValueError(f"attribute {name!r} has length {len(v)}, expected {n}")
        if self.clusters is not None:
            self.clusters = np.asarray(self.clusters, dtype=np.int64)
            if len(self.clusters) != n:
                raise ValueError("cluster ids do not match sample count")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.meta.get("n_classes", self.labels.max() + 1 if len(self) else 0))

    def attribute_values(self, attribute: str) -> int:
        a = self.attributes[attribute]
        return int(self.meta.get("attribute_values", {}).get(attribute, max(2, a.max() + 1 if len(a) else 2)))

    def groups(self, attribute: str) -> np.ndarray:
        """Group id y * |A| + a for one attribute."""
        if attribute not in self.attributes:
            raise KeyError(f"unknown attribute {attribute!r}")
        return self.labels * self.attribute_values(attribute) + self.attributes[attribute]

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], {k: v[idx] for k, v in self.attributes.items()},
                              None if self.clusters is None else self.clusters[idx],
                              split or self.split, dict(self.meta))

    def with_clusters(self, clusters) -> "LabeledDataset":
        return replace(self, clusters=np.asarray(clusters, dtype=np.int64))


# --- two moons --------------------------------------------------------------


@dataclass
class SpuriousMoonsConfig:
    n: int = 2000
    noise: float = 0.1
    rho: float = 0.95
    spur_shift: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if self.n < 4:
            raise ValueError("need at least 4 samples")
        if self.noise < 0 or self.spur_shift <= 0:
            raise ValueError("noise must be >= 0 and spur_shift > 0")


MOONS_ATTRIBUTE = "x1_aligned"


def gen_two_moons(cfg: SpuriousMoonsConfig) -> LabeledDataset:
    """Interleaving moons; with probability rho, x1 is pushed by +shift
    (class 1) or -shift (class 0). The attribute records the push."""
    rng = np.random.default_rng(cfg.seed)
    n0 = cfg.n // 2
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(cfg.n - n0, np.int64)])
    t = rng.uniform(0.0, np.pi, cfg.n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(t), np.sin(t)], axis=1),
                 np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1))
    x = x + rng.normal(0.0, cfg.noise, x.shape)
    a = (rng.random(cfg.n) < cfg.rho).astype(np.int64)
    x[:, 0] += a * (2 * y - 1) * cfg.spur_shift
    perm = rng.permutation(cfg.n)
    return LabeledDataset(x[perm], y[perm], {MOONS_ATTRIBUTE: a[perm]},
                          meta={"generator": "moons", "spur_shift": cfg.spur_shift, "n_classes": 2})


# --- image grids --------------------------------------------------------------

CORNERS = ("tl", "tr", "bl", "br")
BORDERS = ("top", "bottom", "left", "right")


@dataclass
class AttributeSpec:
    name: str
    rho: float = 0.95
    kind: str = "corner"  # corner | border
    where: str = "tl"
    size: int = 3
    levels: tuple[float, float] = (0.0, 1.0)

    def region(self, grid: int) -> tuple[slice, slice]:
        s = self.size
        if self.kind == "corner":
            if self.where not in CORNERS:
                raise ValueError(f"corner must be one of {CORNERS}")
            rows = slice(0, s) if self.where[0] == "t" else slice(grid - s, grid)
            cols = slice(0, s) if self.where[1] == "l" else slice(grid - s, grid)
            return rows, cols
        if self.kind == "border":
            if self.where not in BORDERS:
                raise ValueError(f"border must be one of {BORDERS}")
            mid = slice(s, grid - s)
            return {"top": (slice(0, 1), mid), "bottom": (slice(grid - 1, grid), mid),
                    "left": (mid, slice(0, 1)), "right": (mid, slice(grid - 1, grid))}[self.where]
        raise ValueError(f"unknown attribute rendering {self.kind!r}")


@dataclass
class SyntheticImageConfig:
    grid: int = 12
    classes: int = 2
    per_class: int = 500
    attributes: list[AttributeSpec] = field(default_factory=lambda: [
        AttributeSpec("corner", 0.95, "corner", "tl"),
        AttributeSpec("border", 0.95, "border", "right"),
    ])
    core_intensity: float = 0.1
    pixel_noise: float = 0.1
    jitter: int = 0
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.attributes = [a if isinstance(a, AttributeSpec) else AttributeSpec(**a) for a in self.attributes]
        for a in self.attributes:
            if not 0 <= a.rho <= 1:
                raise ValueError(f"attribute {a.name!r}: rho must lie in [0, 1]")
        if not 2 <= self.classes <= len(_TEMPLATES):
            raise ValueError(f"classes must be between 2 and {len(_TEMPLATES)}")
        occupied = np.zeros((self.grid, self.grid), dtype=int)
        for a in self.attributes:
            occupied[a.region(self.grid)] += 1
        if occupied.max() > 1:
            raise ValueError("attribute regions overlap")
        c0, c1 = self._core_box()
        if occupied[c0:c1, c0:c1].any():
            raise ValueError("attribute region overlaps the core pattern")

    def _core_box(self):
        lo = (self.grid - 4) // 2 - self.jitter
        return lo, lo + 4 + 2 * self.jitter


def _template(rows):
    return np.array([[float(c) for c in r] for r in rows])


_TEMPLATES = [
    _template(["0110", "1001", "1001", "0110"]),  # ring
    _template(["1001", "0110", "0110", "1001"]),  # diagonal cross
    _template(["0110", "1111", "1111", "0110"]),  # blob
    _template(["1111", "0000", "0000", "1111"]),  # bars
]


def gen_synthetic_images(cfg: SyntheticImageConfig) -> LabeledDataset:
    """Noisy class templates in the centre plus noise-free attribute markers.

    Each attribute takes the sample's class value with probability rho and
    a uniformly chosen other value otherwise.
    """
    rng = np.random.default_rng(cfg.seed)
    g, k = cfg.grid, cfg.classes
    n = cfg.per_class * k
    y = np.repeat(np.arange(k), cfg.per_class)
    imgs = np.zeros((n, g, g))
    base = (g - 4) // 2
    shifts = rng.integers(-cfg.jitter, cfg.jitter + 1, size=(n, 2))
    for i in range(n):
        r, c = base + shifts[i, 0], base + shifts[i, 1]
        imgs[i, r:r + 4, c:c + 4] = cfg.core_intensity * _TEMPLATES[y[i]]
    imgs += rng.normal(0.0, cfg.pixel_noise, imgs.shape)
    np.clip(imgs, 0.0, 1.0, out=imgs)
    attrs = {}
    for spec in cfg.attributes:
        aligned = rng.random(n) < spec.rho
        other = (y + rng.integers(1, k, size=n)) % k
        a = np.where(aligned, y, other).astype(np.int64)
        _paint(imgs, spec, a, k, g)
        attrs[spec.name] = a
    labels = y.copy()
    if cfg.label_noise > 0:
        flip = rng.random(n) < cfg.label_noise
        labels[flip] = (labels[flip] + rng.integers(1, k, size=flip.sum())) % k
    perm = rng.permutation(n)
    meta = {"generator": "images", "grid": g, "n_classes": k,
            "attribute_specs": {s.name: {"kind": s.kind, "where": s.where, "size": s.size,
                                         "levels": list(s.levels)} for s in cfg.attributes}}
    return LabeledDataset(imgs.reshape(n, -1)[perm], labels[perm], {n_: v[perm] for n_, v in attrs.items()},
                          meta=meta)


def marker_levels(levels, k):
    return np.linspace(levels[0], levels[1], k)


def _paint(imgs, spec: AttributeSpec, values, k, grid):
    rows, cols = spec.region(grid)
    lv = marker_levels(spec.levels, k)
    imgs[:, rows, cols] = lv[values][:, None, None]


# --- splitting and persistence ----------------------------------------------


def split(ds: LabeledDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0,
          balanced_test_attribute: str | None = None):
    """Shuffled train/val/test split; optionally group-balance the test part."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_tr = int(round(fractions[0] * n))
    n_va = int(round(fractions[1] * n))
    tr, va, te = perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:]
    if balanced_test_attribute is not None:
        te = balanced_indices(ds.subset(te), balanced_test_attribute, seed, base=te)
    return ds.subset(tr, "train"), ds.subset(va, "val"), ds.subset(te, "test")


def balanced_indices(ds: LabeledDataset, attribute: str, seed: int = 0, base=None) -> np.ndarray:
    """Indices of an equal-count-per-(y, a) subsample, size = groups * min group."""
    base = np.arange(len(ds)) if base is None else np.asarray(base)
    n_attr = ds.attribute_values(attribute)
    groups = ds.groups(attribute)
    rng = np.random.default_rng(seed)
    members = []
    for y in range(ds.n_classes):
        for a in range(n_attr):
            idx = np.flatnonzero(groups == y * n_attr + a)
            if idx.size == 0:
                raise ValueError(f"group (y={y}, {attribute}={a}) is empty; cannot balance")
            members.append(idx)
    m = min(len(idx) for idx in members)
    picked = np.concatenate([np.sort(rng.choice(idx, m, replace=False)) for idx in members])
    return base[picked]


def _meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def save_dataset(ds: LabeledDataset, path):
    """CSV rows at 17 significant digits; generator meta goes to a JSON sidecar."""
    d = ds.inputs.shape[1]
    header = [f"x_{i}" for i in range(d)] + ["y"] + list(ds.attributes)
    if ds.clusters is not None:
        header.append(CLUSTER_COLUMN)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            row = [format(v, ".17g") for v in ds.inputs[i]] + [str(ds.labels[i])]
            row += [str(v[i]) for v in ds.attributes.values()]
            if ds.clusters is not None:
                row.append(str(ds.clusters[i]))
            w.writerow(row)
    if ds.meta:
        _meta_path(path).write_text(json.dumps(ds.meta, indent=2))


def load_dataset(path, attributes: list[str] | None = None, split_tag: str = "train") -> LabeledDataset:
    """Read a dataset CSV; ``attributes`` lists columns that must be present."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError(f"{path}: line 1: missing header")
    header = rows[0]
    xs = [i for i, h in enumerate(header) if h.startswith("x_")]
    if [header[i] for i in xs] != [f"x_{j}" for j in range(len(xs))] or "y" not in header:
        raise DatasetFormatError(f"{path}: line 1: header must be x_0..x_(d-1), y, attributes")
    yi = header.index("y")
    ci = header.index(CLUSTER_COLUMN) if CLUSTER_COLUMN in header else None
    attr_cols = {h: i for i, h in enumerate(header) if i not in xs and i != yi and i != ci}
    for name in attributes or []:
        if name not in attr_cols:
            raise DatasetFormatError(f"{path}: attribute column {name!r} missing")
    n = len(rows) - 1
    X = np.zeros((n, len(xs)))
    y = np.zeros(n, np.int64)
    A = {h: np.zeros(n, np.int64) for h in attr_cols}
    C = np.zeros(n, np.int64) if ci is not None else None
    for r, row in enumerate(rows[1:]):
        line = r + 2
        if len(row) != len(header):
            raise DatasetFormatError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
        try:
            X[r] = [float(row[i]) for i in xs]
            y[r] = int(row[yi])
            for h, i in attr_cols.items():
                A[h][r] = int(row[i])
            if C is not None:
                C[r] = int(row[ci])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {line}: {exc}") from None
    meta_file = _meta_path(path)
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    return LabeledDataset(X, y, A, C, split_tag, meta)
