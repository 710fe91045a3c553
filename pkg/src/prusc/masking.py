"""Learnable weight masks: Gumbel-Sigmoid sampling, straight-through
binarisation, sparsity penalty and subnetwork finalisation."""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .autodiff import DenseNetwork, Tensor, ShapeError, _acc, _node, forward, sigmoid, stop_gradient, tsum

MODES = ("sampled", "deterministic", "frozen")
MASK_FORMAT = "prusc.mask"
MASK_VERSION = 1


@dataclass
class MaskSet:
    logits: list[Tensor]
    layer_ids: list[int]
    tau: float = 1.0
    gamma: float = 0.5
    mode: str = "sampled"
    binary: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("gumbel temperature must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("binarisation threshold must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}")

    @property
    def size(self) -> int:
        return sum(p.data.size for p in self.logits)

    def deterministic_gates(self) -> list[np.ndarray]:
        """Noise-free gate values sigmoid(pi / tau)."""
        return [1.0 / (1.0 + np.exp(-p.data / self.tau)) for p in self.logits]

    def clamp(self, bound: float):
        for p in self.logits:
            np.clip(p.data, -bound, bound, out=p.data)

    def to_dict(self) -> dict:
        doc = {"format": MASK_FORMAT, "version": MASK_VERSION, "tau": self.tau, "gamma": self.gamma,
               "mode": self.mode, "layer_ids": list(self.layer_ids),
               "shapes": [list(p.shape) for p in self.logits],
               "logits": [p.data.ravel().tolist() for p in self.logits]}
        if self.binary is not None:
            doc["binary"] = [base64.b64encode(np.packbits(b.astype(np.uint8).ravel()).tobytes()).decode()
                             for b in self.binary]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MaskSet":
        if doc.get("format") != MASK_FORMAT or doc.get("version") != MASK_VERSION:
            raise ValueError("not a supported mask checkpoint")
        shapes = [tuple(s) for s in doc["shapes"]]
        logits = [Tensor(np.asarray(v).reshape(s), requires_grad=True) for v, s in zip(doc["logits"], shapes)]
        binary = None
        if "binary" in doc:
            binary = []
            for raw, s in zip(doc["binary"], shapes):
                bits = np.unpackbits(np.frombuffer(base64.b64decode(raw), dtype=np.uint8))
                binary.append(bits[: int(np.prod(s))].reshape(s).astype(np.float64))
        return cls(logits, list(doc["layer_ids"]), doc["tau"], doc["gamma"], doc["mode"], binary)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MaskSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def masked_layer_ids(net: DenseNetwork, include_classifier: bool = False) -> list[int]:
    last = len(net.layers) - 1
    ids = [i for i in range(len(net.layers)) if include_classifier or i != last]
    return ids or [last]


def init_logits(net: DenseNetwork, init: float = 0.9, tau: float = 1.0, gamma: float = 0.5,
                include_classifier: bool = False) -> MaskSet:
    ids = masked_layer_ids(net, include_classifier)
    logits = [Tensor(np.full(net.layers[i].shape, float(init)), requires_grad=True) for i in ids]
    return MaskSet(logits, ids, tau, gamma, "sampled")


def gumbel_sigmoid_sample(pi: Tensor, tau: float, rng: np.random.Generator | None = None,
                          u1: np.ndarray | None = None, u2: np.ndarray | None = None) -> Tensor:
    """s = sigmoid((pi - log(log U1 / log U2)) / tau), noise held constant.

    Pass ``u1``/``u2`` to pin the uniforms; otherwise they come from ``rng``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if u1 is None or u2 is None:
        u1 = rng.random(pi.shape)
        u2 = rng.random(pi.shape)
    s = kernels.gumbel_sigmoid(np.ascontiguousarray(pi.data), np.ascontiguousarray(u1, dtype=np.float64),
                               np.ascontiguousarray(u2, dtype=np.float64), float(tau))
    out = None

    def bw():
        _acc(pi, out.grad * s * (1.0 - s) / tau)

    out = _node(s, (pi,), bw)
    return out


def binarize(s: Tensor, gamma: float = 0.5) -> Tensor:
    """m = [1{s > gamma} - s]_stop + s: hard forward, identity gradient.

    The forward value is exactly 0/1 whenever gamma >= 0.5 (the subtraction
    1 - s is then exact).
    """
    hard = (s.data > gamma).astype(np.float64)
    return stop_gradient(Tensor(hard) - s) + s


def draw_noise(masks: MaskSet, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(rng.random(p.shape), rng.random(p.shape)) for p in masks.logits]


def gates(masks: MaskSet, noise=None, rng=None) -> list[Tensor]:
    """Gate tensor per masked layer according to ``masks.mode``."""
    if masks.mode == "frozen":
        if masks.binary is None:
            raise ValueError("frozen mask set has no binary masks")
        return [Tensor(b) for b in masks.binary]
    out = []
    for j, pi in enumerate(masks.logits):
        if masks.mode == "sampled":
            u1, u2 = noise[j] if noise is not None else (rng.random(pi.shape), rng.random(pi.shape))
            s = gumbel_sigmoid_sample(pi, masks.tau, u1=u1, u2=u2)
        else:
            s = sigmoid(pi / masks.tau)
        out.append(binarize(s, masks.gamma))
    return out


class MaskedModel:
    """Frozen base network plus a mask set and its own noise stream."""

    def __init__(self, base: DenseNetwork, masks: MaskSet, seed: int = 0):
        for i, pi in zip(masks.layer_ids, masks.logits):
            if pi.shape != base.layers[i].shape:
                raise ShapeError(f"mask logits {pi.shape} do not match layer {i} weights {base.layers[i].shape}")
        self.base = base
        self.masks = masks
        self.seed = seed
        self.rng = np.random.Generator(np.random.Philox(key=seed))

    def parameters(self) -> list[Tensor]:
        return list(self.masks.logits)


def masked_forward(model: MaskedModel, x, rng=None, noise=None):
    """Forward with effective weights w * m; only the logits receive gradient."""
    g = gates(model.masks, noise=noise, rng=rng if rng is not None else model.rng)
    base_w = model.base.effective_weights()
    weights = [None] * len(model.base.layers)
    for i, m in zip(model.masks.layer_ids, g):
        weights[i] = Tensor(base_w[i]) * m
    return forward(model.base, x, weights=weights, frozen=True)


def sparsity_penalty(masks: MaskSet, form: str = "logit") -> Tensor:
    """Sum of all mask logits (``form="logit"``) or of sigmoid(logit)."""
    if form not in ("logit", "sigmoid"):
        raise ValueError(f"unknown penalty form {form!r}")
    total = None
    for pi in masks.logits:
        term = tsum(pi) if form == "logit" else tsum(sigmoid(pi))
        total = term if total is None else total + term
    return total


def binary_masks(masks: MaskSet) -> list[np.ndarray]:
    if masks.mode == "frozen":
        return masks.binary
    if masks.mode == "sampled":
        raise ValueError("keep ratio is stochastic in sampled mode")
    return [(s > masks.gamma).astype(np.float64) for s in masks.deterministic_gates()]


def keep_ratio(masks: MaskSet) -> float:
    bins = binary_masks(masks)
    total = sum(b.size for b in bins)
    return float(sum(b.sum() for b in bins) / total) if total else 1.0


def freeze(masks: MaskSet, prune_ratio: float | None = None) -> MaskSet:
    """Binarise deterministic gates into a frozen mask set.

    Without ``prune_ratio`` the threshold is gamma. With it, exactly
    ``round(prune_ratio * size)`` gates with the lowest values are closed
    (global ranking across layers, ties broken by position).
    """
    gates_ = masks.deterministic_gates()
    if prune_ratio is None:
        binary = [(s > masks.gamma).astype(np.float64) for s in gates_]
    else:
        if not 0 <= prune_ratio < 1:
            raise ValueError("prune ratio must lie in [0, 1)")
        flat = np.concatenate([s.ravel() for s in gates_])
        n_prune = int(round(prune_ratio * flat.size))
        keep = np.ones(flat.size)
        keep[np.argsort(flat, kind="stable")[:n_prune]] = 0.0
        binary, start = [], 0
        for s in gates_:
            binary.append(keep[start:start + s.size].reshape(s.shape))
            start += s.size
    logits = [Tensor(p.data.copy(), requires_grad=True) for p in masks.logits]
    return MaskSet(logits, list(masks.layer_ids), masks.tau, masks.gamma, "frozen", binary)


def finalize_subnetwork(model: MaskedModel) -> DenseNetwork:
    """Plain network with weights w * m; pruned entries stay pinned at zero."""
    masks = model.masks
    if masks.mode != "frozen" or masks.binary is None:
        raise ValueError("finalize needs a frozen binary mask set")
    for b in masks.binary:
        if not np.all((b == 0) | (b == 1)):
            raise ValueError("mask is not binary")
    net = model.base.copy()
    for i, b in zip(masks.layer_ids, masks.binary):
        layer = net.layers[i]
        layer.mask = b.copy() if layer.mask is None else layer.mask * b
        layer.weight.data *= layer.mask
    return net
