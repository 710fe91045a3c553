"""Three-stage subnetwork extraction and the experiment harnesses built on it.

Training stages only ever see ``inputs`` and class ``labels``; attribute
labels are touched by the evaluation calls at the end of each harness.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import evaluation as ev
from .autodiff import SGD, Adam, DenseNetwork, backward, cross_entropy, embed, forward, predict, take
from .clustering import ClusterModel, ClusterSummary, kmeans, label_clusters
from .config import ERMConfig, FinetuneConfig, MaskConfig, PipelineConfig, TaskConfig
from .datasets import LabeledDataset
from .masking import MaskedModel, finalize_subnetwork, freeze, init_logits, keep_ratio, masked_forward, sparsity_penalty
from .taskdata import TaskDataset, batch_contrastive_loss, build_task_dataset, p_from_fraction, sample_variant_batch

log = logging.getLogger(__name__)

SETTINGS = {
    # setting: (prune, conloss in pruning, finetune, conloss in finetune, last layer only)
    1: (True, True, True, False, False),
    2: (True, True, True, True, False),
    3: (True, False, True, False, False),
    4: (True, True, False, False, False),
    5: (False, False, True, True, False),
    6: (False, False, True, False, False),
    7: (False, False, True, False, True),
}


class TrainingDiverged(RuntimeError):
    pass


def stage_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _minibatches(idx: np.ndarray, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(idx)
    for i in range(0, len(perm), batch_size):
        yield perm[i:i + batch_size]


def _accuracy(net, X, y) -> float:
    return float((predict(net, X) == y).mean()) if len(y) else float("nan")


# --- stage 0: ERM -----------------------------------------------------------


def train_erm(X, y, hidden, cfg: ERMConfig, seed: int = 0, net: DenseNetwork | None = None,
              n_classes: int | None = None, eval_set=None):
    """Minibatch SGD on cross-entropy. Returns ``(net, curves)``.

    ``train_acc`` per epoch is the running accuracy of the minibatch
    predictions made during that epoch (no extra pass over the data).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if net is None:
        k = n_classes or int(y.max()) + 1
        net = DenseNetwork.init([X.shape[1], *hidden, k], seed=stage_seed(seed, "init"))
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(stage_seed(seed, "erm-batches"))
    curves = []
    for epoch in range(cfg.epochs):
        losses, hits = [], 0
        for b in _minibatches(np.arange(len(y)), cfg.batch_size, rng):
            logits, _ = forward(net, X[b])
            loss = cross_entropy(logits, y[b])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"ERM loss became non-finite in epoch {epoch}")
            hits += int((logits.data.argmax(axis=1) == y[b]).sum())
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "train_acc": hits / max(len(y), 1)}
        if eval_set is not None:
            row["test_acc"] = _accuracy(net, *eval_set)
        curves.append(row)
    return net, curves


# --- stage 1: clustering and D_task -------------------------------------------


@dataclass
class BaseArtifacts:
    erm: DenseNetwork
    clusters: ClusterModel
    summary: ClusterSummary
    task: TaskDataset
    erm_curves: list = field(default_factory=list)


def cluster_and_sample(net: DenseNetwork, X, y, cfg: PipelineConfig):
    E = embed(net, X)
    km = kmeans(E, cfg.clustering.k, seed=stage_seed(cfg.seed + cfg.clustering.seed, "kmeans"),
                max_iter=cfg.clustering.max_iter, tol=cfg.clustering.tol)
    n_classes = net.sizes[-1]
    summary = label_clusters(km, y, threshold=cfg.clustering.threshold, n_classes=n_classes)
    p = cfg.taskdata.p or p_from_fraction(len(y), n_classes, cfg.taskdata.fraction)
    task = build_task_dataset(y, summary, p, seed=stage_seed(cfg.seed, "taskdata"))
    return km, summary, task


def prepare_base(train: LabeledDataset, cfg: PipelineConfig, erm: DenseNetwork | None = None) -> BaseArtifacts:
    X, y = train.inputs, train.labels
    curves = []
    if erm is None:
        erm, curves = train_erm(X, y, cfg.hidden, cfg.erm, cfg.seed, n_classes=train.n_classes)
    km, summary, task = cluster_and_sample(erm, X, y, cfg)
    return BaseArtifacts(erm, km, summary, task, curves)


# --- stage 2: mask training ---------------------------------------------------


def _contrastive_setup(y, clusters, members, tcfg: TaskConfig, variant: str):
    n_clusters = np.unique(np.asarray(clusters)[members]).size
    anchors = tcfg.anchors if variant == "supcon" else min(tcfg.anchors, n_clusters)
    return anchors


def _step_inputs(ce_idx, batch, n):
    """Row indices for one forward pass plus the dataset-index -> row map."""
    union = np.unique(np.concatenate([np.asarray(batch.anchors, dtype=np.int64)]
                                     + [np.asarray(p, dtype=np.int64) for p in batch.positives]
                                     + [np.asarray(q, dtype=np.int64) for q in batch.negatives]))
    rows = np.full(n, -1, dtype=np.int64)
    rows[union] = len(ce_idx) + np.arange(union.size)
    return np.concatenate([ce_idx, union]), rows


def train_mask(erm: DenseNetwork, X, y, clusters, task: TaskDataset, mcfg: MaskConfig, tcfg: TaskConfig,
               seed: int = 0, variant: str = "default", use_conloss: bool = True):
    """Train mask logits on D_task with CE + alpha * sparsity + beta * contrastive.

    Base weights never change. Returns ``(MaskedModel, curves)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    masks = init_logits(erm, mcfg.init, mcfg.tau, mcfg.gamma, mcfg.include_classifier)
    model = MaskedModel(erm, masks, seed=stage_seed(seed, "mask-noise"))
    if mcfg.optimizer == "adam":
        opt = Adam(model.parameters(), mcfg.lr)
    else:
        opt = SGD(model.parameters(), mcfg.lr, mcfg.momentum, 0.0)
    rng = np.random.default_rng(stage_seed(seed, "mask-batches"))
    members = np.asarray(task.indices, dtype=np.int64)
    anchors = _contrastive_setup(y, clusters, members, tcfg, variant) if use_conloss else 0
    use_con = use_conloss and mcfg.beta > 0
    curves = []
    for epoch in range(mcfg.epochs):
        stats = {"ce": [], "con": [], "empty": 0, "steps": 0}
        for ce_idx in _minibatches(members, mcfg.batch_size, rng):
            batch = None
            if use_con:
                batch = sample_variant_batch(variant, y, clusters, rng, anchors, tcfg.positives, tcfg.negatives,
                                             members, tcfg.tau)
            if batch is not None and len(batch):
                idx, rows = _step_inputs(ce_idx, batch, len(y))
            else:
                idx, rows = ce_idx, None
                stats["empty"] += use_con
            logits, emb = masked_forward(model, X[idx])
            ce = cross_entropy(take(logits, np.arange(len(ce_idx))), y[ce_idx])
            total = ce
            if mcfg.alpha:
                total = total + mcfg.alpha * sparsity_penalty(masks, mcfg.penalty)
            if rows is not None:
                con = batch_contrastive_loss(batch, emb, tcfg.tau, rows=rows)
                total = total + mcfg.beta * con
                stats["con"].append(con.item())
            if not np.isfinite(total.data):
                raise TrainingDiverged(f"mask loss became non-finite in epoch {epoch}")
            opt.zero_grad()
            backward(total)
            opt.step()
            masks.clamp(mcfg.clamp)
            stats["ce"].append(ce.item())
            stats["steps"] += 1
        if use_con and stats["empty"] == stats["steps"]:
            raise RuntimeError(f"every contrastive batch in mask epoch {epoch} was empty; "
                               "try a different k or smaller positive/negative counts")
        masks.mode = "deterministic"
        curves.append({"epoch": epoch, "ce": float(np.mean(stats["ce"])),
                       "con": float(np.mean(stats["con"])) if stats["con"] else 0.0,
                       "keep_ratio": keep_ratio(masks), "empty_batches": stats["empty"]})
        masks.mode = "sampled"
    return model, curves


# --- stage 3: extraction and fine-tuning --------------------------------------


def extract(model: MaskedModel, prune_ratio: float | None = None) -> tuple[DenseNetwork, MaskedModel]:
    """Binarise (gamma threshold or exact pruning ratio) and finalise."""
    frozen = MaskedModel(model.base, freeze(model.masks, prune_ratio or None), model.seed)
    return finalize_subnetwork(frozen), frozen


def finetune(net: DenseNetwork, X, y, idx, fcfg: FinetuneConfig, seed: int = 0, last_layer_only: bool = False,
             contrastive: dict | None = None):
    """Cross-entropy fine-tuning on ``idx`` (a copy is trained).

    ``contrastive`` = dict(clusters, tcfg, beta, variant) adds the
    contrastive term. Fixed layer masks keep pruned weights at zero.
    """
    net = net.copy()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    idx = np.asarray(idx, dtype=np.int64)
    if last_layer_only:
        params = [net.layers[-1].weight, net.layers[-1].bias]
        for l in net.layers[:-1]:
            l.weight.requires_grad = l.bias.requires_grad = False
    else:
        params = net.parameters()
    opt = SGD(params, fcfg.lr, fcfg.momentum, fcfg.weight_decay)
    rng = np.random.default_rng(stage_seed(seed, "finetune"))
    curves = []
    anchors = 0
    if contrastive is not None:
        anchors = _contrastive_setup(y, contrastive["clusters"], idx, contrastive["tcfg"], contrastive["variant"])
    for epoch in range(fcfg.epochs):
        losses = []
        for b in _minibatches(idx, fcfg.batch_size, rng):
            rows, batch = None, None
            if contrastive is not None:
                t = contrastive["tcfg"]
                batch = sample_variant_batch(contrastive["variant"], y, contrastive["clusters"], rng, anchors,
                                             t.positives, t.negatives, idx, t.tau)
            if batch is not None and len(batch):
                rows_idx, rows = _step_inputs(b, batch, len(y))
            else:
                rows_idx = b
            logits, emb = forward(net, X[rows_idx])
            loss = cross_entropy(take(logits, np.arange(len(b))), y[b])
            if rows is not None:
                loss = loss + contrastive["beta"] * batch_contrastive_loss(batch, emb, contrastive["tcfg"].tau,
                                                                           rows=rows)
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(loss.item())
        curves.append({"epoch": epoch, "loss": float(np.mean(losses)), "task_acc": _accuracy(net, X[idx], y[idx])})
    for l in net.layers:
        l.weight.requires_grad = l.bias.requires_grad = True
    return net, curves


def extract_and_finetune(model: MaskedModel, X, y, task: TaskDataset, cfg: PipelineConfig, seed: int = 0):
    net, frozen = extract(model, cfg.masking.prune_ratio)
    tuned, curves = finetune(net, X, y, task.indices, cfg.finetune, seed)
    return tuned, frozen, curves


# --- full runs ----------------------------------------------------------------


@dataclass
class RunArtifacts:
    base: BaseArtifacts
    setting: int
    model: DenseNetwork
    mask_model: MaskedModel | None
    keep_ratio: float
    reports: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)


def run_setting(base: BaseArtifacts, train: LabeledDataset, cfg: PipelineConfig, setting: int = 1,
                variant: str | None = None) -> RunArtifacts:
    """Run one ablation setting (1 = the full method) from shared stage-1 artifacts."""
    if setting not in SETTINGS:
        raise ValueError(f"ablation setting must be one of 1..7, got {setting}")
    prune, con_pr, do_ft, con_ft, last_only = SETTINGS[setting]
    variant = variant or cfg.variant
    X, y = train.inputs, train.labels
    clusters = base.clusters.assignments
    curves = {"erm": base.erm_curves}
    mask_model, kr = None, 1.0
    net = base.erm
    if prune:
        mm, curves["mask"] = train_mask(base.erm, X, y, clusters, base.task, cfg.masking, cfg.taskdata,
                                        cfg.seed, variant, use_conloss=con_pr)
        net, mask_model = extract(mm, cfg.masking.prune_ratio)
        kr = keep_ratio(mask_model.masks)
    if do_ft:
        contrastive = None
        if con_ft:
            contrastive = {"clusters": clusters, "tcfg": cfg.taskdata, "beta": cfg.masking.beta, "variant": variant}
        net, curves["finetune"] = finetune(net, X, y, base.task.indices, cfg.finetune, cfg.seed,
                                           last_layer_only=last_only, contrastive=contrastive)
    return RunArtifacts(base, setting, net, mask_model, kr, {}, curves)


def run_pipeline(train: LabeledDataset, test: LabeledDataset | None, cfg: PipelineConfig,
                 attributes=None) -> RunArtifacts:
    """ERM -> embed -> k-means -> D_task -> mask training -> finetune -> evaluate."""
    cfg.validate()
    base = prepare_base(train, cfg)
    run = run_setting(base, train, cfg, 1)
    if test is not None:
        attach_reports(run, train, test, attributes, cfg.seed)
    return run


def attach_reports(run: RunArtifacts, train: LabeledDataset, test: LabeledDataset, attributes=None, seed: int = 0):
    attributes = list(test.attributes) if attributes is None else list(attributes)
    counts = {a: ev.group_counts(train, a) for a in attributes}
    run.reports["erm"] = ev.evaluate(run.base.erm, test, attributes, counts, seed)
    run.reports["final"] = ev.evaluate(run.model, test, attributes, counts, seed, keep=run.keep_ratio)
    return run


def run_ablation(setting: int, base: BaseArtifacts, train, test, cfg: PipelineConfig, attributes=None) -> dict:
    run = run_setting(base, train, cfg, setting)
    attributes = list(test.attributes) if attributes is None else list(attributes)
    counts = {a: ev.group_counts(train, a) for a in attributes}
    return ev.evaluate(run.model, test, attributes, counts, cfg.seed, keep=run.keep_ratio)


def sweep_pruning_ratio(base: BaseArtifacts, train, test, cfg: PipelineConfig, ratios, attribute,
                        mask_model: MaskedModel | None = None, do_finetune: bool = False) -> list[dict]:
    """Evaluate one trained mask at several exact pruning ratios.

    Each ratio thresholds the same trained logits; nothing is retrained
    unless ``do_finetune``. ``attribute`` is a name or a list of names and
    ``WGA`` is the worst over them.
    """
    attrs = [attribute] if isinstance(attribute, str) else list(attribute)
    for r in ratios:
        if not 0 < r < 1:
            raise ValueError(f"pruning ratio must lie in (0, 1), got {r}")
    X, y = train.inputs, train.labels
    if mask_model is None:
        mask_model, _ = train_mask(base.erm, X, y, base.clusters.assignments, base.task, cfg.masking,
                                   cfg.taskdata, cfg.seed, cfg.variant)
    rows = []
    for r in ratios:
        net, frozen = extract(mask_model, r)
        if do_finetune:
            net, _ = finetune(net, X, y, base.task.indices, cfg.finetune, cfg.seed)
        rep = ev.evaluate(net, test, attrs, seed=cfg.seed)
        per = {a: rep["attributes"][a]["WGA"] for a in attrs}
        row = {"ratio": r, "keep_ratio": keep_ratio(frozen.masks), "AVG": rep["AVG"], "WGA": min(per.values())}
        if len(attrs) > 1:
            row.update({f"WGA.{a}": v for a, v in per.items()})
        rows.append(row)
    return rows


# --- two moons demonstration --------------------------------------------------


def random_mask_network(sizes, seed: int, keep: float = 0.5) -> DenseNetwork:
    """Fresh network with one fixed Bernoulli(keep) mask per layer."""
    net = DenseNetwork.init(sizes, seed=stage_seed(seed, "init"))
    rng = np.random.default_rng(stage_seed(seed, "random-mask"))
    for l in net.layers:
        l.mask = (rng.random(l.shape) < keep).astype(np.float64)
    return net


def demo_two_moons(train: LabeledDataset, test: LabeledDataset, cfg: PipelineConfig, attribute: str,
                   resolution: int = 100, bounds=(-3.0, 4.0, -2.0, 2.5), erm: DenseNetwork | None = None) -> dict:
    """Dense ERM, randomly masked (50%) and mask-trained-with-contrastive variants."""
    X, y = train.inputs, train.labels
    base = prepare_base(train, cfg, erm=erm)
    rand_net, rand_curves = train_erm(X, y, cfg.hidden, cfg.erm, cfg.seed,
                                      net=random_mask_network([X.shape[1], *cfg.hidden, 2], cfg.seed))
    run = run_setting(base, train, cfg, 1)
    models = {"erm": base.erm, "random_mask": rand_net, "prusc": run.model}
    out = {"models": models, "rasters": {}, "flip_rate": {}, "reports": {}, "keep_ratio": run.keep_ratio,
           "train_acc": {}, "base": base}
    counts = {attribute: ev.group_counts(train, attribute)}
    for name, m in models.items():
        out["rasters"][name] = ev.decision_boundary_raster(m, bounds, resolution)
        out["flip_rate"][name] = ev.spurious_flip_rate(m, test, attribute)
        out["reports"][name] = ev.evaluate(m, test, [attribute], counts, cfg.seed)
        out["train_acc"][name] = _accuracy(m, X, y)
    return out
