"""Command-line front end: ``prusc <command> [flags]``.

Every command writes into an output directory (``--out``, else
``$PRUSC_OUTPUT``, else ``runs/``) and exits nonzero with a one-line
diagnostic when a stage fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import figures
from . import pipeline as P
from .autodiff import DenseNetwork, embed
from .clustering import ClusterModel, purity
from .config import RunConfig, dump_config, load_config
from .datasets import (AttributeSpec, SpuriousMoonsConfig, SyntheticImageConfig, gen_synthetic_images,
                       gen_two_moons, load_dataset, save_dataset, split)

log = logging.getLogger("prusc")

OUTPUT_ENV = "PRUSC_OUTPUT"
class CLIError(RuntimeError):
    pass


# --- helpers ------------------------------------------------------------------


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _outdir(args, cfg: RunConfig | None = None) -> Path:
    out = args.out or os.environ.get(OUTPUT_ENV) or (cfg.output if cfg else None) or "runs"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: RunConfig, out: Path):
    dump_config(cfg, out / "config.toml")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _write_csv(path, rows: list[dict]):
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _seeds(cfg: RunConfig, n: int | None):
    n = cfg.seeds if n is None else n
    return [cfg.pipeline.seed + i for i in range(n)]


def make_data(cfg: RunConfig, seed: int | None = None):
    """Generate and split the configured dataset; returns (train, val, test)."""
    d = cfg.data
    seed = d.seed if seed is None else seed
    if d.kind == "moons":
        m = d.moons
        ds = gen_two_moons(SpuriousMoonsConfig(m.n, m.noise, m.rho, m.spur_shift, seed))
    elif d.kind == "images":
        im = d.images
        attrs = tuple(AttributeSpec(a.name, a.rho, a.kind, a.where, a.size, tuple(a.levels)) for a in im.attributes)
        ds = gen_synthetic_images(SyntheticImageConfig(
            grid=im.grid, classes=im.classes, per_class=im.per_class, attributes=attrs,
            core_intensity=im.core_intensity, pixel_noise=im.pixel_noise, jitter=im.jitter,
            label_noise=im.label_noise, seed=seed))
    else:
        raise CLIError(f"unknown data kind {d.kind!r}")
    fractions = d.moons.split if d.kind == "moons" else d.split
    return split(ds, tuple(fractions), seed=seed)


def _seeded(cfg: RunConfig, seed: int) -> RunConfig:
    """Copy of ``cfg`` whose data and pipeline seeds are both ``seed``."""
    from copy import deepcopy
    c = deepcopy(cfg)
    c.pipeline.seed = seed
    c.data.seed = seed
    return c


def _report_row(prefix: dict, report: dict) -> dict:
    row = dict(prefix)
    row["AVG"] = report["AVG"]
    if "keep_ratio" in report:
        row["keep_ratio"] = report["keep_ratio"]
    for attr, m in report["attributes"].items():
        for key in ("WGA", "MGA", "UA", "UAG"):
            if key in m:
                row[f"{attr}.{key}"] = m[key]
    return row


def _save_clusters(path, model: ClusterModel, summary, task):
    _write_json(path, {"k": model.k, "centroids": model.centroids, "assignments": model.assignments,
                       "inertia": model.inertia, "history": model.history, "summary": summary.to_dict(),
                       "task": {"indices": task.indices, "p": task.p, "provenance": task.provenance}})


def _load_clusters(path):
    doc = json.loads(Path(path).read_text())
    a = np.asarray(doc["assignments"], dtype=np.int64)
    model = ClusterModel(doc["k"], np.asarray(doc["centroids"]), a, doc["inertia"], doc["history"])
    return model, np.asarray(doc["task"]["indices"], dtype=np.int64)


# --- commands -----------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _config(args.config)
    out = _outdir(args, cfg)
    for name, ds in zip(("train", "val", "test"), make_data(cfg)):
        save_dataset(ds, out / f"{name}.csv")
    _snapshot(cfg, out)
    print(f"wrote train/val/test CSVs to {out}")


def cmd_train_erm(args):
    cfg = _config(args.config)
    out = _outdir(args, cfg)
    train = load_dataset(args.data)
    pc = cfg.pipeline
    net, curves = P.train_erm(train.inputs, train.labels, pc.hidden, pc.erm, pc.seed)
    net.save(out / "erm.json")
    _write_csv(out / "erm_curves.csv", curves)
    _snapshot(cfg, out)
    print(f"train accuracy {P._accuracy(net, train.inputs, train.labels):.4f}")


def cmd_cluster(args):
    cfg = _config(args.config)
    out = _outdir(args, cfg)
    net = DenseNetwork.load(args.model)
    train = load_dataset(args.data)
    if args.k:
        cfg.pipeline.clustering.k = args.k
    k = cfg.pipeline.clustering.k
    model, summary, task = P.cluster_and_sample(net, train.inputs, train.labels, cfg.pipeline)
    _save_clusters(out / "clusters.json", model, summary, task)
    save_dataset(train.with_clusters(model.assignments).subset(task.indices), out / "taskdata.csv")
    report = {"k": k, "class": purity(model.assignments, train.labels)[1],
              "attributes": {a: purity(model.assignments, v)[1] for a, v in train.attributes.items()}}
    _write_json(out / "purity.json", report)
    print(json.dumps({"minority": {str(c): len(v) for c, v in summary.minority.items()},
                      "taskdata": len(task), "purity": report["attributes"]}))


def cmd_prune(args):
    cfg = _config(args.config)
    out = _outdir(args, cfg)
    net = DenseNetwork.load(args.model)
    train = load_dataset(args.data)
    model, task_idx = _load_clusters(args.clusters)
    pc = cfg.pipeline
    task = P.TaskDataset(task_idx, 0, [], {})
    mm, curves = P.train_mask(net, train.inputs, train.labels, model.assignments, task, pc.masking, pc.taskdata,
                              pc.seed, pc.variant)
    subnet, frozen = P.extract(mm, pc.masking.prune_ratio)
    subnet.save(out / "subnet.json")
    frozen.masks.save(out / "masks.json")
    _write_csv(out / "mask_curves.csv", curves)
    _snapshot(cfg, out)
    print(f"keep_ratio {P.keep_ratio(frozen.masks):.6f}")


def cmd_finetune(args):
    cfg = _config(args.config)
    out = _outdir(args, cfg)
    net = DenseNetwork.load(args.subnet)
    task = load_dataset(args.taskdata)
    fc = cfg.pipeline.finetune
    if args.epochs is not None:
        fc.epochs = args.epochs
    tuned, curves = P.finetune(net, task.inputs, task.labels, np.arange(len(task)), fc, cfg.pipeline.seed)
    tuned.save(out / "model.json")
    _write_csv(out / "finetune_curves.csv", curves)
    _snapshot(cfg, out)
    print(f"task accuracy {curves[-1]['task_acc']:.4f}" if curves else "no epochs run")


def cmd_evaluate(args):
    out = _outdir(args)
    net = DenseNetwork.load(args.model)
    ds = load_dataset(args.data, split_tag="test")
    attrs = args.attributes.split(",") if args.attributes else list(ds.attributes)
    train_counts = None
    if args.train_data:
        tr = load_dataset(args.train_data)
        train_counts = {a: ev.group_counts(tr, a) for a in attrs}
    report = ev.evaluate(net, ds, attrs, train_counts, args.seed)
    for a in attrs:
        ev.group_accuracy(net, ds, a).to_csv(out / f"groups_{a}.csv")
    if args.flip:
        report["flip_rate"] = {a: ev.spurious_flip_rate(net, ds, a) for a in attrs}
    _write_json(out / "metrics.json", report)
    print(json.dumps({"AVG": report["AVG"], **{a: m["WGA"] for a, m in report["attributes"].items()}}))


def cmd_run(args):
    cfg = _config(args.config)
    out = _outdir(args, cfg)
    train, _, test = make_data(cfg)
    base = P.prepare_base(train, cfg.pipeline)
    run = P.run_setting(base, train, cfg.pipeline, cfg.pipeline.ablation)
    P.attach_reports(run, train, test, seed=cfg.pipeline.seed)
    base.erm.save(out / "erm.json")
    _save_clusters(out / "clusters.json", base.clusters, base.summary, base.task)
    run.model.save(out / "model.json")
    if run.mask_model is not None:
        run.mask_model.masks.save(out / "masks.json")
    for name, rows in run.curves.items():
        _write_csv(out / f"{name}_curves.csv", rows)
    _write_json(out / "metrics.json", run.reports)
    _snapshot(cfg, out)
    print(json.dumps({k: _report_row({}, r) for k, r in run.reports.items()}))


def _per_seed(cfg: RunConfig, seeds, body):
    rows = []
    for s in seeds:
        c = _seeded(cfg, s)
        train, _, test = make_data(c)
        base = P.prepare_base(train, c.pipeline)
        rows += body(c, s, base, train, test)
    return rows


def cmd_ablate(args):
    cfg = _config(args.config)
    out = _outdir(args, cfg)
    settings = [int(s) for s in args.settings.split(",")]

    def body(c, s, base, train, test):
        return [_report_row({"seed": s, "setting": k}, P.run_ablation(k, base, train, test, c.pipeline))
                for k in settings]

    rows = _per_seed(cfg, _seeds(cfg, args.seeds), body)
    _write_csv(out / "ablation.csv", rows)
    _snapshot(cfg, out)
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")


def cmd_variants(args):
    cfg = _config(args.config)
    out = _outdir(args, cfg)

    def body(c, s, base, train, test):
        rows = []
        for v in ("default", "neg_ablation", "supcon"):
            with _WarningCounter() as wc:
                run = P.run_setting(base, train, c.pipeline, 1, variant=v)
            counts = {a: ev.group_counts(train, a) for a in test.attributes}
            rep = ev.evaluate(run.model, test, None, counts, s, keep=run.keep_ratio)
            rows.append(_report_row({"seed": s, "variant": v, "empty_negative_warnings": wc.empty_neg}, rep))
        return rows

    rows = _per_seed(cfg, _seeds(cfg, args.seeds), body)
    _write_csv(out / "variants.csv", rows)
    _snapshot(cfg, out)
    print(f"wrote {len(rows)} rows to {out / 'variants.csv'}")


class _WarningCounter(logging.Handler):
    """Counts empty-negative-pool notices logged while sampling batches."""

    def __init__(self):
        super().__init__(logging.DEBUG)
        self.empty_neg = 0

    def emit(self, record):
        if "empty negative pool" in record.getMessage():
            self.empty_neg += 1

    def __enter__(self):
        lg = logging.getLogger("prusc.taskdata")
        self._level = lg.level
        lg.setLevel(logging.DEBUG)
        lg.addHandler(self)
        return self

    def __exit__(self, *exc):
        lg = logging.getLogger("prusc.taskdata")
        lg.removeHandler(self)
        lg.setLevel(self._level)


def cmd_sweep(args):
    cfg = _config(args.config)
    out = _outdir(args, cfg)
    ratios = [float(r) for r in args.ratios.split(",")]
    train, _, test = make_data(cfg)
    attr = args.attribute or list(test.attributes)[0]
    base = P.prepare_base(train, cfg.pipeline)
    rows = P.sweep_pruning_ratio(base, train, test, cfg.pipeline, ratios, attr, do_finetune=args.finetune)
    _write_csv(out / "sweep.csv", rows)
    figures.line_chart_svg([r["ratio"] for r in rows], {"AVG": [r["AVG"] for r in rows],
                                                         "WGA": [r["WGA"] for r in rows]},
                           out / "sweep.svg", title=f"pruning ratio sweep ({attr})", xlabel="pruning ratio",
                           ylabel="accuracy")
    _snapshot(cfg, out)
    print(f"wrote {out / 'sweep.csv'} and {out / 'sweep.svg'}")


def cmd_demo_moons(args):
    cfg = _config(args.config).for_moons()
    if args.hidden:
        cfg.pipeline.hidden = [int(h) for h in args.hidden.split(",")]
    out = _outdir(args, cfg)
    train, _, test = make_data(cfg)
    res = P.demo_two_moons(train, test, cfg.pipeline, "x1_aligned", resolution=args.resolution)
    rows = []
    bounds = (-3.0, 4.0, -2.0, 2.5)
    for name, raster in res["rasters"].items():
        figures.boundary_svg(raster, bounds, out / f"boundary_{name}.svg", title=name,
                             points=train.inputs, labels=train.labels)
        rep = res["reports"][name]
        rows.append({"model": name, "flip_rate": res["flip_rate"][name], "train_acc": res["train_acc"][name],
                     "test_AVG": rep["AVG"], "UA": rep["attributes"]["x1_aligned"]["UA"],
                     "WGA": rep["attributes"]["x1_aligned"]["WGA"]})
    _write_csv(out / "flip_rates.csv", rows)
    _snapshot(cfg, out)
    print(json.dumps({r["model"]: round(r["flip_rate"], 4) for r in rows}))


def cmd_pca(args):
    net = DenseNetwork.load(args.model)
    ds = load_dataset(args.data)
    out = _outdir(args)
    coords, _ = ev.pca_project(embed(net, ds.inputs), 2)
    color = ds.labels if args.color == "y" else ds.attributes[args.color]
    figures.scatter_svg(coords, color, out / f"pca_{args.color}.svg", title=f"embedding PCA ({args.color})")
    print(f"wrote {out / f'pca_{args.color}.svg'}")


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prusc", description="Spurious-feature-free subnetwork extraction.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or the config's output)")
        return p

    p = add("gen-data", cmd_gen_data, "generate and split a dataset")
    p.add_argument("--config")
    p = add("train-erm", cmd_train_erm, "stage 0: plain ERM training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p = add("cluster", cmd_cluster, "k-means on ERM embeddings, cluster summary, mask-training subset")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int)
    p = add("prune", cmd_prune, "mask training and binarization")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clusters", required=True)
    p = add("finetune", cmd_finetune, "fine-tune a subnetwork on the mask-training subset")
    p.add_argument("--config")
    p.add_argument("--subnet", required=True)
    p.add_argument("--taskdata", required=True)
    p.add_argument("--epochs", type=int)
    p = add("evaluate", cmd_evaluate, "metrics report and per-group tables")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attributes")
    p.add_argument("--train-data", help="train CSV, enables minority-group accuracy")
    p.add_argument("--flip", action="store_true", help="also report spurious flip rates")
    p.add_argument("--seed", type=int, default=0)
    p = add("run", cmd_run, "full pipeline for one config and seed")
    p.add_argument("--config")
    p = add("ablate", cmd_ablate, "ablation settings table")
    p.add_argument("--config")
    p.add_argument("--settings", default="1,2,3,4,5,6,7")
    p.add_argument("--seeds", type=int)
    p = add("variants", cmd_variants, "contrastive batch variants table")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int)
    p = add("sweep", cmd_sweep, "pruning-ratio sweep (CSV + SVG)")
    p.add_argument("--config")
    p.add_argument("--ratios", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--attribute")
    p.add_argument("--finetune", action="store_true", help="fine-tune each pruned network before evaluating")
    p = add("demo-moons", cmd_demo_moons, "two-moons boundaries and flip rates")
    p.add_argument("--config")
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--hidden", help="comma-separated hidden sizes (default: the config's)")
    p = add("pca", cmd_pca, "PCA scatter of a model's embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--color", default="y", help="'y' or an attribute name")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (Exception, KeyboardInterrupt) as exc:  # one-line diagnostic, nonzero exit
        print(f"prusc {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
