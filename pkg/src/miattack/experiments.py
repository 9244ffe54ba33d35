"""Experiment protocols run against a locally trained model zoo.

Each ``*_table`` function returns report rows (dicts using
``harness.REPORT_COLUMNS`` or ``harness.COSINE_COLUMNS``); deterministic for a
given zoo, dataset and seed, independent of ``workers``.
"""

import json
import logging
import os

import numpy as np

from . import data, nn, train
from .attacks import AttackConfig
from .ensemble import EnsembleSpec, FUSIONS
from .harness import attack_examples, cosine_report, evaluate, sweep

log = logging.getLogger(__name__)

BASE = AttackConfig("MI-FGSM", epsilon=16.0, iterations=10, mu=1.0)
MU_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)
ITER_GRID = tuple(range(1, 11))


# ---------------------------------------------------------------------------
# zoo


def model_filename(arch, seed):
    return f"{arch}-s{seed}.json"


def build_zoo(train_ds, test_ds, archs=nn.ARCHITECTURES, seeds=(0, 1, 2), epochs=30,
              out_dir=None, manifest=None, **train_kw):
    """Train ``archs x seeds`` models, reusing model files already in ``out_dir``."""
    models = []
    for arch in archs:
        for seed in seeds:
            path = os.path.join(out_dir, model_filename(arch, seed)) if out_dir else None
            if path and os.path.exists(path):
                models.append(nn.load_model(path))
                continue
            cfg = train.TrainConfig(arch, seed, epochs, dataset=train_ds.provenance, **train_kw)
            m = train.train(train_ds, cfg, test_ds)
            if path:
                os.makedirs(out_dir, exist_ok=True)
                nn.save_model(m, path)
            if manifest:
                append_manifest(manifest, m)
            models.append(m)
    return models


def append_manifest(path, model):
    rec = {"arch": model.arch, "seed": model.metadata.get("seed"),
           "train_acc": model.metadata.get("train_acc"),
           "test_acc": model.metadata.get("test_acc")}
    with open(path, "a") as f:
        f.write(json.dumps(rec) + "\n")


def transfer_trio(zoo):
    """Three zoo models differing in both architecture and seed."""
    by_key = {(m.arch, m.metadata.get("seed")): m for m in zoo}
    wanted = [("mlp-small", 0), ("mlp-wide", 1), ("cnn-small", 2)]
    missing = [k for k in wanted if k not in by_key]
    if missing:
        raise ValueError(f"zoo lacks models {missing}")
    return [by_key[k] for k in wanted]


def holdout_pairs(trio):
    """Cyclic (source, hold-out) pairs: A->B, B->C, C->A."""
    return [(trio[i], trio[(i + 1) % len(trio)]) for i in range(len(trio))]


# ---------------------------------------------------------------------------
# protocols


def white_box_table(models, test, n=500, seed=0, base=BASE, workers=1, min_acc=0.95,
                    methods=("FGSM", "I-FGSM", "MI-FGSM")):
    rows = []
    for m in models:
        acc = train.accuracy(m, test)
        if acc < min_acc:
            log.info("skipping %s: clean accuracy %.4f < %.2f", m.name, acc, min_acc)
            continue
        sub = data.select_correctly_classified([m], test, n, seed)
        rows += sweep("mu", [base.mu], base, m, [m], sub.images, sub.labels,
                      seed=seed, workers=workers, methods=list(methods))
    return rows


def transfer_table(trio, test, n=500, seed=0, base=BASE, workers=1,
                   methods=("FGSM", "I-FGSM", "MI-FGSM")):
    sub = data.select_correctly_classified(trio, test, n, seed)
    rows = []
    for src in trio:
        rows += sweep("mu", [base.mu], base, src, trio, sub.images, sub.labels,
                      seed=seed, workers=workers, methods=list(methods))
    return rows


def ordered_pair_gap(rows, pairs, better="MI-FGSM", worse="I-FGSM"):
    """Mean black-box success difference over ``(source, target)`` name pairs."""
    def rate(method, s, t):
        for r in rows:
            if r["method"] == method and r["source"] == s and r["target"] == t:
                return r["success_rate"]
        raise KeyError((method, s, t))
    return float(np.mean([rate(better, s, t) - rate(worse, s, t) for s, t in pairs]))


def cosine_table(models, test, n=200, seed=0, base=BASE, workers=1):
    rows = []
    for m in models:
        sub = data.select_correctly_classified([m], test, n, seed)
        traces = {}
        for method in ("I-FGSM", "MI-FGSM"):
            res = attack_examples(m, sub.images, sub.labels, base.replace(method=method), workers)
            traces[method] = res.trace
        rows += cosine_report(traces, source=m.name).rows
    return rows


def pair_sweep(axis, grid, trio, test, n=500, seed=0, base=BASE, workers=1,
               methods=("MI-FGSM",)):
    """Sweep each cyclic (source, hold-out) pair on a shared subset."""
    sub = data.select_correctly_classified(trio, test, n, seed)
    rows = []
    for src, hold in holdout_pairs(trio):
        rows += sweep(axis, grid, base, src, [src, hold], sub.images, sub.labels,
                      seed=seed, workers=workers, methods=list(methods))
    return rows


def mean_holdout_curve(rows, trio, method):
    """``{axis_value: mean hold-out success}`` over the cyclic pairs."""
    wanted = {(s.name, h.name) for s, h in holdout_pairs(trio)}
    acc = {}
    for r in rows:
        if r["method"] == method and (r["source"], r["target"]) in wanted:
            acc.setdefault(r["axis_value"], []).append(r["success_rate"])
    return {k: float(np.mean(v)) for k, v in acc.items()}


def ensemble_table(trio, test, n=500, seed=0, base=BASE, workers=1,
                   methods=("FGSM", "I-FGSM", "MI-FGSM"), fusions=FUSIONS):
    """Leave-one-out ensembles: white-box (ensemble) and hold-out success.

    Also emits single-source MI-FGSM rows against each hold-out so the
    ensemble can be compared with its best member.
    """
    sub = data.select_correctly_classified(trio, test, n, seed)
    rows = []
    for hold in trio:
        members = tuple(m for m in trio if m is not hold)
        for fusion in fusions:
            spec = EnsembleSpec(members, fusion=fusion)
            rows += sweep("mu", [base.mu], base, spec, [spec, hold], sub.images, sub.labels,
                          seed=seed, workers=workers, methods=list(methods))
        for m in members:
            rows += sweep("mu", [base.mu], base, m, [hold], sub.images, sub.labels,
                          seed=seed, workers=workers, methods=["MI-FGSM"])
    return rows


def random_targets(labels, num_classes, seed):
    """Seeded target classes, each different from the true label."""
    rng = np.random.default_rng([seed, 7])
    shift = rng.integers(1, num_classes, size=len(labels))
    return (np.asarray(labels) + shift) % num_classes


def targeted_table(trio, test, n=500, seed=0, epsilon=48.0, iterations=20, mu=1.0,
                   workers=1, methods=("FGSM", "I-FGSM", "MI-FGSM")):
    sub = data.select_correctly_classified(trio, test, n, seed)
    targets = random_targets(sub.labels, test.num_classes, seed)
    base = AttackConfig("MI-FGSM", epsilon=epsilon, iterations=iterations, mu=mu)
    rows = []
    for hold in trio:
        spec = EnsembleSpec(tuple(m for m in trio if m is not hold), fusion="logits")
        rows += sweep("mu", [mu], base, spec, [spec, hold], sub.images, sub.labels,
                      seed=seed, workers=workers, methods=list(methods),
                      target_labels=targets)
    return rows


def clean_report(models, ds, seed=""):
    """Success of the unperturbed batch (the misclassification rate)."""
    return evaluate(models, ds.images, ds.labels, method="none", seed=seed)
