"""Success-rate evaluation, parameter sweeps and CSV reports."""

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .attacks import AttackTrace, as_grad_source, run_attack
from .ensemble import EnsembleGradient, EnsembleSpec, fused_predict

REPORT_COLUMNS = ("axis_value", "method", "source", "fusion", "target", "n",
                  "success_count", "success_rate", "seed")
COSINE_COLUMNS = ("iteration", "method", "source", "mean_cosine", "n", "degenerate")
CHUNK_SIZE = 100


def name_of(obj):
    return getattr(obj, "name", str(obj))


def predict_any(target, x):
    if isinstance(target, EnsembleSpec):
        return np.asarray(fused_predict(target, x))
    return nn.predict_batched(target, x)


@dataclass
class EvalRow:
    method: str
    source: str
    target: str
    n: int
    success_count: int
    fusion: str = ""
    axis_value: str = ""
    seed: object = ""

    @property
    def success_rate(self):
        return self.success_count / self.n

    def as_dict(self):
        return {"axis_value": self.axis_value, "method": self.method, "source": self.source,
                "fusion": self.fusion, "target": self.target, "n": self.n,
                "success_count": self.success_count, "success_rate": self.success_rate,
                "seed": self.seed}


@dataclass
class EvalReport:
    rows: list
    targeted: bool = False
    config: dict = field(default_factory=dict)
    seed: object = ""

    @property
    def mode(self):
        return "targeted" if self.targeted else "non-targeted"

    def rate(self, target):
        for r in self.rows:
            if r.target == target:
                return r.success_rate
        raise KeyError(target)

    def to_csv(self):
        return rows_to_csv([r.as_dict() for r in self.rows])


def evaluate(models, x_adv, labels, targets=None, *, method="", source="", fusion="",
             axis_value="", seed="", config=None):
    """Success rate of ``x_adv`` against each model.

    Non-targeted success means the prediction differs from ``labels``;
    targeted success means it equals ``targets``.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    labels = np.asarray(labels)
    if len(x_adv) == 0:
        raise ValueError("cannot evaluate an empty batch")
    if len(labels) != len(x_adv):
        raise ValueError(f"{len(labels)} labels for {len(x_adv)} examples")
    if targets is not None:
        targets = np.broadcast_to(np.asarray(targets), labels.shape)
    rows = []
    for m in models:
        pred = predict_any(m, x_adv)
        hits = pred == targets if targets is not None else pred != labels
        rows.append(EvalRow(method, source, name_of(m), len(labels), int(np.sum(hits)),
                            fusion, axis_value, seed))
    return EvalReport(rows, targets is not None, dict(config or {}), seed)


# ---------------------------------------------------------------------------
# deterministic chunked execution


def _attack_chunk(args):
    source, x, y, config, targets = args
    return run_attack(source, x, y, config, targets=targets)


def _merge(results, x):
    out = results[0]
    out.x_adv = np.concatenate([r.x_adv for r in results])
    out.x_orig = np.asarray(x, dtype=np.float64)
    out.trace = AttackTrace.concat([r.trace for r in results])
    return out


def attack_examples(source, x, y, config, workers=1, chunk_size=None, targets=None):
    """Attack a batch in fixed-size chunks, optionally across processes.

    Chunk boundaries depend only on ``chunk_size``, so the output is
    identical for any ``workers`` value.
    """
    if isinstance(source, EnsembleSpec):
        source = EnsembleGradient(source)
    source = as_grad_source(source)
    chunk_size = chunk_size or CHUNK_SIZE
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("no examples to attack")
    jobs = [(source, x[i:i + chunk_size], y[i:i + chunk_size], config,
             None if targets is None else np.asarray(targets)[i:i + chunk_size])
            for i in range(0, len(x), chunk_size)]
    if workers <= 1 or len(jobs) == 1:
        results = [_attack_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_attack_chunk, jobs))
    return _merge(results, x)


# ---------------------------------------------------------------------------
# sweeps


def epsilon_sweep_config(base, eps, alpha=1.0):
    """Fixed step ``alpha`` with the iteration count growing with ``eps``."""
    if base.method in ("FGSM", "FGM"):
        return base.replace(epsilon=eps)
    iters = max(1, math.ceil(eps / alpha))
    return base.replace(epsilon=eps, alpha=alpha, iterations=iters)


def config_at(axis, value, base, alpha=1.0):
    if axis == "mu":
        return base.replace(mu=float(value))
    if axis == "iterations":
        return base.replace(iterations=int(value))
    if axis == "epsilon":
        return epsilon_sweep_config(base, float(value), alpha)
    raise ValueError(f"unknown sweep axis {axis!r}; choose mu, iterations or epsilon")


def fmt_axis(value):
    return str(value)


class SweepError(RuntimeError):
    pass


def sweep(axis, grid, base, source, targets, x, y, *, seed="", workers=1,
          alpha=1.0, methods=None, target_labels=None):
    """Evaluate ``source``-crafted adversarials on ``targets`` across a grid.

    ``methods`` defaults to ``[base.method]``; each grid point yields one row
    per method and target.  Returns a list of report-row dicts.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    methods = methods or [base.method]
    fusion = source.fusion if isinstance(source, EnsembleSpec) else ""
    rows = []
    for value in grid:
        for method in methods:
            try:
                cfg = config_at(axis, value, base.replace(method=method), alpha)
                res = attack_examples(source, x, y, cfg, workers, targets=target_labels)
                wanted = target_labels if target_labels is not None else cfg.target
                report = evaluate(targets, res.x_adv, y, wanted,
                                  method=method, source=name_of(source), fusion=fusion,
                                  axis_value=fmt_axis(value), seed=seed)
            except Exception as e:
                raise SweepError(f"{axis}={value} method={method}: {e}") from e
            rows.extend(r.as_dict() for r in report.rows)
    return rows


# ---------------------------------------------------------------------------
# update-direction diagnostic


@dataclass
class CosineReport:
    rows: list
    empty: bool = False

    def mean(self, method):
        vals = [r["mean_cosine"] for r in self.rows if r["method"] == method]
        return float(np.mean(vals)) if vals else float("nan")


def cosine_report(traces, source=""):
    """Per-iteration mean cosine similarity of successive steps.

    ``traces`` maps a method name to an :class:`AttackTrace`; all traces must
    cover the same examples for the same number of iterations.
    """
    items = list(traces.items())
    lengths = {len(t) for _, t in items}
    widths = {len(t.records[0].loss) for _, t in items if len(t)}
    if len(lengths) > 1:
        raise ValueError(f"trace lengths differ: {sorted(lengths)}")
    if len(widths) > 1:
        raise ValueError(f"traces cover different example counts: {sorted(widths)}")
    rows = []
    for method, trace in items:
        for i, rec in enumerate(trace.records[1:], start=1):
            rows.append({"iteration": i, "method": method, "source": source,
                         "mean_cosine": float(np.mean(rec.cosine)), "n": len(rec.cosine),
                         "degenerate": int(np.sum(rec.cosine_degenerate))})
    return CosineReport(rows, empty=not rows)


# ---------------------------------------------------------------------------
# CSV


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def rows_to_csv(rows, columns=REPORT_COLUMNS):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns=REPORT_COLUMNS):
    text = rows_to_csv(rows, columns)
    with open(path, "w", newline="") as f:
        f.write(text)
    return text
