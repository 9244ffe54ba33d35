"""Acceptance gate: one PASS/FAIL line per criterion.

The zoo is trained on the MNIST IDX files in ``$MIATTACK_MNIST_DIR`` when
set, otherwise on the bundled 28x28 digits substitute.  CSV reports land in
``$MIATTACK_REPORT_DIR`` (default ``reports/`` in the repository root).
"""

import os
import time

import numpy as np
import pytest

from miattack import data, experiments as ex, harness, nn
from miattack.attacks import (COUNTERPART, METHODS, AttackConfig, one_step_attack,
                              run_attack)
from miattack.ensemble import FUSIONS, EnsembleSpec, ensemble_gradient
from conftest import ACCEPTANCE_LINES
from helpers import central_difference, random_small_model, relative_error

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
REPORT_DIR = os.environ.get("MIATTACK_REPORT_DIR", os.path.join(ROOT, "reports"))
N = 500


def report(num, ok, detail):
    line = f"CRITERION {num}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pct(v):
    return f"{100 * v:.1f}%"


# ---------------------------------------------------------------------------
# zoo and protocol runs


@pytest.fixture(scope="session")
def ctx(tmp_path_factory):
    mnist = os.environ.get("MIATTACK_MNIST_DIR")
    if mnist:
        train_ds, test_ds = data.load_split(mnist, "train"), data.load_split(mnist, "test")
    else:
        train_ds, test_ds = data.digits28()
    zoo_dir = os.environ.get("MIATTACK_ZOO_DIR") or str(tmp_path_factory.mktemp("zoo"))
    t0 = time.time()
    zoo = ex.build_zoo(train_ds, test_ds, out_dir=zoo_dir,
                       manifest=os.path.join(zoo_dir, "manifest.jsonl"))
    os.makedirs(REPORT_DIR, exist_ok=True)
    return {"train": train_ds, "test": test_ds, "zoo": zoo, "trio": ex.transfer_trio(zoo),
            "zoo_seconds": time.time() - t0}


def run_protocols(ctx, workers):
    """Rows and CSV text for criteria 4 to 11, plus wall time per protocol."""
    test, zoo, trio = ctx["test"], ctx["zoo"], ctx["trio"]
    jobs = {
        "white_box": lambda: ex.white_box_table(zoo, test, n=N, workers=workers),
        "transfer": lambda: ex.transfer_table(trio, test, n=N, workers=workers),
        "cosine": lambda: ex.cosine_table(zoo, test, n=200, workers=workers),
        "mu_sweep": lambda: ex.pair_sweep("mu", ex.MU_GRID, trio, test, n=N, workers=workers),
        "iter_sweep": lambda: ex.pair_sweep("iterations", ex.ITER_GRID, trio, test, n=N,
                                            workers=workers, methods=("I-FGSM", "MI-FGSM")),
        "ensemble": lambda: ex.ensemble_table(trio, test, n=N, workers=workers),
        "targeted": lambda: ex.targeted_table(trio, test, n=N, workers=workers),
    }
    out = {}
    for name, job in jobs.items():
        t0 = time.time()
        rows = job()
        cols = harness.COSINE_COLUMNS if name == "cosine" else harness.REPORT_COLUMNS
        out[name] = {"rows": rows, "csv": harness.rows_to_csv(rows, cols),
                     "seconds": time.time() - t0}
    return out


@pytest.fixture(scope="session")
def results(ctx):
    res = run_protocols(ctx, workers=1)
    for name, r in res.items():
        with open(os.path.join(REPORT_DIR, f"{name}.csv"), "w", newline="") as f:
            f.write(r["csv"])
    return res


def rate(rows, method, source, target, axis_value=None):
    hits = [r["success_rate"] for r in rows
            if r["method"] == method and r["source"] == source and r["target"] == target
            and (axis_value is None or r["axis_value"] == axis_value)]
    assert len(hits) == 1, (method, source, target, axis_value, len(hits))
    return hits[0]


# ---------------------------------------------------------------------------
# exact suites


def test_criterion_01_gradient_oracle():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(50):
        m = random_small_model(rng, ["mlp", "mlp2", "cnn"][i % 3])
        x = rng.uniform(size=m.input_shape)
        y = int(rng.integers(m.num_classes))
        _, g = nn.input_gradient(m, x, y)
        fd = central_difference(lambda v: nn.softmax_cross_entropy(nn.forward(m, v), y), x)
        worst = max(worst, relative_error(g, fd))
        # a second member with the same layout and independent weights
        other = nn.Model(m.input_shape, m.num_classes,
                         [type(l)(*(rng.normal(0, 0.6, p.shape) for p in l.params))
                          if l.params else l for l in m.layers])
        w = float(rng.uniform(0.1, 0.9))
        for fusion in FUSIONS:
            spec = EnsembleSpec((m, other), (w, 1.0 - w), fusion)
            _, ge = ensemble_gradient(spec, x, y)
            fde = central_difference(lambda v: float(ensemble_gradient(spec, v, y)[0]), x)
            worst = max(worst, relative_error(ge, fde))
    secs = time.time() - t0
    report(1, worst <= 1e-6 and secs < 60,
           f"max relative error {worst:.2e} (bound 1e-6) over 50 models x 4 losses; {secs:.1f}s")


def test_criterion_02_norm_feasibility():
    t0 = time.time()
    rng = np.random.default_rng(7)
    runs, worst_inf, worst_l2 = 0, 0.0, 0.0
    ok = True
    for i in range(600):
        method = METHODS[i % len(METHODS)]
        fixed = (i // len(METHODS)) % 2 == 1
        m = random_small_model(rng)
        x = rng.uniform(size=(2,) + m.input_shape)
        y = rng.integers(m.num_classes, size=2)
        cfg = AttackConfig(method, float(rng.uniform(0.5, 80)), int(rng.integers(1, 15)),
                           float(rng.uniform(0, 2)),
                           alpha=float(rng.uniform(0.1, 10)) if fixed else None,
                           range_clip=bool(rng.integers(2)),
                           target=int(rng.integers(m.num_classes)) if rng.random() < 0.3
                           else None)
        res = run_attack(m, x, y, cfg)
        radius = cfg.radius(int(np.prod(m.input_shape)))
        d = (res.x_adv - x).reshape(2, -1)
        if cfg.norm == "linf":
            excess = float(np.max(np.abs(d))) - radius
            worst_inf = max(worst_inf, excess)
            ok &= excess <= 1e-12
        else:
            excess = float(np.max(np.linalg.norm(d, axis=1))) - radius
            worst_l2 = max(worst_l2, excess)
            ok &= excess <= 1e-9
        runs += 1
    secs = time.time() - t0
    report(2, bool(ok) and secs < 120,
           f"{runs} runs; worst excess linf {worst_inf:.1e}, l2 {worst_l2:.1e}; {secs:.1f}s")


def test_criterion_03_degenerate_equivalences(ctx):
    test = ctx["test"]
    checks, failures = 0, []
    for m in ctx["zoo"]:
        sub = data.select_correctly_classified([m], test, 40, seed=1)
        x, y = sub.images, sub.labels
        for mi, plain in (("MI-FGSM", "I-FGSM"), ("MI-FGM", "I-FGM")):
            a = run_attack(m, x, y, AttackConfig(mi, 16, 10, mu=0.0)).x_adv
            b = run_attack(m, x, y, AttackConfig(plain, 16, 10)).x_adv
            checks += 1
            if a.tobytes() != b.tobytes():
                failures.append(f"{m.name} {mi}(mu=0)")
        for method, one in COUNTERPART.items():
            a = run_attack(m, x, y, AttackConfig(method, 16, 1)).x_adv
            cfg = AttackConfig(one, 16)
            b = run_attack(m, x, y, cfg).x_adv
            c = one_step_attack(m, x, y, cfg.radius(m.input_dim), cfg.norm).x_adv
            checks += 1
            if not a.tobytes() == b.tobytes() == c.tobytes():
                failures.append(f"{m.name} {method}(T=1)")
    report(3, not failures, f"{checks} bitwise comparisons on zoo models; mismatches: "
                            f"{failures or 'none'}")


# ---------------------------------------------------------------------------
# directional reproductions


def test_criterion_04_white_box(ctx, results):
    rows = results["white_box"]["rows"]
    secs = results["white_box"]["seconds"]
    ok, parts = True, []
    names = sorted({r["source"] for r in rows})
    for name in names:
        f, i, mi = (rate(rows, meth, name, name) for meth in ("FGSM", "I-FGSM", "MI-FGSM"))
        good = i >= 0.95 and mi >= 0.95 and f < i and f < mi
        ok &= good
        parts.append(f"{name} FGSM {pct(f)} I {pct(i)} MI {pct(mi)}")
    ok &= len(names) > 0 and secs < 180
    report(4, ok, f"{len(names)} models, {secs:.0f}s; " + "; ".join(parts))


def _ordered_pairs(trio):
    return [(s.name, t.name) for s in trio for t in trio if s is not t]


def test_criterion_05_transfer_gap(ctx, results):
    rows = results["transfer"]["rows"]
    secs = results["transfer"]["seconds"]
    pairs = _ordered_pairs(ctx["trio"])
    gap = ex.ordered_pair_gap(rows, pairs)
    mi = np.mean([rate(rows, "MI-FGSM", s, t) for s, t in pairs])
    it = np.mean([rate(rows, "I-FGSM", s, t) for s, t in pairs])
    report(5, gap >= 0.05 and secs < 300,
           f"mean black-box MI {pct(mi)} vs I {pct(it)}: gap {100 * gap:+.1f}pp "
           f"(need >= +5pp); {secs:.0f}s")


def test_criterion_06_cosine(ctx, results):
    rows = results["cosine"]["rows"]
    ok, parts = True, []
    for m in ctx["zoo"]:
        mine = [r for r in rows if r["source"] == m.name]
        cos = {meth: np.mean([r["mean_cosine"] for r in mine if r["method"] == meth])
               for meth in ("I-FGSM", "MI-FGSM")}
        ok &= cos["MI-FGSM"] > cos["I-FGSM"]
        parts.append(f"{m.name} MI {cos['MI-FGSM']:.3f} > I {cos['I-FGSM']:.3f}")
    report(6, bool(ok), "; ".join(parts))


def test_criterion_07_momentum_helps(ctx, results):
    curve = ex.mean_holdout_curve(results["mu_sweep"]["rows"], ctx["trio"], "MI-FGSM")
    base = curve["0.0"]
    best_mu = max(curve, key=lambda k: (curve[k], -float(k)))
    gain = curve[best_mu] - base
    ok = float(best_mu) > 0 and gain >= 0.03
    shape = ", ".join(f"mu={k}: {pct(v)}" for k, v in curve.items())
    report(7, ok, f"{shape}; peak at mu={best_mu}, {100 * gain:+.1f}pp over mu=0 (need >= +3pp)")


def test_criterion_08_iteration_robustness(ctx, results):
    rows = results["iter_sweep"]["rows"]
    mi = ex.mean_holdout_curve(rows, ctx["trio"], "MI-FGSM")
    it = ex.mean_holdout_curve(rows, ctx["trio"], "I-FGSM")
    ok_mi = mi["10"] >= mi["1"] - 0.02
    ok_i = it["10"] <= it["2"]
    report(8, ok_mi and ok_i,
           f"MI T=1 {pct(mi['1'])} T=10 {pct(mi['10'])} ({'ok' if ok_mi else 'fails'}); "
           f"I T=2 {pct(it['2'])} T=10 {pct(it['10'])} ({'ok' if ok_i else 'fails'})")


def _loo(ctx, fusion):
    """(ensemble spec name, hold-out name) for each leave-one-out split."""
    trio = ctx["trio"]
    out = []
    for hold in trio:
        spec = EnsembleSpec(tuple(m for m in trio if m is not hold), fusion=fusion)
        out.append((spec, hold))
    return out


def test_criterion_09_ensemble_uplift(ctx, results):
    rows = results["ensemble"]["rows"]
    ens, best, white, parts = [], [], [], []
    for spec, hold in _loo(ctx, "logits"):
        e = rate(rows, "MI-FGSM", spec.name, hold.name)
        b = max(rate(rows, "MI-FGSM", m.name, hold.name) for m in spec.members)
        w = rate(rows, "MI-FGSM", spec.name, spec.name)
        ens.append(e)
        best.append(b)
        white.append(w)
        parts.append(f"hold-out {hold.name}: ensemble {pct(e)} vs best single {pct(b)}, "
                     f"white-box {pct(w)}")
    ok = np.mean(ens) >= np.mean(best) and min(white) >= 0.98
    report(9, bool(ok), f"mean {pct(np.mean(ens))} vs {pct(np.mean(best))}; " + "; ".join(parts))


def test_criterion_10_fusion_comparison(ctx, results):
    rows = results["ensemble"]["rows"]
    mean = {}
    for fusion in FUSIONS:
        mean[fusion] = np.mean([rate(rows, "MI-FGSM", s.name, h.name) for s, h in _loo(ctx, fusion)])
    table_ok = all(any(r["fusion"] == f for r in rows) for f in FUSIONS)
    ok = table_ok and mean["logits"] >= mean["loss"] - 0.02
    report(10, bool(ok), "mean hold-out MI-FGSM: " +
           ", ".join(f"{f} {pct(v)}" for f, v in mean.items()) +
           f"; table at {os.path.join(REPORT_DIR, 'ensemble.csv')}")


def test_criterion_11_targeted(ctx, results):
    rows = results["targeted"]["rows"]
    white, hold, parts = [], [], []
    for spec, h in _loo(ctx, "logits"):
        w = rate(rows, "MI-FGSM", spec.name, spec.name)
        b = rate(rows, "MI-FGSM", spec.name, h.name)
        white.append(w)
        hold.append(b)
        parts.append(f"{spec.name}: white-box {pct(w)}, hold-out {h.name} {pct(b)}")
    report(11, min(white) >= 0.90, "; ".join(parts))


def test_criterion_12_determinism(ctx, results):
    again = run_protocols(ctx, workers=2)
    diff = [k for k in results if results[k]["csv"] != again[k]["csv"]]
    report(12, not diff, f"{len(results)} reports re-run with 2 workers; differing: "
                         f"{diff or 'none'}")
