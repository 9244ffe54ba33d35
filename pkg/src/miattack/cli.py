"""Command-line front door: ``miattack <subcommand> ...``.

Usage errors exit 2 (argparse); runtime failures print a JSON object
``{"error": <kind>, "message": <text>}`` on stderr and exit 1.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data, experiments, harness, nn, train
from .attacks import METHODS, AttackConfig, canonical_method
from .ensemble import FUSIONS, EnsembleSpec, load_ensemble_config


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _load_data(args):
    return data.load_split(args.data, args.split)


def _source(args):
    """Model or ensemble to craft with, from ``--model``/``--ensemble``."""
    if args.ensemble:
        spec = load_ensemble_config(args.ensemble)
        return spec, list(spec.members)
    models = [nn.load_model(p) for p in args.model]
    if len(models) == 1:
        return models[0], models
    return EnsembleSpec(tuple(models), fusion=args.fusion), models


def _method_for(method, norm):
    """Switch ``method`` to the variant using ``norm`` (sign or L2 step)."""
    method = canonical_method(method)
    if norm is None:
        return method
    prefix = method.rsplit("FG", 1)[0]
    return prefix + ("FGSM" if norm == "linf" else "FGM")


def _attack_config(args, method=None):
    return AttackConfig(
        method=_method_for(method or args.method, args.norm), epsilon=args.eps,
        iterations=args.iters, mu=args.mu, alpha=args.fixed_step, target=args.target,
        range_clip=not args.no_range_clip, grad_normalization=args.grad_norm)


def _emit(text, out):
    if out:
        d = os.path.dirname(os.path.abspath(out))
        os.makedirs(d, exist_ok=True)
        with open(out, "w", newline="") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _add_data(p, n_default=1000):
    p.add_argument("--data", required=True, help="directory of MNIST-named IDX files")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--n", type=int, default=n_default, help="number of examples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)


def _add_attack_params(p, method=True):
    if method:
        p.add_argument("--method", default="MI-FGSM", type=canonical_method,
                       help=f"one of {', '.join(METHODS)}")
    p.add_argument("--eps", type=float, default=16.0, help="budget on the 0..255 scale")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--norm", choices=("linf", "l2"), default=None,
                   help="switch the method to its sign (linf) or L2 variant")
    p.add_argument("--target", type=int, default=None, help="targeted attack class")
    p.add_argument("--fixed-step", type=float, default=None, metavar="ALPHA",
                   help="fixed step on the 0..255 scale, with epsilon-ball clipping")
    p.add_argument("--clip-ball", action="store_true",
                   help="clip to the epsilon ball each step (always on with --fixed-step)")
    p.add_argument("--no-range-clip", action="store_true",
                   help="do not clip pixels to [0, 1]")
    p.add_argument("--grad-norm", choices=("l1", "l2"), default="l1")


def _add_source(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--model", nargs="+", help="source model file(s); several form an ensemble")
    g.add_argument("--ensemble", help="ensemble config JSON")
    p.add_argument("--fusion", choices=FUSIONS, default="logits",
                   help="fusion when several --model files are given")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    train_ds = data.load_split(args.data, "train")
    try:
        test_ds = data.load_split(args.data, "test")
    except FileNotFoundError:
        test_ds = None
    cfg = train.TrainConfig(args.arch, args.seed, args.epochs, args.batch_size, args.lr,
                            args.momentum, dataset=train_ds.provenance)
    model = train.train(train_ds, cfg, test_ds)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    nn.save_model(model, args.out)
    manifest = args.manifest or os.path.join(os.path.dirname(os.path.abspath(args.out)),
                                             "manifest.jsonl")
    experiments.append_manifest(manifest, model)
    print(json.dumps({"arch": model.arch, "seed": args.seed,
                      "train_acc": model.metadata["train_acc"],
                      "test_acc": model.metadata.get("test_acc")}))


def cmd_attack(args):
    source, members = _source(args)
    config = _attack_config(args)
    ds = _load_data(args)
    sub = data.select_correctly_classified(members, ds, args.n, args.seed)
    res = harness.attack_examples(source, sub.images, sub.labels, config, args.workers)
    os.makedirs(args.out, exist_ok=True)
    img_path = os.path.join(args.out, "adv-images-idx3-ubyte")
    lab_path = os.path.join(args.out, "labels-idx1-ubyte")
    data.save_idx(res.x_adv, img_path, lab_path, sub.labels)
    if config.targeted:
        data.write_idx(os.path.join(args.out, "targets-idx1-ubyte"),
                       np.full(len(sub.labels), config.target, dtype=np.uint8))
    # predictions on the stored (quantized) batch so they can be re-verified
    stored = data.load_idx(img_path, lab_path)
    preds = harness.predict_any(source, stored.images)
    meta = {
        "config": config.to_dict(),
        "source": harness.name_of(source),
        "members": [m.name for m in members],
        "data": sub.provenance,
        "seed": args.seed,
        "n": len(sub.labels),
        "source_prediction": [int(p) for p in preds],
        "trace": res.trace.summary(),
    }
    with open(os.path.join(args.out, "metadata.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    report = harness.evaluate([source], stored.images, stored.labels,
                              config.target, method=config.method,
                              source=meta["source"], seed=args.seed)
    _emit(report.to_csv(), os.path.join(args.out, "report.csv"))
    print(json.dumps({"out": args.out, "n": meta["n"],
                      "white_box_success": report.rows[0].success_rate}))


def cmd_eval(args):
    adv = args.adv
    ds = data.load_idx(os.path.join(adv, "adv-images-idx3-ubyte"),
                       os.path.join(adv, "labels-idx1-ubyte"))
    meta = {}
    meta_path = os.path.join(adv, "metadata.json")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
    targets = None
    t_path = os.path.join(adv, "targets-idx1-ubyte")
    if os.path.exists(t_path):
        targets = data.read_idx(t_path).astype(np.int64)
    models = [nn.load_model(p) for p in args.model]
    cfg = meta.get("config", {})
    report = harness.evaluate(models, ds.images, ds.labels, targets,
                              method=cfg.get("method", ""), source=meta.get("source", ""),
                              seed=meta.get("seed", ""))
    _emit(report.to_csv(), args.out)


def cmd_sweep(args):
    source, members = _source(args)
    targets = [nn.load_model(p) for p in args.target_model] if args.target_model else []
    ds = _load_data(args)
    sub = data.select_correctly_classified(members + targets, ds, args.n, args.seed)
    base = _attack_config(args)
    methods = [_method_for(m, args.norm) for m in (args.methods or [base.method])]
    if args.axis == "iterations":
        bad = [v for v in args.grid if v != int(v) or v < 1]
        if bad:
            raise UsageError(f"iteration grid values must be positive integers: {bad}")
    rows = harness.sweep(args.axis, args.grid, base, source, [source] + targets,
                         sub.images, sub.labels, seed=args.seed, workers=args.workers,
                         alpha=args.alpha, methods=methods)
    _emit(harness.rows_to_csv(rows), args.out)


def cmd_diag(args):
    model = nn.load_model(args.model)
    ds = _load_data(args)
    sub = data.select_correctly_classified([model], ds, args.n, args.seed)
    base = _attack_config(args, "MI-FGSM")
    traces = {}
    for method in ("I-FGSM", "MI-FGSM"):
        cfg = base.replace(method=_method_for(method, args.norm))
        traces[cfg.method] = harness.attack_examples(model, sub.images, sub.labels, cfg,
                                                     args.workers).trace
    report = harness.cosine_report(traces, source=model.name)
    if report.empty:
        print(json.dumps({"warning": "single-iteration traces; no successive steps"}),
              file=sys.stderr)
    _emit(harness.rows_to_csv(report.rows, harness.COSINE_COLUMNS), args.out)


def cmd_zoo(args):
    models = [nn.load_model(p) for p in args.model]
    if len(models) < 2:
        raise UsageError("zoo needs at least two --model files")
    ds = _load_data(args)
    base = _attack_config(args, "MI-FGSM")
    methods = [_method_for(m, args.norm) for m in args.methods]
    rows = experiments.ensemble_table(models, ds, n=args.n, seed=args.seed, base=base,
                                      workers=args.workers, methods=methods,
                                      fusions=args.fusions)
    _emit(harness.rows_to_csv(rows), args.out)


def cmd_make_data(args):
    if args.kind == "digits":
        tr, te = data.digits28(args.train_size, args.seed)
    else:
        # one draw split in half, so both splits share the class centres
        ds = data.synth_dataset(args.num_classes, 2 * args.per_class, args.dim,
                                args.separation, args.seed)
        half = len(ds) // 2
        tr, te = ds.subset(np.arange(half)), ds.subset(np.arange(half, len(ds)))
    data.write_mnist_dir(args.out, tr, te)
    print(json.dumps({"out": args.out, "train": len(tr), "test": len(te)}))


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="miattack",
                                     description="Momentum iterative adversarial attacks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train one zoo model")
    p.add_argument("--arch", required=True, choices=nn.ARCHITECTURES + ("linear",))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--manifest", help="zoo manifest (default: manifest.jsonl beside --out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="craft adversarial examples")
    _add_source(p)
    _add_attack_params(p)
    _add_data(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="success rates of a stored adversarial batch")
    p.add_argument("--adv", required=True, help="directory written by 'attack'")
    p.add_argument("--model", nargs="+", required=True, help="models to evaluate against")
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="success rate across a parameter grid")
    _add_source(p)
    p.add_argument("--target-model", nargs="+", default=[],
                   help="extra (black-box) models to evaluate on")
    p.add_argument("--axis", required=True, choices=("mu", "iterations", "epsilon"))
    p.add_argument("--grid", required=True, type=_float_list, help="e.g. 0,0.5,1,1.5,2")
    p.add_argument("--methods", nargs="+", type=canonical_method)
    p.add_argument("--alpha", type=float, default=1.0, help="fixed step for the epsilon axis")
    _add_attack_params(p)
    _add_data(p)
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diag", help="successive-step cosine similarity, I-FGSM vs MI-FGSM")
    p.add_argument("--model", required=True)
    _add_attack_params(p, method=False)
    _add_data(p, n_default=200)
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("zoo", help="leave-one-out ensemble transfer")
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--fusions", nargs="+", choices=FUSIONS, default=list(FUSIONS))
    p.add_argument("--methods", nargs="+", type=canonical_method,
                   default=["FGSM", "I-FGSM", "MI-FGSM"])
    _add_attack_params(p, method=False)
    _add_data(p)
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_zoo)

    p = sub.add_parser("make-data", help="write an IDX dataset directory")
    p.add_argument("--kind", choices=("digits", "synth"), default="digits")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-size", type=int, default=1000)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--dim", type=int, default=784)
    p.add_argument("--separation", type=float, default=8.0)
    p.set_defaults(func=cmd_make_data)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except Exception as e:  # noqa: BLE001 - reported as a structured error
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
