"""``ceemkit`` command line.

Exit codes: 0 success, 1 domain error, 2 usage error. Every error prints one
line ``error[CODE]: message`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CeemError

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
SYNTH_MANIFEST = "synth.json"  # written by `synth`; sets the default --size


class UsageError(Exception):
    code = "E_USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _ops(text: str) -> list[str]:
    from .data import parse_ops
    try:
        return parse_ops(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _counts(text: str) -> list[int]:
    try:
        return [int(c) for c in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("CEEMKIT_THREADS")
    if env is None:
        return 1
    try:
        return _positive_int(env)
    except argparse.ArgumentTypeError as e:
        raise UsageError(f"CEEMKIT_THREADS: {e}") from None


def _print(line: str = "") -> None:
    print(line, flush=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_enhance(a) -> int:
    from .data import enhance_preview
    out = enhance_preview(a.input, a.output, a.ops, a.pool, a.stride)
    _print(f"wrote {a.output} ({out.shape[0]}x{out.shape[1]}, raw range {out.min():g}..{out.max():g})")
    return EXIT_OK


def _graph_from_args(a, input_shape=None, reference=None):
    from .graph import ModelGraph, build_preset
    if getattr(a, "config", None):
        try:
            cfg = json.loads(Path(a.config).read_text())
        except (OSError, ValueError) as e:
            raise CeemError(f"{a.config}: {e}") from None
        return ModelGraph.from_config(cfg, seed=getattr(a, "seed", 0))
    kw = {"seed": getattr(a, "seed", 0)}
    if input_shape is not None:
        kw["input_shape"] = input_shape
    if reference is not None and a.preset == "vgg_lite_ceem":
        kw["reference"] = reference
    return build_preset(a.preset, a.scale, **kw)


def cmd_summary(a) -> int:
    g = _graph_from_args(a, input_shape=(a.size, a.size, 1))
    s = g.summary()
    _print(f"{'layer':<14}{'kind':<15}{'output':<18}{'params':>12}{'params (10*p0 dwsc)':>22}")
    for r in s["rows"]:
        shape = "x".join(map(str, r["output_shape"]))
        _print(f"{r['id']:<14}{r['kind']:<15}{shape:<18}{r['params_true']:>12,}{r['params_simplified']:>22,}")
    _print(f"total parameters: {s['total_true']:,}")
    _print(f"total with depthwise stage counted as 10*p0: {s['total_simplified']:,}")
    ratio = g.attention_ratio()
    if ratio:
        _print(f"concat channels (base:branch): {ratio[0]}:{ratio[1]}")
    if a.scale == "full" and a.preset in ("vgg_lite", "vgg_lite_ceem"):
        _print("note: layer widths are a reconstruction; totals land near, not exactly on, 2.1M / 2.4M")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    from .gradcheck import TOLERANCE, graph_gradcheck, random_graph_case
    g, x, y = random_graph_case(a.preset, a.scale, a.seed, a.size, a.batch)
    corrupt = None
    if a.corrupt_backward:
        def corrupt(grads):
            for d in grads.values():
                for k in d:
                    d[k] = d[k] * 1.01
    res = graph_gradcheck(g, x, y, a.eps, a.samples, a.seed, corrupt)
    worst = max(res.per_param, key=res.per_param.get)
    _print(f"checked {res.checked} parameters in {len(res.per_param)} arrays")
    _print(f"max relative error: {res.max_rel_error:.3e} ({worst[0]}/{worst[1]})")
    if res.passed(TOLERANCE):
        _print(f"PASS (< {TOLERANCE:g})")
        return EXIT_OK
    print(f"error[E_GRADCHECK]: max relative error {res.max_rel_error:.3e} >= {TOLERANCE:g}", file=sys.stderr)
    return EXIT_DOMAIN


def _load_data(path, size: int | None):
    from .data import load_dir
    if size is None:
        manifest = Path(path) / SYNTH_MANIFEST
        size = 224
        if manifest.is_file():
            try:
                size = int(json.loads(manifest.read_text())["size"])
            except (ValueError, KeyError, TypeError) as e:
                raise CeemError(f"{manifest}: {e}") from None
    return load_dir(path, size)


def _train_config(a):
    from .train import TrainConfig
    return TrainConfig(epochs=a.epochs, batch_size=a.batch, lr0=a.lr, seed=a.seed, patience=a.patience,
                       record_time=a.timing)


def _epoch_printer(prefix: str = ""):
    def show(row):
        _print(f"{prefix}epoch {row['epoch']:>3}  lr {row['lr']:.3e}  loss {row['train_loss']:.4f}  "
               f"acc {row['train_acc']:.3f}  val_loss {row['val_loss']:.4f}  val_acc {row['val_acc']:.3f}"
               + (f"  {row['secs']:.1f}s" if row["secs"] else ""))
    return show


def cmd_train(a) -> int:
    from .checkpoint import Checkpoint, save_checkpoint
    from .train import config_dict, fit, stratified_split
    ds = _load_data(a.data, a.size)
    cfg = _train_config(a)
    tr, te, va = stratified_split(ds.labels, cfg.ratios, cfg.seed)
    g = _graph_from_args(a, input_shape=ds.images.shape[1:], reference=a.reference)
    if list(g.class_names) != list(ds.class_names):
        g.class_names = list(ds.class_names)
    _print(f"data: {len(ds)} images {ds.images.shape[1]}x{ds.images.shape[2]}, classes {ds.class_names}")
    _print(f"split: train {len(tr)}  test {len(te)}  val {len(va)}; parameters {g.param_count():,}")
    res = fit(g, ds.subset(tr), cfg, val=ds.subset(va), progress=_epoch_printer())
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    training = {"config": config_dict(cfg), "epochs_run": len(res.log.rows), "steps": res.steps,
                "image_size": int(ds.images.shape[1]), "class_names": list(ds.class_names)}
    save_checkpoint(Checkpoint(g, training, res.adam), out / "model.ckpt")
    (out / "trainlog.csv").write_text(res.log.to_csv())
    _print(f"wrote {out / 'model.ckpt'} and {out / 'trainlog.csv'}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dir, normalize
    from .metrics import confusion, evaluation_json, report, roc_auc, roc_to_csv
    from .train import stratified_split
    ck = load_checkpoint(a.checkpoint)
    g = ck.graph
    ds = load_dir(a.data, g.input_shape[:2])
    if a.split != "all":
        cfg = (ck.training or {}).get("config", {})
        parts = stratified_split(ds.labels, tuple(cfg.get("ratios", (0.7, 0.2, 0.1))), int(cfg.get("seed", 0)))
        ds = ds.subset(parts[("train", "test", "val").index(a.split)])
    scores = g.predict_proba(normalize(ds.images))
    rep = report(confusion(ds.labels, scores.argmax(axis=1), g.classes, ds.class_names))
    curves = roc_auc(ds.labels, scores, ds.class_names)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(evaluation_json(rep, curves) + "\n")
    (out / "confusion.csv").write_text(confusion(ds.labels, scores.argmax(axis=1), g.classes, ds.class_names).to_csv())
    (out / "roc.csv").write_text(roc_to_csv(curves))
    _print(f"evaluated {len(ds)} images ({a.split} split)")
    _print(rep.to_text())
    _print(f"wrote report.json, confusion.csv, roc.csv to {out}")
    return EXIT_OK


def cmd_kfold(a) -> int:
    from .data import normalize
    from .metrics import kfold
    from .train import fit
    ds = _load_data(a.data, a.size)
    cfg = _train_config(a)

    def train_fn(train_idx, test_idx, fold_seed):
        g = _graph_from_args(a, input_shape=ds.images.shape[1:], reference=a.reference)
        g.init_params(fold_seed)
        fold_cfg = type(cfg)(**{**cfg.__dict__, "seed": fold_seed})
        fold = fold_seed - a.seed + 1
        fit(g, ds.subset(train_idx), fold_cfg, progress=_epoch_printer(f"fold {fold} ") if a.verbose else None)
        _print(f"fold {fold}: trained on {len(train_idx)}, testing on {len(test_idx)}")
        return g.predict_proba(normalize(ds.images[test_idx]))

    summary, reports = kfold(ds.labels, a.folds, a.seed, train_fn, len(ds.class_names), ds.class_names)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, rep in enumerate(reports, start=1):
        (out / f"fold{i}_report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "folds.csv").write_text(summary.to_csv())
    (out / "folds.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    keys = list(summary.mean)
    _print("fold  " + "  ".join(f"{k:>9}" for k in keys))
    for i, row in enumerate(summary.folds, start=1):
        _print(f"{i:<4}  " + "  ".join(f"{row[k]:>9.4f}" for k in keys))
    _print("mean  " + "  ".join(f"{summary.mean[k]:>9.4f}" for k in keys))
    _print("std   " + "  ".join(f"{summary.std[k]:>9.4f}" for k in keys))
    _print("      " + "  ".join(f"{summary.mean[k]:.3f}±{summary.std[k]:.3f}".rjust(9) for k in keys))
    return EXIT_OK


def cmd_synth(a) -> int:
    from .data import DEFAULT_COUNTS, SynthSpec, save_dir, synth_generate
    spec = SynthSpec(counts=a.counts or DEFAULT_COUNTS, size=a.size, noise=a.noise, seed=a.seed)
    ds = synth_generate(spec)
    save_dir(ds, a.out, a.format)
    manifest = {"size": a.size, "seed": a.seed, "noise": a.noise, "counts": list(spec.counts),
                "class_names": list(spec.class_names)}
    (Path(a.out) / SYNTH_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _print(f"wrote {len(ds)} images ({a.size}x{a.size}) to {a.out}: "
           + ", ".join(f"{n}={c}" for n, c in zip(ds.class_names, ds.class_counts())))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_model_args(p, default_scale: str) -> None:
    from .graph import PRESETS
    p.add_argument("--preset", choices=sorted(PRESETS), default="vgg_lite_ceem", help="model preset")
    p.add_argument("--scale", choices=("full", "tiny"), default=default_scale,
                   help=f"channel scale; tiny divides widths by 8 (default {default_scale})")


def _add_train_args(p) -> None:
    _add_model_args(p, "tiny")
    p.add_argument("--data", required=True, help="dataset root with one subdirectory of PNG/PGM images per class")
    p.add_argument("--size", type=_positive_int, default=None,
                   help="resize images to SIZE x SIZE (default 224, or the generated size for synth output)")
    p.add_argument("--epochs", type=_positive_int, default=25, help="training epochs (default 25)")
    p.add_argument("--batch", type=_positive_int, default=16, help="mini-batch size (default 16)")
    p.add_argument("--lr", type=_positive_float, default=0.75e-4, help="initial learning rate (default 0.75e-4)")
    p.add_argument("--seed", type=int, default=0, help="seed for split, init and shuffling (default 0)")
    p.add_argument("--reference", type=float, default=1.0,
                   help="negative-layer reference on [0,1]-normalised inputs (default 1.0)")
    p.add_argument("--patience", type=_positive_int, default=None,
                   help="stop after this many epochs without validation-loss improvement (default off)")
    p.add_argument("--timing", action="store_true",
                   help="record per-epoch wall time in the log (logs are then not byte-reproducible)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ceemkit", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="cap BLAS/OpenMP worker threads (default $CEEMKIT_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("enhance", help="negative / pooling preview of one image")
    s.add_argument("--input", required=True, help="PNG or PGM image")
    s.add_argument("--output", required=True, help="output path; .png writes PNG, anything else PGM")
    s.add_argument("--ops", type=_ops, default=["negative", "twomaxmin"],
                   help="comma list of negative, maxpool, maxminpool, twomaxminpool (default negative,twomaxmin)")
    s.add_argument("--pool", type=_positive_int, default=3, help="pool window side (default 3)")
    s.add_argument("--stride", type=_positive_int, default=2, help="pool stride (default 2)")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("summary", help="layer table and parameter totals")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--config", help="model config JSON")
    _add_model_args(s, "full")
    s.add_argument("--size", type=_positive_int, default=224, help="input side length (default 224)")
    s.set_defaults(func=cmd_summary)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full graph's parameter gradients")
    _add_model_args(s, "tiny")
    s.add_argument("--seed", type=int, default=1, help="seed for weights, inputs and sampling (default 1)")
    s.add_argument("--eps", type=_positive_float, default=1e-5, help="central-difference step (default 1e-5)")
    s.add_argument("--samples", type=_positive_int, default=50, help="sampled coordinates per array (default 50)")
    s.add_argument("--size", type=_positive_int, default=16, help="input side length (default 16)")
    s.add_argument("--batch", type=_positive_int, default=2, help="batch size (default 2)")
    s.add_argument("--corrupt-backward", action="store_true",
                   help="negative control: scale analytic gradients by 1.01 before comparing")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train", help="train on a 70/20/10 stratified split; writes model.ckpt and trainlog.csv")
    _add_train_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint; writes report.json, confusion.csv, roc.csv")
    s.add_argument("--checkpoint", required=True, help="model.ckpt written by train")
    s.add_argument("--data", required=True, help="dataset root")
    s.add_argument("--split", choices=("test", "val", "train", "all"), default="test",
                   help="which part of the training split to score (default test)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("kfold", help="stratified k-fold cross-validation")
    _add_train_args(s)
    s.add_argument("--folds", type=_positive_int, default=5, help="number of folds (default 5)")
    s.add_argument("--verbose", action="store_true", help="print per-epoch progress")
    s.set_defaults(func=cmd_kfold)

    s = sub.add_parser("synth", help="write the synthetic imbalanced six-class dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--size", type=_positive_int, default=64, help="image side length (default 64)")
    s.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    s.add_argument("--noise", type=float, default=12.0, help="Gaussian noise sigma (default 12)")
    s.add_argument("--counts", type=_counts, default=None,
                   help="comma list of six per-class counts (default 39,51,84,143,10,19)")
    s.add_argument("--format", choices=("pgm", "png"), default="pgm", help="image format (default pgm)")
    s.set_defaults(func=cmd_synth)
    return p


def _fail(code: str, message: str, status: int) -> int:
    print(f"error[{code}]: {' '.join(str(message).split())}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = _threads(args.threads)
    except UsageError as e:
        return _fail(e.code, e, EXIT_USAGE)
    from threadpoolctl import threadpool_limits
    np.seterr(over="ignore", under="ignore")
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except CeemError as e:
        return _fail(e.code, e, EXIT_DOMAIN)
    except (OSError, ValueError) as e:
        return _fail("E_IO" if isinstance(e, OSError) else "E_VALUE", e, EXIT_DOMAIN)
    except KeyboardInterrupt:
        return _fail("E_INTERRUPT", "interrupted", 130)


if __name__ == "__main__":
    raise SystemExit(main())
