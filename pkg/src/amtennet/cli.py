"""Command-line entry point.

Subcommands: forge, train, eval, gradcheck, traces, ablate, robustness.
Every run stamps its output directory with the resolved configuration,
seed, and package version so results are reproducible from the artifacts
alone.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, corpus, imaging, metrics
from .errors import AmtennetError, DataError, NumericalError, ShapeError
from .extractors import ExtractorConfig
from .gradcheck import gradient_check, margined_input
from .models import build_amtennet, build_mini
from .optim import TrainConfig
from .tensor import Tensor
from .training import evaluate_accuracy, fit, load_checkpoint

USAGE_EXIT, DATA_EXIT, NUMERICAL_EXIT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def read_config(path: str | Path) -> dict:
    """Flat `key = value` text file; '#' starts a comment."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file {path} does not exist")
    out = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{ln}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _merged_config(args) -> dict:
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    for key, value in vars(args).items():
        if key in ("func", "config") or value is None:
            continue
        cfg[key] = value
    return cfg


def write_stamp(out_dir: Path, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = {"version": __version__, "config": {k: str(v) for k, v in sorted(cfg.items())}}
    (out_dir / "run_stamp.json").write_text(json.dumps(stamp, sort_keys=True, indent=1))


def _get(cfg: dict, key: str, default, cast):
    if key not in cfg:
        return default
    value = cfg[key]
    if cast is bool and isinstance(value, str):
        return value.lower() in ("1", "true", "yes", "on")
    return cast(value)


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        base_lr=_get(cfg, "base_lr", 0.001, float),
        gamma=_get(cfg, "gamma", 0.5, float),
        step_size=_get(cfg, "step_size", 1000, int),
        momentum=_get(cfg, "momentum", 0.95, float),
        decay=_get(cfg, "decay", 0.005, float),
        batch_size=_get(cfg, "batch_size", 64, int),
        epochs=_get(cfg, "epochs", 10, int),
        eval_every=_get(cfg, "eval_every", 1000, int),
        seed=_get(cfg, "seed", 0, int),
        literal_update=_get(cfg, "literal_update", False, bool),
        deterministic=_get(cfg, "deterministic", True, bool),
    )


def _extractor_config(name: str) -> ExtractorConfig:
    name = name.strip().lower()
    if name.startswith("amten_v") or name.startswith("amten-v"):
        return ExtractorConfig(kind="amten", variant=int(name[-1]))
    return ExtractorConfig(kind=name)


def _build_model(cfg: dict, num_classes: int, rng: np.random.Generator):
    extractor = _extractor_config(_get(cfg, "extractor", "amten", str))
    size = _get(cfg, "image_size", 64, int)
    if _get(cfg, "model", "mini", str) == "full":
        return build_amtennet(num_classes, extractor, input_size=size, rng=rng)
    return build_mini(num_classes, extractor, scale=_get(cfg, "scale", 0.5, float),
                      input_size=size, rng=rng)


def _limit_threads(cfg: dict):
    if not _get(cfg, "deterministic", True, bool):
        return None
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:
        return None


def _load_corpus(cfg: dict):
    manifest = _get(cfg, "manifest", None, str)
    if manifest is None:
        raise DataError("a manifest path is required (manifest = ...)")
    return corpus.read_manifest(manifest)


# --- subcommands -------------------------------------------------------------


def cmd_forge(args) -> int:
    cfg = _merged_config(args)
    out_dir = Path(cfg["out"])
    write_stamp(out_dir, cfg)
    seed = _get(cfg, "seed", 0, int)
    if _get(cfg, "toy", False, bool):
        records = corpus.synthesize_toy_corpus(
            out_dir,
            classes=_get(cfg, "classes", 4, int),
            n_per_class=_get(cfg, "n_per_class", 1000, int),
            size=_get(cfg, "image_size", 64, int),
            seed=seed,
            ratios=_parse_ratios(cfg),
        )
    else:
        src_dir = _get(cfg, "src_dir", None, str)
        if src_dir is not None:
            src = corpus.split_records(corpus.ingest_directory(src_dir),
                                       ratios=_parse_ratios(cfg), seed=seed)
        else:
            src = _load_corpus(cfg)
        op_name = _get(cfg, "op", None, str)
        if op_name is None:
            if src_dir is None:
                raise DataError("derived forging needs an operation (op = ME|GB|MED|GC|JP|SC)")
            records = src  # ingest + split only
            corpus.write_manifest(out_dir / "manifest.tsv", records)
        else:
            op = corpus.OpSpec(op_name.upper())
            mode = _get(cfg, "mode", "single", str)
            param = _get(cfg, "param", None, str)
            if param is not None:
                param = float(param) if op.name == "GC" else int(param)
            records = corpus.forge(src, op, out_dir, mode=mode, param=param, seed=seed)
    counts = {s: sum(1 for r in records if r.split == s) for s in corpus.SPLITS}
    print(f"forged {len(records)} records -> {out_dir}")
    print(f"splits: train={counts['train']} val={counts['val']} test={counts['test']}")
    return 0


def _parse_ratios(cfg: dict):
    raw = _get(cfg, "ratios", "0.75,0.05,0.20", str)
    return tuple(float(v) for v in raw.split(","))


def cmd_train(args) -> int:
    cfg = _merged_config(args)
    out_dir = Path(cfg["out"])
    write_stamp(out_dir, cfg)
    records = _load_corpus(cfg)
    k = corpus.num_classes(records)
    size = _get(cfg, "image_size", 64, int)
    rng = np.random.default_rng(_get(cfg, "seed", 0, int))
    model = _build_model(cfg, k, rng)
    train_set = corpus.load_split(records, "train", size)
    val_set = corpus.load_split(records, "val", size)
    tc = _train_config(cfg)
    probe = _clean_probe(records, size)
    limiter = _limit_threads(cfg)
    try:
        result = fit(model, train_set, val_set, tc, out_dir, trace_probe=probe)
    finally:
        if limiter is not None:
            limiter.unregister()
    print(f"trained {model.name}: best val accuracy {result.best_val_accuracy:.4f} "
          f"({result.iterations} iterations)")
    print(f"checkpoints: {result.best_path} / {result.final_path}")
    return 0


def _clean_probe(records, size, limit: int = 32):
    """Held-out images with no applied operations, for trace-energy probes."""
    clean = [r for r in records if r.split != "train" and not r.ops][:limit]
    if not clean:
        return None
    X, _ = corpus.load_split(clean, clean[0].split, size)
    return X


def cmd_eval(args) -> int:
    cfg = _merged_config(args)
    out_dir = Path(cfg["out"])
    write_stamp(out_dir, cfg)
    model, iteration, _ = load_checkpoint(cfg["checkpoint"])
    records = _load_corpus(cfg)
    split = _get(cfg, "split", "test", str)
    size = model.input_size
    X, y = corpus.load_split(records, split, size)
    preds = _predict_batched(model, X)
    k = model.num_classes
    names = _class_names(records, k)
    cm = metrics.confusion(preds, y, k, names)
    print(f"{model.name} @ iteration {iteration} on {split}: accuracy {cm.accuracy:.4f}")
    print(cm.render())
    real = _get(cfg, "real_classes", None, str)
    if real is not None:
        real_set = {int(v) for v in real.split(",")}
        b_acc = metrics.accuracy(metrics.binary_collapse(preds, real_set),
                                 metrics.binary_collapse(y, real_set))
        print(f"binary (real classes {sorted(real_set)}): accuracy {b_acc:.4f}")
    (out_dir / "confusion.txt").write_text(cm.render() + "\n")
    np.savetxt(out_dir / "confusion.csv", cm.counts, fmt="%d", delimiter=",")
    return 0


def _predict_batched(model, X, batch: int = 256):
    return np.concatenate([model.predict(X[i : i + batch]) for i in range(0, len(X), batch)])


def _class_names(records, k):
    names = [""] * k
    for r in records:
        names[r.class_index] = r.class_name
    return [n or str(i) for i, n in enumerate(names)]


def cmd_gradcheck(args) -> int:
    cfg = _merged_config(args)
    out_dir = Path(cfg["out"])
    write_stamp(out_dir, cfg)
    tol = _get(cfg, "tolerance", 1e-4, float)
    seed = _get(cfg, "seed", 0, int)
    model = build_mini(num_classes=4, input_size=_get(cfg, "image_size", 40, int),
                       rng=np.random.default_rng(seed), dtype=np.float64)
    x = margined_input(model, (2, 3, model.input_size, model.input_size), seed)
    labels = np.random.default_rng(seed).integers(0, 4, size=2)
    report = gradient_check(model, x, labels=labels, tolerance=tol,
                            samples_per_block=_get(cfg, "samples_per_block", 8, int),
                            train=True, seed=seed)
    print(report.render())
    (out_dir / "gradcheck.txt").write_text(report.render() + "\n")
    if not report.passed:
        raise NumericalError(f"gradient check failed: max rel error {report.max_rel_error:.3e}")
    return 0


def cmd_traces(args) -> int:
    cfg = _merged_config(args)
    out_dir = Path(cfg["out"])
    write_stamp(out_dir, cfg)
    records = _load_corpus(cfg)
    checkpoints = str(cfg["checkpoint"]).split(",")
    for ck_path in checkpoints:
        model, iteration, _ = load_checkpoint(ck_path.strip())
        if not hasattr(model.extractor, "traces"):
            raise DataError(f"{model.name} has no trace block to visualize")
        X = _clean_probe(records, model.input_size, limit=1)
        if X is None:
            raise DataError("no clean (op-free) held-out images available for trace dumps")
        t = model.extractor.traces(Tensor(X))
        full = model.extractor.forward(Tensor(X)).data
        dump_dir = out_dir / f"iter_{iteration:06d}"
        dump_dir.mkdir(parents=True, exist_ok=True)
        for c in range(t.shape[1]):
            imaging.save_grayscale(dump_dir / f"trace_ch{c}.png", t[0, c])
        for c in range(full.shape[1]):
            imaging.save_grayscale(dump_dir / f"fused_ch{c}.png", full[0, c])
        print(f"wrote {t.shape[1]} trace + {full.shape[1]} fused channel images -> {dump_dir}")
    return 0


ABLATION_ROWS = ["amten", "none"] + [f"amten_v{i}" for i in range(1, 7)]


def cmd_ablate(args) -> int:
    cfg = _merged_config(args)
    out_dir = Path(cfg["out"])
    write_stamp(out_dir, cfg)
    records = _load_corpus(cfg)
    k = corpus.num_classes(records)
    size = _get(cfg, "image_size", 64, int)
    seed = _get(cfg, "seed", 0, int)
    tc = _train_config(cfg)
    train_set = corpus.load_split(records, "train", size)
    val_set = corpus.load_split(records, "val", size)
    X_test, y_test = corpus.load_split(records, "test", size)

    rows = list(ABLATION_ROWS)
    if _get(cfg, "full", False, bool):
        rows += ["pool_ablation", "conv9_ablation"]
    results = []
    limiter = _limit_threads(cfg)
    try:
        for row in rows:
            model = _ablation_model(row, cfg, k, size, seed)
            fit(model, train_set, val_set, tc, out_dir / row)
            acc = evaluate_accuracy(model, X_test, y_test)
            results.append((row, model.name, acc))
            print(f"  {model.name}: test accuracy {acc:.4f}")
    finally:
        if limiter is not None:
            limiter.unregister()
    ref_acc = results[0][2]
    lines = [f"{'Model':<22}{'Accuracy':>10}{'RER':>10}"]
    for row, name, acc in results:
        if row == "amten":
            rer_txt = "-"
        elif acc < ref_acc and ref_acc < 1.0 and acc < 1.0:
            rer_txt = f"{100 * metrics.rer_from_accuracy(acc, ref_acc):.2f}%"
        else:
            rer_txt = "n/a"
        lines.append(f"{name:<22}{100 * acc:>9.2f}%{rer_txt:>10}")
    report = "\n".join(lines)
    print(report)
    (out_dir / "ablation_report.txt").write_text(report + "\n")
    with open(out_dir / "ablation_report.csv", "w") as f:
        f.write("model,accuracy\n")
        for _, name, acc in results:
            f.write(f"{name},{acc!r}\n")
    return 0


def _ablation_model(row: str, cfg: dict, k: int, size: int, seed: int):
    from .models import build_ablation
    rng = np.random.default_rng(seed)
    scale = _get(cfg, "scale", 0.5, float)
    if row == "pool_ablation":
        return build_ablation(7, k, input_size=size, rng=rng)
    if row == "conv9_ablation":
        return build_ablation(8, k, input_size=size, rng=rng)
    return build_mini(k, _extractor_config(row if row != "none" else "none"),
                      scale=scale, input_size=size, rng=rng)


ROBUSTNESS_CONDITIONS = ["raw", "jp60", "jp-mix", "me5", "me-mix"]
GENERALIZATION_CONDITIONS = ["gb-mix", "med-mix", "gc-mix", "jp2-mix", "sc-mix"]
MIXED_SIZES = {"small": 1.0 / 3.0, "middle": 2.0 / 3.0, "large": 1.0}


def _condition_op(label: str):
    name, _, suffix = label.partition("-")
    name = name.upper()
    if name.startswith("JP2"):
        return None  # no portable bit-exact baseline; reported as unsupported
    if suffix == "mix":
        return corpus.OpSpec(name), "mix", None
    param = int(name[2:]) if name.startswith("JP") else int(name[-1])
    op = name[:2] if name.startswith("JP") else name.rstrip("0123456789")
    return corpus.OpSpec(op), "single", param


def cmd_robustness(args) -> int:
    cfg = _merged_config(args)
    out_dir = Path(cfg["out"])
    write_stamp(out_dir, cfg)
    seed = _get(cfg, "seed", 0, int)
    size = _get(cfg, "image_size", 48, int)
    tc = _train_config(cfg)

    base = corpus.synthesize_toy_corpus(
        out_dir / "corpus_raw",
        classes=_get(cfg, "classes", 4, int),
        n_per_class=_get(cfg, "n_per_class", 200, int),
        size=size,
        seed=seed,
    )
    datasets = {"raw": base}
    for label in ROBUSTNESS_CONDITIONS[1:] + GENERALIZATION_CONDITIONS:
        resolved = _condition_op(label)
        if resolved is None:
            continue
        op, mode, param = resolved
        datasets[label] = corpus.forge(base, op, out_dir / f"corpus_{label}",
                                       mode=mode, param=param, seed=seed)

    splits = {
        label: {
            "train": corpus.load_split(recs, "train", size),
            "val": corpus.load_split(recs, "val", size),
            "test": corpus.load_split(recs, "test", size),
        }
        for label, recs in datasets.items()
    }

    k = corpus.num_classes(base)
    limiter = _limit_threads(cfg)
    try:
        models = {}
        for i, label in enumerate(ROBUSTNESS_CONDITIONS):
            model = build_mini(k, input_size=size, rng=np.random.default_rng(seed))
            fit(model, splits[label]["train"], splits[label]["val"], tc,
                out_dir / f"train_{label}")
            models[label] = model
            print(f"  trained on {label}")

        grid = metrics.robustness_grid(
            lambda row, col: evaluate_accuracy(models[row], *splits[col]["test"]),
            ROBUSTNESS_CONDITIONS, ROBUSTNESS_CONDITIONS,
        )
        print(grid.render())
        grid.write_csv(out_dir / "robustness_grid.csv")
        (out_dir / "robustness_grid.txt").write_text(grid.render() + "\n")

        mixed_rows = []
        for label, frac in MIXED_SIZES.items():
            X, y = _mixed_train_set(splits, frac, seed)
            model = build_mini(k, input_size=size, rng=np.random.default_rng(seed))
            fit(model, (X, y), splits["raw"]["val"], tc, out_dir / f"train_mixed_{label}")
            mixed_rows.append((label, model))
            print(f"  trained mixed/{label} ({len(y)} images)")
        _write_mixed_reports(out_dir, mixed_rows, splits)
    finally:
        if limiter is not None:
            limiter.unregister()
    return 0


def _mixed_train_set(splits, frac: float, seed: int):
    """Equal-proportion subsets of the raw and mixed-parameter train sets."""
    parts_X, parts_y = [], []
    for i, label in enumerate(("raw", "jp-mix", "me-mix")):
        X, y = splits[label]["train"]
        n = max(2, int(len(y) * frac))
        idx = np.random.default_rng([seed, i]).permutation(len(y))[:n]
        parts_X.append(X[idx])
        parts_y.append(y[idx])
    return np.concatenate(parts_X), np.concatenate(parts_y)


def _write_mixed_reports(out_dir: Path, mixed_rows, splits):
    size_labels = [label for label, _ in mixed_rows]
    lines = [f"{'Test set':<12}" + "".join(f"{s:>12}" for s in size_labels)]
    csv_lines = ["test_condition," + ",".join(size_labels)]
    for test_label in ROBUSTNESS_CONDITIONS + GENERALIZATION_CONDITIONS:
        cells, csv_cells = [], []
        for _, model in mixed_rows:
            if test_label not in splits:
                cells.append("unsupported")
                csv_cells.append("unsupported")
            else:
                acc = evaluate_accuracy(model, *splits[test_label]["test"])
                cells.append(f"{100 * acc:.2f}%")
                csv_cells.append(repr(acc))
        lines.append(f"{test_label:<12}" + "".join(f"{c:>12}" for c in cells))
        csv_lines.append(f"{test_label}," + ",".join(csv_cells))
    report = "\n".join(lines)
    print(report)
    (out_dir / "mixed_training_report.txt").write_text(report + "\n")
    (out_dir / "mixed_training_report.csv").write_text("\n".join(csv_lines) + "\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="amtennet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **flags):
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="output directory for this run")
        p.add_argument("--config", help="key = value config file; flags override")
        p.add_argument("--seed", type=int)
        for flag, kwargs in flags.items():
            p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, **kwargs)
        p.set_defaults(func=func)
        return p

    add("forge", cmd_forge,
        toy={"action": "store_const", "const": True},
        manifest={}, src_dir={}, op={}, mode={}, param={},
        classes={"type": int}, n_per_class={"type": int}, image_size={"type": int},
        ratios={})
    add("train", cmd_train,
        manifest={}, extractor={}, model={}, scale={"type": float},
        image_size={"type": int}, epochs={"type": int}, batch_size={"type": int},
        base_lr={"type": float}, eval_every={"type": int})
    add("eval", cmd_eval, checkpoint={"required": True}, manifest={}, split={},
        real_classes={})
    add("gradcheck", cmd_gradcheck, tolerance={"type": float},
        image_size={"type": int}, samples_per_block={"type": int})
    add("traces", cmd_traces, checkpoint={"required": True}, manifest={})
    add("ablate", cmd_ablate,
        manifest={}, image_size={"type": int}, epochs={"type": int},
        batch_size={"type": int}, scale={"type": float}, eval_every={"type": int},
        full={"action": "store_const", "const": True})
    add("robustness", cmd_robustness,
        classes={"type": int}, n_per_class={"type": int}, image_size={"type": int},
        epochs={"type": int}, batch_size={"type": int}, eval_every={"type": int})
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else USAGE_EXIT
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return NUMERICAL_EXIT
    except (DataError, ShapeError, AmtennetError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
