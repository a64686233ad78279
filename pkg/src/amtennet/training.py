"""Training loop, metric logging, and the binary checkpoint format.

Checkpoints round-trip bit-exactly: a save -> load -> save cycle produces
identical bytes, and resuming a run in deterministic mode continues the
loss curve exactly (per-epoch shuffles are derived from (seed, epoch), so
nothing about the data order depends on elapsed state).
"""
from __future__ import annotations

import csv
import json
import struct
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # determinism then relies on a fixed ambient thread count
    threadpool_limits = None

from .errors import CheckpointError, DataError, NumericalError
from .layers import softmax_cross_entropy
from .models import ModelGraph, from_build_args
from .optim import TrainConfig, lr_at, sgd_step_all
from .tensor import Tensor

CHECKPOINT_MAGIC = b"AMTNCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: ModelGraph, iteration: int = 0,
                    rng_state: dict | None = None) -> None:
    """Write magic, a sorted JSON header, then raw little-endian float32 blobs
    (parameter values followed by their momentum buffers, in name order)."""
    params = sorted(model.params(), key=lambda p: p.name)
    blocks = []
    offset = 0
    blobs = []
    for p in params:
        for role, arr in (("value", p.value), ("velocity", p.velocity)):
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            blocks.append({"name": p.name, "role": role, "shape": list(arr.shape),
                           "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    header = {
        "version": CHECKPOINT_VERSION,
        "iteration": int(iteration),
        "rng_state": _encode_rng(rng_state),
        "manifest": model.manifest(),
        "blocks": blocks,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path, dtype=np.float32):
    """Rebuild the model from its manifest and restore every block by name.

    Returns (model, iteration, rng_state).
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {header.get('version')} not supported (expected {CHECKPOINT_VERSION})"
            )
        payload = f.read()
    model = from_build_args(header["manifest"]["build_args"], dtype=dtype)
    by_name = {p.name: p for p in model.params()}
    seen = set()
    for block in header["blocks"]:
        p = by_name.get(block["name"])
        if p is None:
            raise CheckpointError(f"checkpoint block {block['name']!r} not present in rebuilt model")
        raw = payload[block["offset"] : block["offset"] + block["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(block["shape"]).astype(dtype)
        target = p.value if block["role"] == "value" else p.velocity
        if arr.shape != target.shape:
            raise CheckpointError(
                f"checkpoint block {block['name']} has shape {arr.shape}, model expects {target.shape}"
            )
        target[...] = arr
        seen.add((block["name"], block["role"]))
    missing = {(p.name, r) for p in model.params() for r in ("value", "velocity")} - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing blocks: {sorted(missing)[:4]} ...")
    return model, header["iteration"], _decode_rng(header["rng_state"])


def _encode_rng(state: dict | None):
    if state is None:
        return None
    return json.loads(json.dumps(state, default=str))


def _decode_rng(state):
    if state is None:
        return None
    # PCG64 state integers survive the JSON round trip as strings
    def restore(obj):
        if isinstance(obj, dict):
            return {k: restore(v) for k, v in obj.items()}
        if isinstance(obj, str) and obj.isdigit():
            return int(obj)
        return obj
    return restore(state)


@dataclass
class TrainResult:
    final_path: Path
    best_path: Path
    metrics_path: Path
    best_val_accuracy: float
    final_val_accuracy: float
    iterations: int
    trace_log: list = field(default_factory=list)  # (iteration, energy ratio)


def evaluate_accuracy(model: ModelGraph, X: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    correct = 0
    for at in range(0, len(y), batch_size):
        preds = model.predict(X[at : at + batch_size])
        correct += int((preds == y[at : at + batch_size]).sum())
    return correct / len(y)


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    """Seeded per-epoch permutation, chunked; a trailing singleton is folded
    into the previous batch so train-mode batch norm always sees >= 2."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for i, s in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else n
        yield perm[s:end]


def fit(model: ModelGraph, train_set, val_set, cfg: TrainConfig, out_dir: str | Path,
        trace_probe: np.ndarray | None = None, log_every: int = 1) -> TrainResult:
    """Run the full training protocol and leave checkpoints + metric CSV in out_dir.

    train_set / val_set are (X, y) pairs of float arrays in [0, 1] and int
    labels.  Loss is logged every step; validation accuracy every
    `eval_every` iterations and at the end; the best-validation and final
    checkpoints are both saved.  When the extractor exposes a projection
    hook it runs after every optimizer step.  When it exposes a trace
    energy probe and `trace_probe` images are given, the content
    suppression ratio is logged at iteration 100 and every eval point.

    With cfg.deterministic (the default) the whole run executes on a
    single BLAS thread, so a fixed seed gives a bit-identical loss
    trajectory on any machine.
    """
    X_train, y_train = train_set
    X_val, y_val = val_set
    _validate_split("train", X_train, y_train, model.num_classes)
    _validate_split("val", X_val, y_val, model.num_classes)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    best_path = out_dir / "checkpoint_best.ckpt"
    final_path = out_dir / "checkpoint_final.ckpt"

    master_rng = np.random.default_rng(cfg.seed)
    params = model.params()
    can_probe = trace_probe is not None and hasattr(model.extractor, "trace_energy_ratio")
    trace_log: list[tuple[int, float]] = []

    def probe(iteration: int):
        if not can_probe or (trace_log and trace_log[-1][0] == iteration):
            return
        ratio = model.extractor.trace_energy_ratio(Tensor(trace_probe))
        trace_log.append((iteration, ratio))
        if iteration in (100,) or len(trace_log) == 1:
            _dump_trace_images(model, trace_probe, out_dir / "traces" / f"iter_{iteration:06d}")

    def _final_probe(iteration: int):
        probe(iteration)
        if can_probe:
            _dump_trace_images(model, trace_probe, out_dir / "traces" / f"iter_{iteration:06d}")

    best_val = -1.0
    val_acc = None
    iteration = 0
    limiter = (threadpool_limits(limits=1)
               if cfg.deterministic and threadpool_limits is not None else nullcontext())
    with limiter:
        with open(metrics_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "lr", "loss", "val_accuracy"])
            for epoch in range(cfg.epochs):
                for idx in _epoch_batches(len(y_train), cfg.batch_size, cfg.seed, epoch):
                    lr = lr_at(iteration, cfg)
                    logits = model.forward(X_train[idx], train=True)
                    loss, dlogits = softmax_cross_entropy(logits, y_train[idx])
                    if not np.isfinite(loss):
                        raise NumericalError(f"non-finite loss at iteration {iteration}")
                    model.zero_grads()
                    model.backward(dlogits)
                    sgd_step_all(params, lr, cfg.momentum, cfg.decay, cfg.literal_update)
                    if hasattr(model.extractor, "project"):
                        model.extractor.project()
                    iteration += 1
                    if iteration == 100:
                        probe(iteration)
                    measured = iteration % cfg.eval_every == 0
                    if measured:
                        val_acc = evaluate_accuracy(model, X_val, y_val)
                        probe(iteration)
                        if val_acc > best_val:
                            best_val = val_acc
                            save_checkpoint(best_path, model, iteration,
                                            master_rng.bit_generator.state)
                    if iteration % log_every == 0 or measured:
                        writer.writerow([iteration, repr(lr), repr(loss),
                                         repr(val_acc) if measured else ""])
        final_val = evaluate_accuracy(model, X_val, y_val)
        _final_probe(iteration)
    if final_val > best_val:
        best_val = final_val
        save_checkpoint(best_path, model, iteration, master_rng.bit_generator.state)
    save_checkpoint(final_path, model, iteration, master_rng.bit_generator.state)
    if trace_log:
        with open(out_dir / "trace_energy.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "energy_ratio"])
            for it, ratio in trace_log:
                writer.writerow([it, repr(ratio)])
    return TrainResult(final_path, best_path, metrics_path, best_val, final_val,
                       iteration, trace_log)


def _dump_trace_images(model, probe: np.ndarray, dump_dir: Path) -> None:
    """Per-channel 8-bit grayscale dumps of the low-level trace map for the
    first probe image (content-suppression snapshots)."""
    from .imaging import save_grayscale

    dump_dir.mkdir(parents=True, exist_ok=True)
    traces = model.extractor.traces(Tensor(probe[:1]))
    for c in range(traces.shape[1]):
        save_grayscale(dump_dir / f"trace_ch{c}.png", traces[0, c])


def _validate_split(name: str, X: np.ndarray, y: np.ndarray, num_classes: int):
    if len(y) == 0:
        raise DataError(f"{name} split is empty")
    if len(X) != len(y):
        raise DataError(f"{name} split has {len(X)} images but {len(y)} labels")
    if y.min() < 0 or y.max() >= num_classes:
        raise DataError(
            f"{name} split labels out of range [0, {num_classes}): found {y.min()}..{y.max()}"
        )
