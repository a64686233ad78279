"""Labeled corpora: manifests, post-processing forges, splits, and the
procedural toy corpus used for desk-scale runs.

A manifest is one record per line, UTF-8, tab-separated:
path, class_index, class_name, ops, split; ops encoded
``name:param[,name:param]`` (empty for none).  Images are stored as
lossless PNG, except samples whose final op is a JPEG recompression,
which keep the exact bytes the codec produced (re-encoding would alter
the compression traces under study).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import imaging
from .errors import DataError

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.75, 0.05, 0.20)


@dataclass
class SampleRecord:
    path: str
    class_index: int
    class_name: str
    ops: list = field(default_factory=list)  # ordered (name, param) pairs
    split: str = "train"


def encode_ops(ops: list) -> str:
    parts = []
    for name, param in ops:
        if isinstance(param, float) and float(param).is_integer() and name != "GC":
            param = int(param)
        parts.append(f"{name}:{param}")
    return ",".join(parts)


def decode_ops(text: str) -> list:
    if not text:
        return []
    out = []
    for part in text.split(","):
        name, _, raw = part.partition(":")
        param = float(raw) if name == "GC" else int(raw)
        out.append((name, param))
    return out


def write_manifest(path: str | Path, records: list[SampleRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.path}\t{r.class_index}\t{r.class_name}\t{encode_ops(r.ops)}\t{r.split}\n")


def read_manifest(path: str | Path) -> list[SampleRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    records = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise DataError(f"{path}:{ln}: expected 5 tab-separated fields, got {len(fields)}")
            p, idx, name, ops, split = fields
            if split not in SPLITS:
                raise DataError(f"{path}:{ln}: unknown split {split!r}")
            records.append(SampleRecord(p, int(idx), name, decode_ops(ops), split))
    return records


def num_classes(records: list[SampleRecord]) -> int:
    return max(r.class_index for r in records) + 1


def split_records(records: list[SampleRecord], ratios=DEFAULT_RATIOS, seed: int = 0) -> list[SampleRecord]:
    """Per-class stratified train/val/test assignment; the three subsets
    partition each class, so test items never appear elsewhere."""
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise DataError(f"split ratios must be three values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    out = list(records)
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(out):
        by_class.setdefault(r.class_index, []).append(i)
    for cls in sorted(by_class):
        idx = np.array(by_class[cls])
        rng.shuffle(idx)
        n = len(idx)
        n_train = int(n * ratios[0])
        n_val = int(n * ratios[1])
        for j, i in enumerate(idx):
            split = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
            out[i] = replace(out[i], split=split)
    return out


def ingest_directory(root: str | Path, extensions=(".png", ".jpg", ".jpeg")) -> list[SampleRecord]:
    """Build records from a directory tree: each immediate subdirectory is
    one class (sorted by name), holding PNG/JPEG files."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"{root} has no class subdirectories")
    records = []
    for idx, d in enumerate(class_dirs):
        files = sorted(p for p in d.rglob("*") if p.suffix.lower() in extensions)
        if not files:
            raise DataError(f"class directory {d} holds no images")
        for p in files:
            records.append(SampleRecord(str(p), idx, d.name))
    return records


@dataclass
class OpSpec:
    """One post-processing operation restricted to its published parameter list."""

    name: str
    domain: tuple = ()

    def __post_init__(self):
        if self.name not in imaging.OP_DOMAINS:
            raise DataError(f"unknown operation {self.name!r}; expected one of {sorted(imaging.OP_DOMAINS)}")
        if not self.domain:
            self.domain = tuple(imaging.OP_DOMAINS[self.name])

    def validate(self, param):
        if param not in self.domain:
            raise DataError(f"{self.name} parameter {param!r} outside the published list {self.domain}")
        return param


def _forged_path(out_images: Path, src_path: str, idx: int, op_name: str, is_jpeg: bool) -> Path:
    stem = Path(src_path).stem
    ext = ".jpg" if is_jpeg else ".png"
    return out_images / f"{stem}_{op_name.lower()}_{idx:06d}{ext}"


def forge(records: list[SampleRecord], op: OpSpec, out_dir: str | Path, mode: str = "single",
          param=None, seed: int = 0) -> list[SampleRecord]:
    """Apply one operation to every record and write a derived corpus.

    `single` mode applies one fixed parameter; `mix` draws per-image
    parameters uniformly from the published list using a per-record
    stream keyed on (seed, record index), so parallel forging would give
    identical output to this serial loop.  Class labels and split
    assignments carry over unchanged.
    """
    out_dir = Path(out_dir)
    out_images = out_dir / "images"
    out_images.mkdir(parents=True, exist_ok=True)
    if mode not in ("single", "mix"):
        raise DataError(f"forge mode must be 'single' or 'mix', got {mode!r}")
    if mode == "single":
        if param is None:
            raise DataError("single mode needs a parameter")
        op.validate(param)
    new_records = []
    for idx, rec in enumerate(records):
        p = param if mode == "single" else _mix_param(op, seed, idx)
        img = imaging.read_image(rec.path)
        if op.name == "JP":
            buf = imaging.jpeg_encode(img, int(p))
            dst = _forged_path(out_images, rec.path, idx, op.name, is_jpeg=True)
            dst.write_bytes(buf)
        else:
            out = imaging.apply_op(img, op.name, p)
            dst = _forged_path(out_images, rec.path, idx, op.name, is_jpeg=False)
            imaging.write_image(dst, out)
        new_records.append(
            SampleRecord(str(dst), rec.class_index, rec.class_name, rec.ops + [(op.name, p)], rec.split)
        )
    write_manifest(out_dir / "manifest.tsv", new_records)
    return new_records


def _mix_param(op: OpSpec, seed: int, idx: int):
    rng = np.random.default_rng([seed, idx])
    return op.domain[int(rng.integers(len(op.domain)))]


def load_split(records: list[SampleRecord], split: str, input_size: int,
               dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Load one split as ((n, 3, s, s) float in [0, 1], int labels)."""
    subset = [r for r in records if r.split == split]
    if not subset:
        raise DataError(f"split {split!r} is empty")
    X = np.empty((len(subset), 3, input_size, input_size), dtype=dtype)
    y = np.empty(len(subset), dtype=np.int64)
    for i, rec in enumerate(subset):
        img = imaging.resize_to(imaging.read_image(rec.path), input_size)
        X[i] = img.astype(dtype).transpose(2, 0, 1) / 255.0
        y[i] = rec.class_index
    return X, y


# --- procedural toy corpus -------------------------------------------------

DEFAULT_CLASS_CHAINS = [
    ("clean", []),
    ("med5", [("MED", 5)]),
    ("gb5", [("GB", 5)]),
    ("jp60", [("JP", 60)]),
    ("me5", [("ME", 5)]),
    ("gc06", [("GC", 0.6)]),
    ("sc20", [("SC", 20)]),
    ("jp80", [("JP", 80)]),
]


def toy_base_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Random geometric content plus strong high-frequency noise, so that
    filtering/compression chains leave clearly measurable residues."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    a, b = rng.uniform(-1, 1, 2)
    content = a * xx + b * yy
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.05, 0.3)
        amp = rng.uniform(-1, 1)
        content = content + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    content -= content.min()
    content /= max(content.max(), 1e-9)
    gains = rng.uniform(0.5, 1.0, 3)
    img = content[:, :, None] * gains[None, None, :] * 0.7 + 0.15
    img = img + rng.normal(0.0, 0.08, (size, size, 3))
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def synthesize_toy_corpus(out_dir: str | Path, classes: int = 4, n_per_class: int = 1000,
                          size: int = 64, seed: int = 0, ratios=DEFAULT_RATIOS) -> list[SampleRecord]:
    """Generate a class-balanced corpus whose classes differ only by their
    post-processing chain, split it, and write manifest + metadata.

    Every image is derived from an independently generated base keyed on
    (seed, class, index), so the whole corpus regenerates bit-exactly
    from the metadata alone.
    """
    if not 2 <= classes <= len(DEFAULT_CLASS_CHAINS):
        raise DataError(f"toy corpus supports 2..{len(DEFAULT_CLASS_CHAINS)} classes, got {classes}")
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for cls in range(classes):
        class_name, chain = DEFAULT_CLASS_CHAINS[cls]
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, cls, i])
            base = toy_base_image(size, rng)
            if chain and chain[-1][0] == "JP":
                img = imaging.apply_chain(base, chain[:-1])
                buf = imaging.jpeg_encode(img, int(chain[-1][1]))
                path = images_dir / f"{class_name}_{i:05d}.jpg"
                path.write_bytes(buf)
            else:
                img = imaging.apply_chain(base, chain)
                path = images_dir / f"{class_name}_{i:05d}.png"
                imaging.write_image(path, img)
            records.append(SampleRecord(str(path), cls, class_name, list(chain)))
    records = split_records(records, ratios=ratios, seed=seed)
    write_manifest(out_dir / "manifest.tsv", records)
    meta = {"seed": seed, "size": size, "classes": classes, "n_per_class": n_per_class,
            "generator": "toy-v1"}
    (out_dir / "corpus_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return records
