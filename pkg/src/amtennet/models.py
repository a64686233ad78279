"""Declarative construction of the detector family.

One builder covers the whole family: the canonical detector, the
extractor-ablated baseline (identity front-end), the pooling / 1x1-kernel
ablations, and reduced "mini" versions for desk-scale runs.  A shape
planner walks the layer list symbolically so an invalid input size is
rejected at build time with the failing layer named.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .extractors import Extractor, ExtractorConfig, build_extractor
from .layers import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Flatten,
    FullyConnected,
    Layer,
    MaxPool2d,
    ReLU,
    ReLU1d,
)
from .tensor import BatchNormParams, Param, Tensor, he_conv

FULL_WIDTHS = (24, 48, 64, 128)
FULL_FC = 300


@dataclass
class ShapeRow:
    layer: str
    kernel: int | None
    count: int | None
    stride: int | None
    out: tuple[int, int, int]  # (c, h, w)


class ShapePlan:
    """Per-layer size table produced without running any data."""

    def __init__(self, rows: list[ShapeRow]):
        self.rows = rows

    def spatial_ladder(self) -> list[int]:
        """Spatial size after every conv/pool stage, in order."""
        return [r.out[1] for r in self.rows if r.layer.startswith(("conv", "pool", "avgpool"))]

    def kernel_counts(self) -> list[int]:
        return [r.count for r in self.rows if r.count is not None]

    def render(self) -> str:
        lines = [f"{'Layer':<12}{'Kernel':>8}{'Count':>8}{'Stride':>8}{'Output':>14}"]
        for r in self.rows:
            kern = f"{r.kernel}x{r.kernel}" if r.kernel else "-"
            count = str(r.count) if r.count is not None else "\\"
            stride = str(r.stride) if r.stride is not None else "-"
            out = f"{r.out[1]}x{r.out[2]}x{r.out[0]}"
            lines.append(f"{r.layer:<12}{kern:>8}{count:>8}{stride:>8}{out:>14}")
        return "\n".join(lines)


class ModelGraph:
    """An extractor, the conv feature stack, and the classifier head."""

    def __init__(self, name: str, extractor: Extractor, layers: list[Layer],
                 num_classes: int, input_size: int, build_args: dict):
        self.name = name
        self.extractor = extractor
        self.layers = layers
        self.num_classes = num_classes
        self.input_size = input_size
        self.build_args = build_args
        # validate eagerly so a too-small input fails at build time
        self.shape_plan()

    def params(self) -> list[Param]:
        out = list(self.extractor.params())
        for layer in self.layers:
            out.extend(layer.params())
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise ShapeError(f"{self.name}: duplicate parameter names in graph")
        return out

    def parameter_count(self, trainable_only: bool = True) -> int:
        return sum(p.value.size for p in self.params() if p.trainable or not trainable_only)

    def forward(self, batch: np.ndarray, train: bool = False) -> np.ndarray:
        x = self.extractor.forward(Tensor(np.asarray(batch)), train)
        out = x
        for layer in self.layers:
            out = layer.forward(out, train)
        return out  # logits, (n, p)

    def backward(self, logit_grad: np.ndarray) -> np.ndarray:
        g = logit_grad
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return self.extractor.backward(g)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch, train=False).argmax(axis=1)

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def shape_plan(self, input_size: int | None = None) -> ShapePlan:
        size = input_size if input_size is not None else self.input_size
        shape = (3, size, size)
        rows = []
        shape = self.extractor.plan(shape)
        ex_rows = self.extractor.spec_rows()
        # extractor rows all preserve spatial size; annotate with it
        for row in ex_rows:
            rows.append(ShapeRow(row["layer"], row["kernel"], row["count"], row["stride"],
                                 (row["count"], size, size)))
        for layer in self.layers:
            shape = layer.plan(shape)
            row = layer.spec_row() if hasattr(layer, "spec_row") else None
            if row:
                rows.append(ShapeRow(row["layer"], row["kernel"], row["count"], row["stride"], shape))
            elif isinstance(layer, FullyConnected):
                rows.append(ShapeRow(layer.name, None, None, None, shape))
        return ShapePlan(rows)

    def manifest(self) -> dict:
        """Human-readable architecture record stored beside checkpoints."""
        plan = self.shape_plan()
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "build_args": self.build_args,
            "layers": [
                {"layer": r.layer, "kernel": r.kernel, "count": r.count,
                 "stride": r.stride, "output": list(r.out)}
                for r in plan.rows
            ],
        }


def _feature_stack(in_channels: int, widths: tuple[int, int, int, int], conv9_kernel: int,
                   pool_cls, rng: np.random.Generator, dtype) -> list[Layer]:
    """Four conv stages with the Conv -> BN -> ReLU -> MaxPool ordering;
    the last stage has no BN (three BNs total)."""
    w6, w7, w8, w9 = widths
    layers: list[Layer] = []

    def stage(idx, in_ch, out_ch, kernel, padding, with_bn):
        layers.append(Conv2d(f"conv{idx}", he_conv(f"conv{idx}", in_ch, out_ch, kernel, rng,
                                                   padding=padding, dtype=dtype)))
        if with_bn:
            layers.append(BatchNorm2d(f"bn{idx}", BatchNormParams(f"bn{idx}", out_ch, dtype=dtype)))
        layers.append(ReLU(f"relu{idx}"))
        layers.append(pool_cls(f"pool{idx}", kernel=3, stride=2, ceil_mode=True))

    stage(6, in_channels, w6, 3, 1, with_bn=True)
    stage(7, w6, w7, 3, 0, with_bn=True)
    stage(8, w7, w8, 3, 0, with_bn=True)
    stage(9, w8, w9, conv9_kernel, conv9_kernel // 2, with_bn=False)
    return layers


def _classifier(in_dim: int, fc_width: int, num_classes: int, rng: np.random.Generator,
                dtype) -> list[Layer]:
    return [
        Flatten(),
        FullyConnected.create("fc1", in_dim, fc_width, rng, dtype=dtype),
        ReLU1d("fc1_relu"),
        FullyConnected.create("fc2", fc_width, fc_width, rng, dtype=dtype),
        ReLU1d("fc2_relu"),
        FullyConnected.create("fc3", fc_width, num_classes, rng, dtype=dtype),
    ]


def _build(name: str, num_classes: int, extractor_config: ExtractorConfig, input_size: int,
           widths, fc_width, conv9_kernel, pool_cls, rng, dtype, build_args) -> ModelGraph:
    if num_classes < 2:
        raise ShapeError(f"need at least 2 classes, got {num_classes}")
    extractor = build_extractor(extractor_config, rng=rng, dtype=dtype)
    layers = _feature_stack(extractor.out_channels, widths, conv9_kernel, pool_cls, rng, dtype)
    # plan through the conv stack to size the classifier input
    shape = extractor.plan((3, input_size, input_size))
    for layer in layers:
        shape = layer.plan(shape)
    in_dim = shape[0] * shape[1] * shape[2]
    layers.extend(_classifier(in_dim, fc_width, num_classes, rng, dtype))
    return ModelGraph(name, extractor, layers, num_classes, input_size, build_args)


def build_amtennet(num_classes: int, extractor: ExtractorConfig | None = None,
                   input_size: int = 128, rng: np.random.Generator | None = None,
                   dtype=np.float32) -> ModelGraph:
    """Full-size detector: extractor front-end + 24/48/64/128 conv stack + 300-wide head."""
    cfg = extractor or ExtractorConfig()
    rng = rng if rng is not None else np.random.default_rng()
    name = "amtennet" if cfg.kind == "amten" and cfg.variant is None else f"net-{cfg.kind}"
    if cfg.kind == "none":
        name = "model-base"
    if cfg.variant is not None:
        name = f"amtennet-v{cfg.variant}"
    args = {"builder": "amtennet", "num_classes": num_classes, "input_size": input_size,
            "extractor": cfg.to_dict()}
    return _build(name, num_classes, cfg, input_size, FULL_WIDTHS, FULL_FC, 1, MaxPool2d,
                  rng, dtype, args)


def build_ablation(ablation_id: int, num_classes: int, extractor: ExtractorConfig | None = None,
                   input_size: int = 128, rng: np.random.Generator | None = None,
                   dtype=np.float32) -> ModelGraph:
    """Network-level ablations: 7 swaps every max pool for average pooling,
    8 replaces the 1x1 cross-channel conv with a padded 3x3."""
    if ablation_id not in (7, 8):
        raise ShapeError(f"network ablation id must be 7 or 8, got {ablation_id}")
    cfg = extractor or ExtractorConfig()
    rng = rng if rng is not None else np.random.default_rng()
    pool_cls = AvgPool2d if ablation_id == 7 else MaxPool2d
    conv9_kernel = 3 if ablation_id == 8 else 1
    args = {"builder": "ablation", "ablation_id": ablation_id, "num_classes": num_classes,
            "input_size": input_size, "extractor": cfg.to_dict()}
    return _build(f"amtennet-{ablation_id}", num_classes, cfg, input_size, FULL_WIDTHS, FULL_FC,
                  conv9_kernel, pool_cls, rng, dtype, args)


def build_mini(num_classes: int, extractor: ExtractorConfig | None = None, scale: float = 0.5,
               input_size: int = 64, rng: np.random.Generator | None = None,
               dtype=np.float32) -> ModelGraph:
    """Same topology with conv widths and head scaled down and a smaller input.

    The trace block itself is defined by its wiring, not the scale, so it
    stays at its canonical kernel counts.
    """
    if not 0.0 < scale <= 1.0:
        raise ShapeError(f"scale must be in (0, 1], got {scale}")
    cfg = extractor or ExtractorConfig()
    rng = rng if rng is not None else np.random.default_rng()
    widths = tuple(max(2, round(w * scale)) for w in FULL_WIDTHS)
    fc_width = max(8, round(FULL_FC * scale))
    name = "amtennet-mini" if cfg.kind == "amten" and cfg.variant is None else f"mini-{cfg.kind}"
    if cfg.kind == "none":
        name = "model-base-mini"
    if cfg.variant is not None:
        name = f"amtennet-mini-v{cfg.variant}"
    args = {"builder": "mini", "num_classes": num_classes, "input_size": input_size,
            "scale": scale, "extractor": cfg.to_dict()}
    return _build(name, num_classes, cfg, input_size, widths, fc_width, 1, MaxPool2d,
                  rng, dtype, args)


def from_build_args(args: dict, rng: np.random.Generator | None = None, dtype=np.float32) -> ModelGraph:
    """Rebuild a graph from the build_args stored in a checkpoint manifest."""
    args = dict(args)
    builder = args.pop("builder")
    cfg = ExtractorConfig.from_dict(args.pop("extractor"))
    if builder == "amtennet":
        return build_amtennet(extractor=cfg, rng=rng, dtype=dtype, **args)
    if builder == "ablation":
        return build_ablation(args.pop("ablation_id"), extractor=cfg, rng=rng, dtype=dtype, **args)
    if builder == "mini":
        return build_mini(extractor=cfg, rng=rng, dtype=dtype, **args)
    raise ShapeError(f"unknown builder {builder!r} in model manifest")
