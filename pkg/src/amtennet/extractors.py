"""Residual front-ends: image in, trace feature map out.

All extractors share one contract: `forward(Tensor) -> Tensor` preserving
spatial size, `backward(grad) -> input grad`, an `out_channels` report the
downstream network adapts its fan-in to, and `params()` for the optimizer.

The adaptive trace block predicts each pixel with a trainable convolution
and takes the prediction-minus-image difference as the low-level trace
map, then stabilizes it by reusing that map across two further conv
stages and concatenating every intermediate :

    traces = predict(image) - image
    f1     = stage1(traces)                      (two 3-kernel convs)
    f2     = stage2([f1, traces])                (two 6-kernel convs)
    out    = [f2, traces, f1, traces]            (6+3+3+3 = 15 channels)

No nonlinearity appears anywhere in the block, so the learned traces are
never clipped or pooled away before the feature extractor sees them.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .layers import Conv2d, concat_channels, split_channels
from .tensor import ConvParams, Param, Tensor, he_conv

EXTRACTOR_KINDS = ("amten", "highpass", "srm", "constrained_conv", "none")


@dataclass
class ExtractorConfig:
    """Which residual front-end to build.

    `variant` selects one of the six modified trace-block wirings
    (1: forward the raw prediction instead of the residual, 2: no trace
    reuse, 3/4: stage-2 kernel count 3/12, 5: 5x5 predictor, 6: single
    conv per stage).  None means the canonical block.
    """

    kind: str = "amten"
    variant: int | None = None
    predictor_kernel: int = 3
    reuse_enabled: bool = True
    conv45_kernels: int = 6

    def __post_init__(self):
        if self.kind not in EXTRACTOR_KINDS:
            raise ShapeError(f"unknown extractor kind {self.kind!r}; expected one of {EXTRACTOR_KINDS}")
        if self.variant is not None and self.variant not in range(1, 7):
            raise ShapeError(f"trace-block variant must be in 1..6, got {self.variant}")
        if self.predictor_kernel not in (3, 5):
            raise ShapeError(f"predictor kernel must be 3 or 5, got {self.predictor_kernel}")
        if self.kind == "amten" and self.variant is None:
            # canonical form
            if self.predictor_kernel != 3 or not self.reuse_enabled or self.conv45_kernels != 6:
                raise ShapeError("canonical adaptive extractor requires predictor_kernel=3, "
                                 "reuse_enabled=True, conv45_kernels=6")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "variant": self.variant,
            "predictor_kernel": self.predictor_kernel,
            "reuse_enabled": self.reuse_enabled,
            "conv45_kernels": self.conv45_kernels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorConfig":
        return cls(**d)


class Extractor:
    """Base front-end; spatial dims are always preserved."""

    name = "extractor"
    out_channels: int

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def plan(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = shape
        if c != 3:
            raise ShapeError(f"{self.name}: expected a 3-channel image, got {c} channels")
        return (self.out_channels, h, w)

    def spec_rows(self) -> list[dict]:
        return []


class IdentityExtractor(Extractor):
    """kind=none: the raw image is forwarded unchanged."""

    name = "identity"
    out_channels = 3

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self.plan((x.shape[1], x.shape[2], x.shape[3]))
        return x

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        return out_grad


@dataclass
class TraceWiring:
    """Wiring knobs that distinguish the trace-block variants."""

    predictor_kernel: int = 3
    subtract_input: bool = True   # variant 1 forwards the prediction itself
    reuse: bool = True            # variant 2 drops every concatenation
    paired_stages: bool = True    # variant 6 keeps one conv per stage
    stage2_kernels: int = 6       # variants 3 / 4 use 3 / 12


class AmtenExtractor(Extractor):
    """Adaptive trace block (canonical or one of the six variants)."""

    name = "amten"

    def __init__(self, wiring: TraceWiring | None = None, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.wiring = wiring or TraceWiring()
        rng = rng if rng is not None else np.random.default_rng()
        w = self.wiring
        pk = w.predictor_kernel
        self.conv1 = Conv2d("conv1", he_conv("conv1", 3, 3, pk, rng, padding=pk // 2, dtype=dtype))
        self.conv2 = Conv2d("conv2", he_conv("conv2", 3, 3, 3, rng, padding=1, dtype=dtype))
        self.conv3 = None
        if w.paired_stages:
            self.conv3 = Conv2d("conv3", he_conv("conv3", 3, 3, 3, rng, padding=1, dtype=dtype))
        stage2_in = 6 if w.reuse else 3
        self.conv4 = Conv2d("conv4", he_conv("conv4", stage2_in, w.stage2_kernels, 3, rng, padding=1, dtype=dtype))
        self.conv5 = None
        if w.paired_stages:
            self.conv5 = Conv2d("conv5", he_conv("conv5", w.stage2_kernels, w.stage2_kernels, 3, rng,
                                                 padding=1, dtype=dtype))
        self.out_channels = w.stage2_kernels + 9 if w.reuse else w.stage2_kernels
        self._cache = None

    def params(self) -> list[Param]:
        out = []
        for conv in (self.conv1, self.conv2, self.conv3, self.conv4, self.conv5):
            if conv is not None:
                out.extend(conv.params())
        return out

    def spec_rows(self) -> list[dict]:
        rows = []
        for conv in (self.conv1, self.conv2, self.conv3, self.conv4, self.conv5):
            if conv is not None:
                rows.append(conv.spec_row())
        return rows

    def traces(self, x: Tensor) -> np.ndarray:
        """Low-level trace map (prediction minus image) without reuse stages."""
        pred = self.conv1.forward(x).data
        return pred - x.data if self.wiring.subtract_input else pred

    def trace_energy_ratio(self, x: Tensor) -> float:
        """Mean ||traces||^2 / ||image||^2 over the batch (content-suppression probe)."""
        t = self.traces(x)
        num = (t**2).sum(axis=(1, 2, 3))
        den = (x.data**2).sum(axis=(1, 2, 3))
        return float(np.mean(num / np.maximum(den, 1e-12)))

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self.plan((x.shape[1], x.shape[2], x.shape[3]))
        w = self.wiring
        pred = self.conv1.forward(x, train)
        t = pred.data - x.data if w.subtract_input else pred.data
        h1 = self.conv2.forward(Tensor(t), train)
        f1 = self.conv3.forward(h1, train) if self.conv3 is not None else h1
        if w.reuse:
            s2_in = concat_channels([f1.data, t])
        else:
            s2_in = f1.data
        h2 = self.conv4.forward(Tensor(s2_in), train)
        f2 = self.conv5.forward(h2, train) if self.conv5 is not None else h2
        if w.reuse:
            out = concat_channels([f2.data, t, f1.data, t])
        else:
            out = f2.data
        self._cache = (f1.data.shape[1], f2.data.shape[1])
        return Tensor(out)

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise ShapeError(f"{self.name}: backward called before forward")
        f1_ch, f2_ch = self._cache
        w = self.wiring
        if w.reuse:
            g_f2, g_t_a, g_f1_a, g_t_b = split_channels(out_grad, [f2_ch, 3, f1_ch, 3])
        else:
            g_f2, g_t_a, g_f1_a, g_t_b = out_grad, 0.0, 0.0, 0.0
        g_h2 = self.conv5.backward(g_f2) if self.conv5 is not None else g_f2
        g_s2_in = self.conv4.backward(g_h2)
        if w.reuse:
            g_f1_b, g_t_c = split_channels(g_s2_in, [f1_ch, 3])
            g_f1 = g_f1_a + g_f1_b
        else:
            g_f1, g_t_c = g_s2_in, 0.0
        g_h1 = self.conv3.backward(g_f1) if self.conv3 is not None else g_f1
        g_t_d = self.conv2.backward(g_h1)
        g_t = g_t_d + g_t_a + g_t_b + g_t_c
        g_x = self.conv1.backward(g_t)
        if w.subtract_input:
            g_x = g_x - g_t
        return g_x

    def set_identity_predictor(self):
        """Make the predictor an exact identity (center tap 1, zero bias) and
        zero the biases of every reuse conv; with subtraction enabled the
        whole block then outputs exactly zero."""
        k = self.conv1.p.kernel_size
        ident = np.zeros_like(self.conv1.p.kernels.value)
        for c in range(3):
            ident[c, c, k // 2, k // 2] = 1.0
        self.conv1.p.kernels.value[...] = ident
        self.conv1.p.bias.value[...] = 0.0
        for conv in (self.conv2, self.conv3, self.conv4, self.conv5):
            if conv is not None and conv.p.bias is not None:
                conv.p.bias.value[...] = 0.0


VARIANT_WIRINGS = {
    1: TraceWiring(subtract_input=False),
    2: TraceWiring(reuse=False),
    3: TraceWiring(stage2_kernels=3),
    4: TraceWiring(stage2_kernels=12),
    5: TraceWiring(predictor_kernel=5),
    6: TraceWiring(paired_stages=False),
}


def build_variant(variant_id: int, rng: np.random.Generator | None = None, dtype=np.float32) -> AmtenExtractor:
    """Trace block wired per the named ablation row (1..6)."""
    if variant_id not in VARIANT_WIRINGS:
        raise ShapeError(f"unknown trace-block variant {variant_id}; expected 1..6")
    ex = AmtenExtractor(VARIANT_WIRINGS[variant_id], rng=rng, dtype=dtype)
    ex.name = f"amten_v{variant_id}"
    return ex


# Fixed residual banks.  Three classic noise-residual kernels: first-order
# horizontal difference, second-order [1, -2, 1], and the 5x5 square
# kernel.  The "srm" flavor carries the kernels' customary 1 / 2 / 12
# normalizations; "highpass" uses the raw integer taps.  Every kernel sums
# to zero, so constant images map to zero residuals.
_FIRST_ORDER = np.array([[0, 0, 0], [0, -1, 1], [0, 0, 0]], dtype=np.float64)
_SECOND_ORDER = np.array([[0, 0, 0], [1, -2, 1], [0, 0, 0]], dtype=np.float64)
_SQUARE_5X5 = np.array(
    [
        [-1, 2, -2, 2, -1],
        [2, -6, 8, -6, 2],
        [-2, 8, -12, 8, -2],
        [2, -6, 8, -6, 2],
        [-1, 2, -2, 2, -1],
    ],
    dtype=np.float64,
)


def residual_kernel_bank(kind: str) -> list[np.ndarray]:
    if kind == "srm":
        return [_FIRST_ORDER / 1.0, _SECOND_ORDER / 2.0, _SQUARE_5X5 / 12.0]
    if kind == "highpass":
        return [_FIRST_ORDER, _SECOND_ORDER, _SQUARE_5X5]
    raise ShapeError(f"no fixed kernel bank named {kind!r}")


def _embed_center(kernel: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros((size, size), dtype=np.float64)
    off = (size - kernel.shape[0]) // 2
    out[off : off + kernel.shape[0], off : off + kernel.shape[1]] = kernel
    return out


def _edge_pad(data: np.ndarray, p: int) -> np.ndarray:
    return np.pad(data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")


def _fold_edge_pad(grad: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of edge replication: fold the pad ring's gradient back onto
    the border pixels (columns first, then rows, matching the separable
    structure of the padding)."""
    g = grad.copy()
    g[:, :, :, p] += g[:, :, :, :p].sum(axis=3)
    g[:, :, :, -p - 1] += g[:, :, :, -p:].sum(axis=3)
    g = g[:, :, :, p:-p]
    g[:, :, p] += g[:, :, :p].sum(axis=2)
    g[:, :, -p - 1] += g[:, :, -p:].sum(axis=2)
    return g[:, :, p:-p]


class FixedBankExtractor(Extractor):
    """Non-trainable bank of high-pass kernels applied per input channel.

    3 kernels x 3 channels = 9 output maps; smaller kernels are embedded
    in a 5x5 frame so one valid convolution over an edge-replicated input
    preserves spatial size.  Edge replication (rather than zero padding)
    keeps the high-pass property exact at the borders: constant images
    map to identically zero residuals.
    """

    def __init__(self, kind: str, dtype=np.float32):
        bank = residual_kernel_bank(kind)
        size = max(k.shape[0] for k in bank)
        kernels = np.zeros((3 * len(bank), 3, size, size), dtype=dtype)
        for j, kern in enumerate(bank):
            emb = _embed_center(kern, size)
            for i in range(3):
                kernels[j * 3 + i, i] = emb
        self.name = kind
        self.pad = size // 2
        self.conv = Conv2d(kind, ConvParams(kind, kernels, None, stride=1, padding=0,
                                            trainable=False))
        self.out_channels = kernels.shape[0]

    def params(self) -> list[Param]:
        return self.conv.params()

    def spec_rows(self) -> list[dict]:
        return [self.conv.spec_row()]

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self.plan((x.shape[1], x.shape[2], x.shape[3]))
        return self.conv.forward(Tensor(_edge_pad(x.data, self.pad)), train)

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        return _fold_edge_pad(self.conv.backward(out_grad), self.pad)


class ConstrainedConvExtractor(Extractor):
    """Trainable residual layer re-projected after every optimizer step:
    each kernel slice keeps a -1 center with the surround rescaled to sum
    to +1, so every slice integrates to zero."""

    name = "constrained_conv"

    def __init__(self, rng: np.random.Generator | None = None, kernel: int = 5, filters: int = 3,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        self.conv = Conv2d(
            "constrained_conv",
            he_conv("constrained_conv", 3, filters, kernel, rng, padding=kernel // 2, bias=False, dtype=dtype),
        )
        self.out_channels = filters
        self.project()

    def params(self) -> list[Param]:
        return self.conv.params()

    def spec_rows(self) -> list[dict]:
        return [self.conv.spec_row()]

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self.plan((x.shape[1], x.shape[2], x.shape[3]))
        return self.conv.forward(x, train)

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        return self.conv.backward(out_grad)

    def project(self):
        """Reset the center taps to -1 and rescale each surround to sum to +1.

        Normalization runs in float64 and the storage-precision rounding
        residual is folded back into the largest surround tap, so the
        projected float32 kernels satisfy the constraint well inside 1e-6
        rather than drifting at the quantization scale.
        """
        k = self.conv.p.kernels.value
        size = k.shape[2]
        c = size // 2
        for o in range(k.shape[0]):
            for i in range(k.shape[1]):
                sl = np.asarray(k[o, i], dtype=np.float64).copy()
                sl[c, c] = 0.0
                s = sl.sum()
                if abs(s) < 1e-12:
                    warnings.warn(
                        f"constrained kernel ({o},{i}) has an all-zero surround; reinitializing uniformly"
                    )
                    sl[...] = 1.0 / (size * size - 1)
                else:
                    sl /= s
                sl[c, c] = 0.0
                q = sl.astype(k.dtype)
                err = float(q.astype(np.float64).sum()) - 1.0
                flat = np.abs(q).reshape(-1)
                flat[c * size + c] = -np.inf  # never correct through the center
                j = int(flat.argmax())
                q.flat[j] = np.asarray(q.flat[j] - err, dtype=k.dtype)
                q[c, c] = -1.0
                k[o, i] = q


def build_extractor(config: ExtractorConfig, rng: np.random.Generator | None = None,
                    dtype=np.float32) -> Extractor:
    """Instantiate the front-end described by an ExtractorConfig."""
    if config.kind == "none":
        return IdentityExtractor()
    if config.kind in ("highpass", "srm"):
        return FixedBankExtractor(config.kind, dtype=dtype)
    if config.kind == "constrained_conv":
        return ConstrainedConvExtractor(rng=rng, dtype=dtype)
    if config.variant is not None:
        return build_variant(config.variant, rng=rng, dtype=dtype)
    return AmtenExtractor(
        TraceWiring(
            predictor_kernel=config.predictor_kernel,
            reuse=config.reuse_enabled,
            stage2_kernels=config.conv45_kernels,
        ),
        rng=rng,
        dtype=dtype,
    )
