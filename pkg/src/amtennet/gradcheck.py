"""Central finite-difference verification of every analytic gradient.

Checks run in 64-bit mode: relative errors of well-implemented backward
passes sit orders of magnitude below the 32-bit noise floor there, which
is what makes the per-block tolerances meaningful.  Blocks larger than
the sampling budget are probed at a seeded random subset of positions;
small blocks are checked exhaustively.

Piecewise-linear layers (ReLU, max pooling) are only differentiable away
from their kinks, so the whole-network helper resamples inputs until
every kink has margin well above the probe step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import MaxPool2d, ReLU, ReLU1d, softmax_cross_entropy
from .tensor import Tensor


@dataclass
class BlockReport:
    name: str
    rel_error: float
    checked: int


@dataclass
class GradCheckReport:
    blocks: list[BlockReport]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(b.rel_error for b in self.blocks)

    def failures(self) -> list[BlockReport]:
        return [b for b in self.blocks if not b.rel_error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures()

    def render(self) -> str:
        lines = [f"{'block':<28}{'rel. error':>14}{'checked':>9}"]
        for b in self.blocks:
            flag = "" if b.rel_error < self.tolerance else "  FAIL"
            lines.append(f"{b.name:<28}{b.rel_error:>14.3e}{b.checked:>9}{flag}")
        lines.append(f"max relative error: {self.max_rel_error:.3e} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def _rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Norm-based relative error over the checked positions.

    The denominator floor covers blocks whose true gradient is exactly
    zero (e.g. conv biases feeding batch norm, which removes them):
    there both sides are roundoff noise and agreement is judged on the
    absolute scale instead.
    """
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(num / max(den, floor))


def _positions(size: int, budget: int | None, rng: np.random.Generator) -> np.ndarray:
    if budget is None or size <= budget:
        return np.arange(size)
    return rng.choice(size, size=budget, replace=False)


def gradient_check(net, x: np.ndarray, labels: np.ndarray | None = None, h: float = 1e-6,
                   tolerance: float = 1e-5, samples_per_block: int | None = None,
                   check_input: bool = True, seed: int = 0, train: bool = False) -> GradCheckReport:
    """Compare analytic parameter (and input) gradients against central
    finite differences of a scalar loss.

    `net` is anything with forward/backward/params (a single layer, the
    trace block, or a whole graph).  With `labels` the loss is the
    network's own softmax cross-entropy; otherwise a fixed random
    weighting of the output, which keeps the check meaningful for
    fragments that do not end in a classifier.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)  # private copy; probes nudge it in place
    wraps = x.ndim == 4

    first = net.forward(Tensor(x) if wraps else x, train)
    out0 = first.data if isinstance(first, Tensor) else first
    weights = rng.normal(size=out0.shape)

    def loss_and_grad(out):
        if labels is not None:
            return softmax_cross_entropy(out, labels)
        return float((weights * out).sum()), weights

    def run_loss():
        out = net.forward(Tensor(x) if wraps else x, train)
        out = out.data if isinstance(out, Tensor) else out
        return loss_and_grad(out)[0]

    # analytic pass
    _, dout = loss_and_grad(out0)
    for p in net.params():
        p.zero_grad()
    in_grad = net.backward(dout)

    blocks = []
    for p in net.params():
        if not p.trainable:
            continue
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1)
        pos = _positions(flat.size, samples_per_block, rng)
        numeric = np.empty(len(pos))
        for j, i in enumerate(pos):
            orig = flat[i]
            flat[i] = orig + h
            up = run_loss()
            flat[i] = orig - h
            down = run_loss()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        blocks.append(BlockReport(p.name, _rel_error(analytic[pos], numeric), len(pos)))
    if check_input:
        flat = x.reshape(-1)
        analytic = np.asarray(in_grad).reshape(-1)
        pos = _positions(flat.size, samples_per_block, rng)
        numeric = np.empty(len(pos))
        for j, i in enumerate(pos):
            orig = flat[i]
            flat[i] = orig + h
            up = run_loss()
            flat[i] = orig - h
            down = run_loss()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        blocks.append(BlockReport("input", _rel_error(analytic[pos], numeric), len(pos)))
    return GradCheckReport(blocks, tolerance)


def kink_margin(model, x: np.ndarray, train: bool = True) -> float:
    """Smallest distance of any ReLU pre-activation from zero or any pooling
    window runner-up from its winner, across a forward pass.

    Exact ties at 0.0 in pooling windows are plateaus of clamped ReLU
    outputs: they stay exactly zero as long as the ReLU margins hold, so
    they are not kinks.  A tie at any nonzero value counts as margin 0.
    """
    margin = np.inf
    out = model.extractor.forward(Tensor(np.asarray(x)), train)
    for layer in model.layers:
        data = out.data if isinstance(out, Tensor) else out
        if isinstance(layer, (ReLU, ReLU1d)):
            margin = min(margin, float(np.abs(data).min()))
        elif isinstance(layer, MaxPool2d):
            win, (n, c, _, _), (oh, ow), _ = layer._windows(data, fill=-np.inf)
            flat = np.sort(win.reshape(n, c, oh, ow, -1), axis=-1)
            top1, top2 = flat[..., -1], flat[..., -2]
            gap = top1 - top2
            if np.any((gap == 0) & (top1 != 0.0)):
                return 0.0
            live = gap[np.isfinite(gap) & (gap > 0)]
            if live.size:
                margin = min(margin, float(live.min()))
        out = layer.forward(out, train)
    return margin


def margined_input(model, shape: tuple, seed: int, min_margin: float = 2e-5,
                   max_tries: int = 60) -> np.ndarray:
    """Draw random inputs until every kink margin clears `min_margin`, so
    finite-difference probes cannot flip a ReLU or pooling winner."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        x = rng.uniform(0.05, 0.95, size=shape)
        if kink_margin(model, x) > min_margin:
            return x
    raise RuntimeError(f"no input with kink margin > {min_margin} found in {max_tries} tries")
