"""SGD with momentum, weight decay, and a step learning-rate schedule."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericalError
from .tensor import Param


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    gamma: float = 0.5
    step_size: int = 1000
    momentum: float = 0.95
    decay: float = 0.005
    batch_size: int = 64
    epochs: int = 10
    eval_every: int = 1000
    seed: int = 0
    # The printed update rule pairs a negated momentum term with the
    # subtraction step, which alternates the update sign each iteration;
    # the standard accumulate-momentum semantics (the default here) is
    # what the published hyperparameters were tuned for.  The literal
    # printed rule stays available for study.
    literal_update: bool = False
    deterministic: bool = True

    def __post_init__(self):
        if self.base_lr <= 0 or self.momentum < 0 or self.decay < 0:
            raise ValueError("learning rate must be positive and momentum/decay non-negative")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (train-mode batch norm)")
        if self.step_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("step_size, epochs, and eval_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Step-decayed rate: base_lr * gamma^floor(iteration / step_size)."""
    return cfg.base_lr * cfg.gamma ** (iteration // cfg.step_size)


def sgd_step(param: Param, lr: float, momentum: float, decay: float,
             literal_update: bool = False) -> None:
    """One in-place update of a parameter block from its .grad buffer.

    Default semantics:  v <- momentum*v - lr*(g + decay*w);  w <- w + v.
    Literal mode:       d <- lr*g - momentum*d + decay*lr*w;  w <- w - d
    (the update buffer doubles as d).
    """
    if not param.trainable:
        return
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite gradient in {param.name}; step aborted")
    if literal_update:
        d = lr * g - momentum * param.velocity + decay * lr * param.value
        param.velocity[...] = d
        param.value -= d
    else:
        param.velocity[...] = momentum * param.velocity - lr * (g + decay * param.value)
        param.value += param.velocity


def sgd_step_all(params: list[Param], lr: float, momentum: float, decay: float,
                 literal_update: bool = False) -> None:
    for p in params:
        sgd_step(p, lr, momentum, decay, literal_update)
