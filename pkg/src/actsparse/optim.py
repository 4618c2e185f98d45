"""SGD, momentum SGD and Adam over a dict of named parameter arrays.

Parameters are updated in place so that objects holding references to the
arrays (encoder blocks, MLP layer views) observe the new values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OptimizerKind:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")


class Optimizer:
    def __init__(self, kind: OptimizerKind):
        self.kind = kind
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        k = self.kind
        self.t += 1
        if k.name == "adam":
            c1 = 1.0 - k.beta1 ** self.t
            c2 = 1.0 - k.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if k.name == "sgd":
                p -= k.lr * g
            elif k.name == "momentum":
                m = self.m.setdefault(name, np.zeros_like(p))
                m *= k.momentum
                m += g
                p -= k.lr * m
            else:
                m = self.m.setdefault(name, np.zeros_like(p))
                v = self.v.setdefault(name, np.zeros_like(p))
                m *= k.beta1
                m += (1.0 - k.beta1) * g
                v *= k.beta2
                v += (1.0 - k.beta2) * g * g
                p -= k.lr * (m / c1) / (np.sqrt(v / c2) + k.eps)
