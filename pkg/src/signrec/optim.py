"""Adam with L2 weight decay and a cosine-annealed learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import DiffArray
from .params import flatten, tree_map


@dataclass
class AdamConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1
    min_lr: float = 0.0
    max_grad_norm: float | None = 5.0


def cosine_lr(cfg: AdamConfig, step: int) -> float:
    """Learning rate for the (0-based) ``step`` under cosine annealing to ``min_lr``."""
    t = min(step, cfg.total_steps) / max(cfg.total_steps, 1)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


@dataclass
class Adam:
    cfg: AdamConfig
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, tree, grads: dict[str, np.ndarray]):
        """Return a new parameter tree after one step; ``grads`` is keyed by parameter name.

        Gradients are clipped jointly to ``max_grad_norm`` first. Leaves absent from
        ``grads`` or not trainable are carried over unchanged.
        """
        c = self.cfg
        scale = 1.0
        if c.max_grad_norm is not None:
            norm = grad_norm(grads)
            if norm > c.max_grad_norm:
                scale = c.max_grad_norm / norm
        lr = cosine_lr(c, self.step)
        self.step += 1
        b1t = 1.0 - c.beta1 ** self.step
        b2t = 1.0 - c.beta2 ** self.step

        def upd(name: str, leaf: DiffArray) -> DiffArray:
            if not leaf.requires_grad or name not in grads:
                return leaf
            g = grads[name] * scale + c.weight_decay * leaf.data
            m = c.beta1 * self.m.get(name, 0.0) + (1.0 - c.beta1) * g
            v = c.beta2 * self.v.get(name, 0.0) + (1.0 - c.beta2) * g * g
            self.m[name], self.v[name] = m, v
            new = leaf.data - lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)
            return DiffArray(new, requires_grad=True)

        return tree_map(upd, tree)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": np.asarray(a) for k, a in self.m.items()}
        out.update({f"v/{k}": np.asarray(a) for k, a in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.step = step
        self.m = {k[2:]: np.array(a) for k, a in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(a) for k, a in arrays.items() if k.startswith("v/")}


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))


def trainable_names(tree) -> list[str]:
    return [n for n, leaf in flatten(tree).items() if leaf.requires_grad]
