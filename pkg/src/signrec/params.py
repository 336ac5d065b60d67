"""Parameter trees: nested dataclasses/lists whose leaves are DiffArrays."""
from __future__ import annotations

import dataclasses
import zlib
from typing import Callable

import numpy as np

from .engine import DiffArray


def derive_rng(seed: int, *names: str) -> np.random.Generator:
    """Independent generator for a named component under one root seed."""
    keys = [zlib.crc32(n.encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + keys))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> DiffArray:
    bound = 1.0 / np.sqrt(fan_in)
    return DiffArray(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(*shape: int) -> DiffArray:
    return DiffArray(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> DiffArray:
    return DiffArray(np.ones(shape), requires_grad=True)


def flatten(tree, prefix: str = "") -> dict[str, DiffArray]:
    """Dotted-name view of every DiffArray leaf, in field order."""
    out: dict[str, DiffArray] = {}
    _walk(tree, prefix, out)
    return out


def _walk(node, name, out):
    if isinstance(node, DiffArray):
        out[name] = node
    elif dataclasses.is_dataclass(node):
        for f in dataclasses.fields(node):
            _walk(getattr(node, f.name), f"{name}.{f.name}" if name else f.name, out)
    elif isinstance(node, (list, tuple)):
        for i, child in enumerate(node):
            _walk(child, f"{name}.{i}" if name else str(i), out)
    elif node is None or isinstance(node, (int, float, str, bool)):
        pass
    else:
        raise TypeError(f"unsupported node in parameter tree at {name!r}: {type(node).__name__}")


def tree_map(fn: Callable[[str, DiffArray], DiffArray], tree, prefix: str = ""):
    """Rebuild ``tree`` with each leaf replaced by ``fn(name, leaf)``."""
    if isinstance(tree, DiffArray):
        return fn(prefix, tree)
    if dataclasses.is_dataclass(tree):
        changes = {}
        for f in dataclasses.fields(tree):
            child = getattr(tree, f.name)
            changes[f.name] = tree_map(fn, child, f"{prefix}.{f.name}" if prefix else f.name)
        return dataclasses.replace(tree, **changes)
    if isinstance(tree, list):
        return [tree_map(fn, c, f"{prefix}.{i}" if prefix else str(i)) for i, c in enumerate(tree)]
    if isinstance(tree, tuple):
        return tuple(tree_map(fn, c, f"{prefix}.{i}" if prefix else str(i)) for i, c in enumerate(tree))
    return tree


def with_arrays(tree, arrays: dict[str, np.ndarray], prefix: str = ""):
    """Fresh trainable leaves holding ``arrays[name]`` wherever a name is present."""
    def swap(name, leaf):
        if name in arrays:
            new = np.asarray(arrays[name], dtype=np.float64)
            if new.shape != leaf.shape:
                raise ValueError(f"{name}: shape {new.shape} != expected {leaf.shape}")
            return DiffArray(new, requires_grad=leaf.requires_grad)
        return leaf
    return tree_map(swap, tree, prefix)


def param_count(tree) -> int:
    return int(np.sum([leaf.size for leaf in flatten(tree).values()]))


def collect_grads(tree, grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Map tape gradients (keyed by node id) back to parameter names; zeros if absent."""
    return {name: grads.get(leaf.node_id, np.zeros(leaf.shape)) for name, leaf in flatten(tree).items()}
