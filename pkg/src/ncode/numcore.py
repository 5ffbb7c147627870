"""Flat parameter layouts, small dense helpers and the seeded generator.

Every trainable or controlled quantity in the package lives in a flat
float64 vector. A :class:`Layout` names the slots of such a vector so
that matrices and biases can be sliced out without copying.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from .errors import LayoutError, ParameterError, ShapeError

StateVec = np.ndarray
ControlWeights = np.ndarray


@dataclass(frozen=True)
class Layout:
    """Ordered named slots of a flat vector (row-major within each slot)."""

    slots: tuple[tuple[str, tuple[int, ...]], ...] = ()
    offsets: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        offsets = {}
        pos = 0
        for name, shape in self.slots:
            if name in offsets:
                raise LayoutError(f"duplicate slot name {name!r}")
            if any(int(s) < 0 for s in shape):
                raise LayoutError(f"negative extent in slot {name!r}: {shape}")
            n = prod(shape)
            offsets[name] = (pos, pos + n, tuple(int(s) for s in shape))
            pos += n
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "_size", pos)

    @classmethod
    def of(cls, *slots):
        return cls(tuple((name, tuple(shape)) for name, shape in slots))

    @property
    def size(self) -> int:
        return self._size

    @property
    def names(self):
        return [name for name, _ in self.slots]

    def slice(self, name) -> slice:
        start, stop, _ = self.offsets[name]
        return slice(start, stop)

    def shape(self, name):
        return self.offsets[name][2]

    def view(self, flat, name):
        """Return slot ``name`` of ``flat`` reshaped; leading batch axes kept."""
        start, stop, shape = self.offsets[name]
        return flat[..., start:stop].reshape(flat.shape[:-1] + shape)

    def concat(self, other: "Layout", prefix=""):
        return Layout(self.slots + tuple((prefix + n, s) for n, s in other.slots))


def flatten(weights, layout: Layout) -> np.ndarray:
    """Concatenate a mapping of arrays into one flat vector in layout order."""
    missing = set(layout.names) - set(weights)
    extra = set(weights) - set(layout.names)
    if missing or extra:
        raise LayoutError(f"slot mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    out = np.empty(layout.size, dtype=np.float64)
    for name, shape in layout.slots:
        arr = np.asarray(weights[name], dtype=np.float64)
        if arr.shape != tuple(shape):
            raise LayoutError(f"slot {name!r} expects shape {tuple(shape)}, got {arr.shape}")
        out[layout.slice(name)] = arr.reshape(-1)
    return out


def unflatten(flat, layout: Layout) -> dict:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (layout.size,):
        raise LayoutError(f"flat vector has shape {flat.shape}, layout needs ({layout.size},)")
    return {name: flat[layout.slice(name)].reshape(shape).copy() for name, shape in layout.slots}


def matvec(A, v) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if A.ndim != 2 or v.ndim != 1 or A.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply {A.shape} by {v.shape}")
    return A @ v


class Rng:
    """Counter-based (Philox) generator; ``split`` derives independent streams."""

    def __init__(self, seed: int = 0, *, _bitgen=None):
        if seed < 0 or seed >= 2**64:
            raise ParameterError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self._bitgen = _bitgen if _bitgen is not None else np.random.Philox(self.seed)
        self.gen = np.random.Generator(self._bitgen)

    def split(self, n: int) -> list["Rng"]:
        # jumped() advances the counter by 2**128 per jump, streams never meet
        return [Rng(self.seed, _bitgen=self._bitgen.jumped(i + 1)) for i in range(n)]

    def normal(self, size=None, mean=0.0, std=1.0):
        return self.gen.normal(mean, std, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def get_state(self) -> dict:
        st = self._bitgen.state
        inner = st["state"]
        return {
            "seed": self.seed,
            "counter": [int(c) for c in inner["counter"]],
            "key": [int(k) for k in inner["key"]],
            "buffer": [int(b) for b in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        bitgen = np.random.Philox(int(state["seed"]))
        bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }
        return cls(int(state["seed"]), _bitgen=bitgen)


def rand_normal(rng: Rng, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ParameterError(f"std must be non-negative, got {std}")
    if n < 0:
        raise ParameterError(f"n must be non-negative, got {n}")
    if std == 0:
        return np.full(n, float(mean))
    return rng.normal(n, mean, std)


def fmt17(v: float) -> str:
    return format(float(v), ".17g")
