"""Named stores of unconstrained real parameters and their gradients.

Generative-model and proposal parameters live in flat name->array stores.
Distribution constructors mark the parameters they read with `ParamRef`
so gradient passes know where each partial derivative belongs; everything
else a constructor computes (parent samples, covariates, transforms of
them) is treated as a constant.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class ParamRef:
    """A parameter value tagged with the store entry it came from."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value

    def __repr__(self):
        return f"ParamRef({self.name!r})"


def ref_value(x):
    """Unwrap a ParamRef to its array, passing plain values through."""
    return x.value if isinstance(x, ParamRef) else x


def ref_name(x):
    """Store key behind a parameter value, or None for constants."""
    return x.name if isinstance(x, ParamRef) else None


class ParamStore:
    """Ordered name -> float64 ndarray mapping of unconstrained parameters."""

    def __init__(self, values: dict | None = None):
        self._values: dict[str, np.ndarray] = {}
        if values:
            for name, v in values.items():
                self[name] = v

    def __setitem__(self, name: str, value):
        self._values[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def ref(self, name: str) -> ParamRef:
        """Read a parameter as a tagged value for use inside a constructor."""
        return ParamRef(name, self._values[name])

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._values.items()})

    def __repr__(self):
        return f"ParamStore({list(self._values)})"


def unbroadcast(arr: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `arr` down to `shape`, undoing numpy broadcasting.

    Leading extra axes are summed away; axes where `shape` is 1 are summed
    with keepdims. Raises ShapeError when the shapes are not broadcast
    compatible.
    """
    arr = np.asarray(arr, dtype=np.float64)
    extra = arr.ndim - len(shape)
    if extra < 0:
        raise ShapeError(f"cannot unbroadcast shape {arr.shape} to {shape}")
    if extra:
        arr = arr.sum(axis=tuple(range(extra)))
    reduce_axes = tuple(
        i for i, (have, want) in enumerate(zip(arr.shape, shape)) if want == 1 and have != 1
    )
    if reduce_axes:
        arr = arr.sum(axis=reduce_axes, keepdims=True)
    if arr.shape != tuple(shape):
        raise ShapeError(f"cannot unbroadcast shape {np.asarray(arr).shape} to {shape}")
    return arr


class GradientStore:
    """Accumulator of gradients aligned with a ParamStore's entries."""

    def __init__(self, params: ParamStore):
        self._shapes = {name: v.shape for name, v in params.items()}
        self._grads: dict[str, np.ndarray] = {
            name: np.zeros(shape) for name, shape in self._shapes.items()
        }

    def accumulate(self, name: str, contribution) -> None:
        """Add a contribution, summing broadcast axes down to the entry shape."""
        self._grads[name] += unbroadcast(contribution, self._shapes[name])

    def __getitem__(self, name: str) -> np.ndarray:
        return self._grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self._grads

    def names(self):
        return list(self._grads)

    def items(self):
        return self._grads.items()

    def max_abs(self) -> float:
        vals = [np.max(np.abs(g)) for g in self._grads.values() if g.size]
        return float(max(vals)) if vals else 0.0
