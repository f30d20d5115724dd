"""Shared numeric kernels: parameter tensors, tempered softmax, Adagrad, gradient checking.

All kernels operate on plain numpy arrays and never allocate hidden state, so
the same code path serves 32-bit training and 64-bit oracle evaluation; the
dtype of the arrays passed in decides which one you get.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "ParamTensor",
    "softmax_with_temperature",
    "log_softmax_with_temperature",
    "adagrad_step",
    "finite_diff_check",
]


@dataclass
class ParamTensor:
    """A trainable array bundled with its Adagrad squared-gradient accumulator.

    values and accum always share shape and dtype; the accumulator starts at
    zero and only ever grows, which is what gives Adagrad its per-coordinate
    step-size decay.
    """

    values: np.ndarray
    accum: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.accum is None:
            self.accum = np.zeros_like(self.values)
        else:
            self.accum = np.asarray(self.accum, dtype=self.values.dtype)
        if self.accum.shape != self.values.shape:
            raise ValueError(
                f"accumulator shape {self.accum.shape} does not match values shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter values must be finite")
        if np.any(self.accum < 0) or not np.all(np.isfinite(self.accum)):
            raise ValueError("accumulator entries must be finite and nonnegative")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.values.copy(), self.accum.copy())

    def astype(self, dtype) -> "ParamTensor":
        return ParamTensor(self.values.astype(dtype), self.accum.astype(dtype))


def softmax_with_temperature(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Tempered softmax along the last axis.

    Logits are divided by tau before exponentiation, and the row maximum is
    subtracted first so large scores cannot overflow.  The output rows are
    proper distributions: nonnegative, summing to 1.

    >>> softmax_with_temperature(np.array([2.0, 0.0]), 1.0).round(6).tolist()
    [0.880797, 0.119203]
    """
    z = np.asarray(logits)
    if z.size == 0:
        raise ValueError("softmax of an empty score vector is undefined")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite entries")
    if not np.isfinite(tau) or tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = z / z.dtype.type(tau) if np.issubdtype(z.dtype, np.floating) else z / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_with_temperature(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Log of softmax_with_temperature, computed without forming the softmax."""
    z = np.asarray(logits)
    if z.size == 0:
        raise ValueError("softmax of an empty score vector is undefined")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite entries")
    if not np.isfinite(tau) or tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = z / z.dtype.type(tau) if np.issubdtype(z.dtype, np.floating) else z / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def adagrad_step(
    param: ParamTensor,
    grad: np.ndarray,
    lr: float = 0.1,
    eps: float = 1e-8,
    rows: np.ndarray | None = None,
) -> ParamTensor:
    """One in-place Adagrad update.

    accum += grad**2; values -= lr * grad / (sqrt(accum) + eps).

    With rows given, grad holds one row per entry of rows and only those rows
    of the parameter are touched; all other rows keep their values and
    accumulators bit for bit.  Returns the mutated param for chaining.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if eps < 0:
        raise ValueError(f"epsilon must be nonnegative, got {eps}")
    g = np.asarray(grad, dtype=param.values.dtype)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite entries")
    if rows is None:
        if g.shape != param.values.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {param.shape}")
        param.accum += g * g
        if eps == 0:
            # 0/0 protection: zero-gradient coordinates stay untouched
            step = np.divide(lr * g, np.sqrt(param.accum), out=np.zeros_like(g), where=g != 0)
            param.values -= step
        else:
            param.values -= lr * g / (np.sqrt(param.accum) + eps)
    else:
        rows = np.asarray(rows, dtype=np.int64)
        if g.shape != (len(rows),) + param.values.shape[1:]:
            raise ValueError("row gradient shape does not match the selected rows")
        acc = param.accum[rows] + g * g
        param.accum[rows] = acc
        if eps == 0:
            param.values[rows] -= np.divide(lr * g, np.sqrt(acc), out=np.zeros_like(g), where=g != 0)
        else:
            param.values[rows] -= lr * g / (np.sqrt(acc) + eps)
    return param


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray] | np.ndarray,
    analytic_grad: Mapping[str, np.ndarray] | np.ndarray,
    h: float = 1e-5,
    max_coords_per_array: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    loss_fn must recompute the loss from the arrays in params on every call;
    this function perturbs coordinates of those arrays in place, evaluates the
    loss at +h and -h, restores the coordinate, and compares
    (f(x+h) - f(x-h)) / 2h to the matching analytic entry.  Arrays larger than
    max_coords_per_array are subsampled with rng.  Returns the maximum
    relative error over all checked coordinates, with the denominator
    max(|analytic|, |numeric|, 1e-8).

    Pass float64 arrays; the comparison is meaningless at float32 precision.
    """
    if isinstance(params, np.ndarray):
        params = {"param": params}
        analytic_grad = {"param": analytic_grad}  # type: ignore[dict-item]
    if set(params) != set(analytic_grad):
        raise ValueError("params and analytic_grad must hold the same keys")
    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for name, arr in params.items():
        ana = np.asarray(analytic_grad[name])
        if ana.shape != arr.shape:
            raise ValueError(f"analytic gradient for {name!r} has shape {ana.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        n = flat.size
        if n <= max_coords_per_array:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_array, replace=False)
        ana_flat = ana.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = float(loss_fn())
            flat[c] = orig - h
            f_minus = float(loss_fn())
            flat[c] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError(f"loss is non-finite while perturbing {name!r}[{c}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(float(ana_flat[c])), abs(numeric), 1e-8)
            rel = abs(float(ana_flat[c]) - numeric) / denom
            if rel > worst:
                worst = rel
    return worst
