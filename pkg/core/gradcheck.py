"""
Finite-difference validation of the reverse-mode gradients.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from core import autodiff as ad
from core.autodiff import Tape, Tensor, backward, constant
from core.parameters import ParameterStore
from utils.errors import UsageError

DENOMINATOR_FLOOR = 1e-8


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)

    def to_dict(self) -> Dict[str, object]:
        return {"name": self.name, "max_error": self.max_error, "tolerance": self.tolerance, "passed": self.passed}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOMINATOR_FLOOR) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + floor)))


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise UsageError(f"gradient check needs a scalar function, got shape {out.shape}")
    return out.item()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between the tape gradient of f at x and central differences"""
    if h <= 0:
        raise UsageError(f"step size must be positive, got {h}")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
    _scalar(out)
    backward(out, tape)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = _scalar(f(x))
        flat[i] = original - h
        minus = _scalar(f(x))
        flat[i] = original
        num_flat[i] = (plus - minus) / (2.0 * h)
    return relative_error(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params: ParameterStore, h: float = 1e-4,
                      max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                      floor: float = DENOMINATOR_FLOOR) -> Dict[str, float]:
    """
    Per-parameter max relative error for a closure that builds a scalar loss from `params`.

    With `max_coords` only that many coordinates of each tensor are probed. A larger `floor` keeps
    coordinates whose true gradient is nearly zero from being judged on truncation error alone.
    """
    if h <= 0:
        raise UsageError(f"step size must be positive, got {h}")
    rng = rng or np.random.default_rng(0)
    params.zero_grads()
    with Tape() as tape:
        out = loss_fn()
    _scalar(out)
    backward(out, tape, params)

    errors = {}
    for p in params:
        flat = p.tensor.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        analytic = p.tensor.grad.reshape(-1)[coords]
        numeric = np.zeros(coords.size)
        for k, i in enumerate(coords):
            original = flat[i]
            flat[i] = original + h
            plus = _scalar(loss_fn())
            flat[i] = original - h
            minus = _scalar(loss_fn())
            flat[i] = original
            numeric[k] = (plus - minus) / (2.0 * h)
        errors[p.name] = relative_error(analytic, numeric, floor)
    params.zero_grads()
    return errors


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    values = rng.uniform(margin, 1.5, size=shape)
    return values * rng.choice([-1.0, 1.0], size=shape)


def _off_boundary(rng: np.random.Generator, shape, bound: float, margin: float = 0.05) -> np.ndarray:
    """Values whose magnitude stays at least `margin` away from `bound`"""
    inside = rng.uniform(margin, bound - margin, size=shape)
    outside = rng.uniform(bound + margin, 3 * bound, size=shape)
    magnitude = np.where(rng.random(size=shape) < 0.5, inside, outside)
    return magnitude * rng.choice([-1.0, 1.0], size=shape)


def _primitive_cases(rng: np.random.Generator):
    """(name, function of the checked operand, operand value) for one random instance"""
    n, d, k = (int(v) for v in rng.integers(1, 4, size=3))
    w_out = constant(rng.normal(size=(n, k)))
    w_in = constant(rng.normal(size=(n, d)))
    x = rng.normal(size=(n, d))
    W = rng.normal(size=(d, k))
    b = rng.normal(size=(k,))
    other = rng.normal(size=(n, d))
    row = rng.normal(size=(1, d))
    w_concat = constant(rng.normal(size=(n, 2 * d)))
    w_rows = constant(rng.normal(size=(n, 1)))
    w_cols = constant(rng.normal(size=(d,)))

    def weighted(t: Tensor, weights: Tensor = w_in) -> Tensor:
        return ad.sum(ad.mul(t, weights))

    return [
        ("linear[x]", lambda t: weighted(ad.linear(t, constant(W), constant(b)), w_out), x),
        ("linear[W]", lambda t: weighted(ad.linear(constant(x), t, constant(b)), w_out), W),
        ("linear[b]", lambda t: weighted(ad.linear(constant(x), constant(W), t), w_out), b),
        ("add", lambda t: weighted(ad.add(t, constant(row))), other),
        ("add[broadcast]", lambda t: weighted(ad.add(constant(other), t)), row),
        ("mul", lambda t: weighted(ad.mul(t, constant(other))), x),
        ("mul[broadcast]", lambda t: weighted(ad.mul(constant(other), t)), row),
        ("matmul", lambda t: weighted(ad.matmul(t, constant(W)), w_out), x),
        ("sigmoid", lambda t: weighted(ad.sigmoid(t)), x),
        ("tanh", lambda t: weighted(ad.tanh(t)), x),
        ("relu", lambda t: weighted(ad.relu(t)), _away_from_zero(rng, (n, d))),
        ("exp", lambda t: weighted(ad.exp(t)), x),
        ("log", lambda t: weighted(ad.log(t)), rng.uniform(0.5, 2.0, size=(n, d))),
        ("clip", lambda t: weighted(ad.clip(t, -0.5, 0.5)), _off_boundary(rng, (n, d), 0.5)),
        ("softmax", lambda t: weighted(ad.softmax(t, axes=(1,))), x),
        ("softmax[joint]", lambda t: weighted(ad.softmax(t, axes=(0, 1))), x),
        ("concat", lambda t: ad.sum(ad.mul(ad.concat([t, constant(other)], axis=1),
                                           w_concat)), x),
        ("transpose", lambda t: ad.sum(ad.mul(ad.transpose(t), constant(w_in.data.T))), x),
        ("reshape", lambda t: weighted(ad.reshape(ad.reshape(t, (-1,)), (n, d))), x),
        ("sum", lambda t: ad.sum(ad.mul(ad.sum(t, axes=1, keepdims=True), w_rows)), x),
        ("mean", lambda t: ad.sum(ad.mul(ad.mean(t, axes=0), w_cols)), x),
    ]


def check_primitives(instances: int = 100, h: float = 1e-4, tolerance: float = 1e-3,
                     seed: int = 0) -> List[CheckResult]:
    """Worst relative error of every primitive over `instances` random draws"""
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for _ in range(instances):
        for name, f, value in _primitive_cases(rng):
            err = grad_check(f, Tensor(value), h)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(name, err, tolerance) for name, err in worst.items()]
