"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, UnreliableCheckError
from .tensor import Tape, Tensor, no_grad

EPS_RANGE = (1e-7, 1e-3)


def _scalar(value) -> float:
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if data.size != 1:
        raise ContractError(f"gradient check needs a scalar-valued function, got shape {data.shape}")
    return float(data.reshape(-1)[0])


def _check_eps(eps):
    lo, hi = EPS_RANGE
    if not lo <= eps <= hi:
        raise ContractError(f"eps={eps} outside [{lo}, {hi}]")


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a tensor to a scalar tensor. It is evaluated twice at ``x``
    first; differing results raise :class:`UnreliableCheckError`.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    leaf = Tensor(x.data, requires_grad=True)
    return grad_check_tensors(lambda: f(leaf), [leaf], eps)


def grad_check_tensors(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Gradient check of a closure ``f()`` with respect to several leaf tensors.

    The tensors are perturbed in place. With ``max_coords`` set, at most that
    many coordinates per tensor are probed, chosen by ``rng``.
    """
    _check_eps(eps)
    with no_grad():
        base = _scalar(f())
        if _scalar(f()) != base:
            raise UnreliableCheckError("function returned different values for identical inputs")

    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    for t, flag in zip(tensors, saved):
        t.grad = None
        t.requires_grad = flag

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t, grad in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = _scalar(f())
                flat[i] = orig - eps
                down = _scalar(f())
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                a = grad.reshape(-1)[i]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
