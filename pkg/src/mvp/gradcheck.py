"""Central finite-difference oracle for tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_record


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, indices: Sequence[int],
                   step: float = 1e-5) -> np.ndarray:
    """d fn / d param.flat[i] by central differences, evaluated without a tape.

    ``fn`` closes over ``param`` and is re-evaluated after in-place edits of
    ``param.data``.
    """
    flat = param.data.reshape(-1)
    out = np.empty(len(indices))
    with no_record():
        for j, i in enumerate(indices):
            old = flat[i]
            flat[i] = old + step
            fp = float(fn().data)
            flat[i] = old - step
            fm = float(fn().data)
            flat[i] = old
            out[j] = (fp - fm) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|); entries where both magnitudes sit below ``floor``
    are compared absolutely against the floor instead."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], n_samples: int | None = None,
                    seed: int = 0, step: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between tape gradients and central differences.

    With ``n_samples`` set, that many (param, index) pairs are drawn uniformly
    over all scalar entries; otherwise every entry is checked.
    """
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss)
    pairs: list[tuple[int, int]] = [(k, i) for k, p in enumerate(params) for i in range(p.size)]
    if n_samples is not None and n_samples < len(pairs):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(pairs), size=n_samples, replace=False)
        pairs = [pairs[i] for i in sorted(pick)]
    worst = 0.0
    for k, p in enumerate(params):
        idx = [i for kk, i in pairs if kk == k]
        if not idx:
            continue
        g = grads.get(p)
        a = np.zeros(len(idx)) if g is None else g.reshape(-1)[idx]
        n = numerical_grad(fn, p, idx, step)
        worst = max(worst, float(relative_error(a, n, floor).max()))
    return worst
