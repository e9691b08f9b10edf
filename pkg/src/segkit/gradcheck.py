"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DTypeError, UsageError
from .tensor import Tape, Tensor


def grad_check(
    build: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    epsilon: float = 1e-5,
    wrt: Sequence[Tensor] = (),
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients against central differences.

    ``build(*inputs)`` must return a scalar loss and must be repeatable
    (re-seed any randomness inside it). Gradients are checked for every
    tensor in ``inputs`` and ``wrt``. When ``max_entries`` is set, at most
    that many coordinates per tensor are sampled (always including the
    first and last).

    Returns:
        max over checked coordinates of
        ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    targets = inputs + [t for t in wrt if all(t is not i for i in inputs)]
    for t in targets:
        if t.dtype != "f64":
            raise DTypeError(f"grad_check needs f64 tensors, got {t.dtype} for {t!r}")
    saved_flags = [t.requires_grad for t in targets]
    for t in targets:
        t.requires_grad = True
    try:
        with Tape() as tape:
            loss = build(*inputs)
        if loss.size != 1:
            raise UsageError("grad_check: graph must produce a scalar loss")
        grads = tape.backward(loss)
    finally:
        for t, f in zip(targets, saved_flags):
            t.requires_grad = f

    def loss_at() -> float:
        return build(*inputs).item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in targets:
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            pick = rng.choice(flat.size - 2, size=max_entries - 2, replace=False) + 1
            idx = np.concatenate([[0], np.sort(pick), [flat.size - 1]])
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_at()
            flat[i] = orig - epsilon
            down = loss_at()
            flat[i] = orig
            num = (up - down) / (2 * epsilon)
            a = float(aflat[i])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst
