"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from ..exceptions import ContractError
from .tensor import Tensor


class AdamW:
    """Decoupled-weight-decay Adam over a name -> Tensor mapping.

    The decay step ``p -= lr * wd * p`` is applied before the moment
    update, so a zero gradient with nonzero decay still shrinks the
    parameter. Moment buffers match their parameter shapes and the step
    count increases by exactly 1 per :meth:`step`.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        self.params = dict(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def scale_grads(self, factor: float) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.grad *= factor

    def step(self, skip_missing: bool = False) -> None:
        """Apply one update.

        With ``skip_missing`` a parameter without a gradient is left untouched
        (its moments do not advance either); used by training loops in
        which per-center routers only receive gradients on their own
        center's batches. The default treats a missing gradient as a
        contract violation.
        """
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                if skip_missing:
                    continue
                raise ContractError(f"missing gradient for parameter '{name}'")
            g = p.grad
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape mismatch for '{name}'")
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
