"""Adam optimizer with bias-corrected moment estimates."""

from __future__ import annotations

import numpy as np


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, in place, over parallel lists of arrays.

    ``state`` is a dict with keys "m", "v" (lists of arrays) and "t"; pass an
    empty dict on the first call and it is initialized.
    """
    if not state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Adam:
    """Adam over a module's named parameters."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}

    def step(self):
        names = list(self.params)
        tensors = [self.params[n] for n in names]
        adam_step(
            [p.data for p in tensors],
            [p.grad for p in tensors],
            self.state,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        out = {"t": np.asarray(self.state.get("t", 0))}
        for i, name in enumerate(self.params):
            if self.state:
                out[f"m.{name}"] = self.state["m"][i]
                out[f"v.{name}"] = self.state["v"][i]
        return out

    def load_state_dict(self, d):
        names = list(self.params)
        if "t" in d and int(d["t"]) > 0:
            self.state = {
                "t": int(d["t"]),
                "m": [np.asarray(d[f"m.{n}"]) for n in names],
                "v": [np.asarray(d[f"v.{n}"]) for n in names],
            }
