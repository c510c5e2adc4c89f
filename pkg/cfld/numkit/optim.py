"""Adam optimiser over a named parameter set."""

from typing import Any, Mapping

import numpy as np

from cfld.numkit.tensor import Tensor


class Adam:
    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data, dtype=np.float32) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data, dtype=np.float32) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for parameter in self.params.values():
            parameter.grad = None

    def step(self, lr: float | None = None) -> None:
        """One bias-corrected update; parameters without a gradient are left untouched."""
        lr = self.lr if lr is None else lr
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, parameter in self.params.items():
            if parameter.grad is None:
                continue
            grad = parameter.grad.astype(np.float32)
            self.m[name] = (self.beta1 * self.m[name] + (1.0 - self.beta1) * grad).astype(np.float32)
            self.v[name] = (self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad).astype(np.float32)
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            parameter.data = (parameter.data - update).astype(parameter.dtype)

    def state_dict(self) -> dict[str, Any]:
        state: dict[str, Any] = {"t": self.t}
        for name in self.params:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Mapping[str, Any]) -> None:
        self.t = int(state["t"])
        for name in self.params:
            self.m[name] = np.asarray(state[f"m.{name}"], dtype=np.float32).copy()
            self.v[name] = np.asarray(state[f"v.{name}"], dtype=np.float32).copy()
