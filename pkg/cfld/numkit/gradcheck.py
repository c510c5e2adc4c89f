"""
Finite-difference gradient oracle.

Compares the tape's analytic gradients with central differences
(f(x + h) - f(x - h)) / 2h, element by element, in 64-bit check mode.
"""

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from cfld.common.errors import ContractError, OracleError
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import Tensor, backward, check_mode, no_grad


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-3

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def failures(self) -> dict[str, float]:
        return {name: err for name, err in self.errors.items() if err > self.tol}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Check d f / d p for every tensor in `params`.

    `f` takes no arguments and reads the parameters by closure; it must rebuild its graph on
    every call. With `max_elements`, a random subset of each tensor's entries is probed.
    Returns a report with one relative error per parameter name.

    Raises:
        OracleError: if f returns a different value when re-evaluated at the same point.
        ContractError: if f does not return a scalar.
    """
    originals = {name: (tensor.data, tensor.requires_grad, tensor.grad) for name, tensor in params.items()}
    report = GradCheckReport(tol=tol)
    rng = Rng(seed)
    try:
        with check_mode():
            for tensor in params.values():
                tensor.data = np.array(tensor.data, dtype=np.float64)
                tensor.requires_grad = True
                tensor.grad = None

            loss = f()
            if loss.size != 1:
                raise ContractError(f"finite_diff_check: f must return a scalar, got {loss.shape}")
            value = loss.item()
            backward(loss)
            with no_grad():
                again = f().item()
            if again != value:
                raise OracleError(f"finite_diff_check: f is not deterministic ({value!r} != {again!r})")

            for name, tensor in params.items():
                analytic_full = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
                flat = tensor.data.reshape(-1)
                indices = np.arange(flat.size)
                if max_elements is not None and flat.size > max_elements:
                    indices = np.sort(rng.permutation(flat.size)[:max_elements])
                numeric = np.empty(indices.size, dtype=np.float64)
                with no_grad():
                    for slot, index in enumerate(indices):
                        saved = flat[index]
                        flat[index] = saved + h
                        plus = f().item()
                        flat[index] = saved - h
                        minus = f().item()
                        flat[index] = saved
                        numeric[slot] = (plus - minus) / (2.0 * h)
                report.errors[name] = relative_error(analytic_full.reshape(-1)[indices], numeric)
    finally:
        for name, tensor in params.items():
            tensor.data, tensor.requires_grad, tensor.grad = originals[name]
    return report
