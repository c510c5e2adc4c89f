"""
Variance schedule, forward noising, cubic timestep draws and deterministic DDIM steps.

Tables are indexed by the step number t = 0..T; index 0 is the clean signal, so
alpha_bars[0] == 1 and the final DDIM step (t_prev = 0) returns the predicted z0.
All functions work on plain numpy arrays and keep the dtype of their latent inputs.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from cfld.common.errors import PlanError, ScheduleError, SingularityError
from cfld.numkit.rng import Rng

EpsFn = Callable[[np.ndarray, int], np.ndarray]
StepHook = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class VarianceSchedule:
    betas: np.ndarray  # [T + 1], betas[0] = 0
    alphas: np.ndarray  # [T + 1]
    alpha_bars: np.ndarray  # [T + 1], alpha_bars[0] = 1

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "VarianceSchedule":
        if T < 1:
            raise ScheduleError(f"Schedule needs T >= 1, got {T}")
        if not 0 < beta_start <= beta_end < 1 or (T > 1 and beta_start == beta_end):
            raise ScheduleError(f"Need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
        betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))

    @classmethod
    def from_alpha_bars(cls, values: Sequence[float]) -> "VarianceSchedule":
        """Schedule with the given alpha_bar_1..alpha_bar_T; used to pin exact endpoints."""
        alpha_bars = np.concatenate([[1.0], np.asarray(values, dtype=np.float64)])
        alphas = np.ones_like(alpha_bars)
        nonzero = alpha_bars[:-1] > 0
        alphas[1:][nonzero] = alpha_bars[1:][nonzero] / alpha_bars[:-1][nonzero]
        alphas[1:][~nonzero] = 0.0
        return cls(betas=1.0 - alphas, alphas=alphas, alpha_bars=alpha_bars)

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ScheduleError(f"Timestep {t.tolist()} outside [0, {self.T}]")
        return self.alpha_bars[t]


def _coefficient(values: np.ndarray, like: np.ndarray) -> np.ndarray | float:
    """Per-item coefficient broadcast over the trailing dims of `like`, in its dtype."""
    if np.ndim(values) == 0:
        return float(values)
    return np.asarray(values, dtype=like.dtype).reshape((-1,) + (1,) * (like.ndim - 1))


def _check_step(t, sched: VarianceSchedule) -> None:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ScheduleError(f"Timestep {t.tolist()} outside [1, {sched.T}]")


def q_sample(z0: np.ndarray, t, eps: np.ndarray, sched: VarianceSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; `t` is a step or one step per batch item."""
    _check_step(t, sched)
    if eps.shape != z0.shape:
        raise ScheduleError(f"Noise shape {eps.shape} does not match latent shape {z0.shape}")
    abar = sched.alpha_bars[np.asarray(t)]
    return _coefficient(np.sqrt(abar), z0) * z0 + _coefficient(np.sqrt(1.0 - abar), z0) * eps


def noised_reference(z0: np.ndarray, t: int, eps: np.ndarray, sched: VarianceSchedule) -> np.ndarray:
    """Like q_sample but defined at t = 0, where it returns z0."""
    abar = sched.alpha_bar(t)
    return float(np.sqrt(abar)) * z0 + float(np.sqrt(1.0 - abar)) * eps


def sample_timestep_cubic(rng: Rng, T: int, size: int | None = None):
    """t = clamp(round((1 - u^3) T), 1, T) for u ~ U[0, 1); skews towards large (noisy) t."""
    if T < 1:
        raise ScheduleError(f"Cubic sampler needs T >= 1, got {T}")
    u = np.asarray(rng.uniform(size))
    return cubic_map(u, T) if size is not None else int(cubic_map(u, T))


def cubic_map(u: np.ndarray, T: int) -> np.ndarray:
    return np.clip(np.rint((1.0 - u**3) * T), 1, T).astype(np.int64)


def cubic_cdf(tau: np.ndarray, T: int) -> np.ndarray:
    """Continuous law of the map: P(t <= tau) = 1 - (1 - tau / T)^(1/3)."""
    return 1.0 - np.cbrt(np.clip(1.0 - np.asarray(tau, dtype=np.float64) / T, 0.0, 1.0))


def predict_z0(zt: np.ndarray, eps_hat: np.ndarray, t, sched: VarianceSchedule) -> np.ndarray:
    abar = sched.alpha_bar(t)
    if np.any(abar <= 0):
        raise SingularityError(f"alpha_bar is 0 at t={np.asarray(t).tolist()}; z0 is not recoverable")
    return (zt - _coefficient(np.sqrt(1.0 - abar), zt) * eps_hat) / _coefficient(np.sqrt(abar), zt)


def ddim_step(zt: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: VarianceSchedule) -> np.ndarray:
    """Deterministic DDIM update from t to t_prev (< t)."""
    if not t > t_prev >= 0:
        raise PlanError(f"DDIM step must descend: t={t}, t_prev={t_prev}")
    z0_hat = predict_z0(zt, eps_hat, t, sched)
    if t_prev == 0:
        return z0_hat
    abar_prev = sched.alpha_bar(t_prev)
    return float(np.sqrt(abar_prev)) * z0_hat + float(np.sqrt(1.0 - abar_prev)) * eps_hat


@dataclass(frozen=True)
class DdimPlan:
    indices: tuple[int, ...]

    def __post_init__(self):
        if not self.indices:
            raise PlanError("DDIM plan is empty")
        if any(a <= b for a, b in zip(self.indices, self.indices[1:])):
            raise PlanError(f"DDIM plan indices must strictly decrease: {self.indices}")
        if self.indices[-1] < 1:
            raise PlanError(f"DDIM plan must end at a step >= 1, got {self.indices[-1]}")

    @classmethod
    def even(cls, T: int, steps: int = 50) -> "DdimPlan":
        """`steps` evenly spaced indices from T down to 1."""
        if not 1 <= steps <= T:
            raise PlanError(f"DDIM plan needs 1 <= steps <= T={T}, got {steps}")
        if steps == 1:
            return cls((T,))
        return cls(tuple(int(i) for i in np.rint(np.linspace(T, 1, steps))))

    def pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) per step, ending at t_prev = 0."""
        return list(zip(self.indices, self.indices[1:] + (0,)))

    def __len__(self) -> int:
        return len(self.indices)


def ddim_sample_loop(
    z_T: np.ndarray,
    eps_fn: EpsFn,
    plan: DdimPlan,
    sched: VarianceSchedule,
    on_step: StepHook | None = None,
) -> np.ndarray:
    """Fold ddim_step over the plan. `on_step(z, t_prev)` may rewrite each intermediate latent."""
    if plan.indices[0] > sched.T:
        raise PlanError(f"Plan starts at {plan.indices[0]} beyond T={sched.T}")
    z = z_T
    for t, t_prev in plan.pairs():
        z = ddim_step(z, eps_fn(z, t), t, t_prev, sched)
        if on_step is not None:
            z = on_step(z, t_prev)
    return z
