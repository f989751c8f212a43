"""Batch-composition schedules, SGD, and EMA shadow weights, shared by the
transfer model and the toy detectors."""

from __future__ import annotations

import numpy as np

from .numerics import Tensor

FIFTY_FIFTY = "fifty_fifty"
MIXED = "mixed"
FINE_TUNE = "fine_tune"

STRATEGIES = (FIFTY_FIFTY, MIXED, FINE_TUNE)


class NumericalDivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message: str, loss_history: list[float]):
        super().__init__(message)
        self.loss_history = loss_history


def choose_domain(
    strategy: str,
    domains: list[str],
    target: str | None,
    iteration: int,
    total_iterations: int,
    batch_size: int,
    slot: int,
    fine_tune_fraction: float,
    rng: np.random.Generator,
) -> str:
    """Pick the dataset a batch slot samples from.

    fifty_fifty spreads slots over domains as evenly as the batch size
    allows, rotating the remainder; mixed samples uniformly; fine_tune
    runs mixed for the first (1 - fraction) of training, then draws only
    from the non-target (source) domains.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if len(domains) == 1:
        return domains[0]
    if strategy == FIFTY_FIFTY:
        return domains[(iteration + slot) % len(domains)]
    if strategy == FINE_TUNE:
        if iteration >= int(round((1.0 - fine_tune_fraction) * total_iterations)):
            sources = [d for d in domains if d != target]
            if sources:
                return sources[rng.integers(len(sources))]
        return domains[rng.integers(len(domains))]
    return domains[rng.integers(len(domains))]


def sgd_step(params: dict[str, Tensor], learning_rate: float) -> None:
    """Plain gradient descent; leaves gradients cleared."""
    for p in params.values():
        if p.grad is not None:
            p.value -= learning_rate * p.grad
            p.grad = None


class EmaState:
    """Exponential moving average of parameter values.

    shadow <- decay * shadow + (1 - decay) * live after every step, so
    decay 0 tracks the live weights and decay 1 freezes initialization.
    """

    def __init__(self, params: dict[str, Tensor], decay: float):
        if not (0.0 <= decay <= 1.0):
            raise ValueError(f"ema decay {decay} outside [0, 1]")
        self.decay = decay
        self.shadow = {k: p.value.copy() for k, p in params.items()}

    def update(self, params: dict[str, Tensor]) -> None:
        for k, p in params.items():
            self.shadow[k] = self.decay * self.shadow[k] + (1.0 - self.decay) * p.value

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.shadow.items()}
