"""Adam ascent with best-seen tracking and central finite differences."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DecondError, NonFiniteObjective

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
FD_STEP = 1e-4


@dataclass
class Adam:
    """Adam moments for an ascent direction."""

    dim: int
    learning_rate: float = 0.05
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.dim)
        if self.v is None:
            self.v = np.zeros(self.dim)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = BETA1 * self.m + (1 - BETA1) * grad
        self.v = BETA2 * self.v + (1 - BETA2) * grad**2
        mhat = self.m / (1 - BETA1**self.t)
        vhat = self.v / (1 - BETA2**self.t)
        return theta + self.learning_rate * mhat / (np.sqrt(vhat) + ADAM_EPS)


def safe_eval(f: Callable[[np.ndarray], float], theta: np.ndarray) -> float:
    """``f(theta)``, mapping numerical failures to ``-inf``."""
    try:
        val = float(f(theta))
    except (DecondError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.debug("objective failed at %s: %s", theta, exc)
        return -np.inf
    return val if np.isfinite(val) else -np.inf


def fd_gradient(
    f: Callable[[np.ndarray], float],
    theta: Sequence[float],
    step: float = FD_STEP,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central finite-difference gradient over ``indices`` (all by default).

    Coordinates outside ``indices`` get a zero entry. Raises
    :class:`NonFiniteObjective` if any evaluation is not finite.
    """
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    idx = range(theta.size) if indices is None else indices
    for i in idx:
        e = np.zeros_like(theta)
        e[i] = step
        fp = safe_eval(f, theta + e)
        fm = safe_eval(f, theta - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteObjective(f"objective not finite around coordinate {i}")
        g[i] = (fp - fm) / (2.0 * step)
    return g


@dataclass
class AscentResult:
    theta: np.ndarray
    value: float
    history: list = field(default_factory=list)  # (step, value at iterate)
    aborted: bool = False
    optimizer: Adam | None = None


def adam_ascent(
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta0: Sequence[float],
    steps: int,
    learning_rate: float,
    optimizer: Adam | None = None,
    value_fn: Callable[[np.ndarray], float] | None = None,
    on_step: Callable[[int, np.ndarray, float], None] | None = None,
) -> AscentResult:
    """Maximise with Adam, returning the best iterate seen.

    ``value_and_grad`` may raise :class:`NonFiniteObjective` (or any package
    error); training then stops and the best finite iterate is returned.
    A non-finite objective at ``theta0`` is an error. When ``value_fn`` is
    given the iterate after the last step is also scored.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    theta = np.asarray(theta0, dtype=float).copy()
    opt = optimizer or Adam(theta.size, learning_rate)
    best_theta, best_val = theta.copy(), -np.inf
    history: list = []
    aborted = False
    for s in range(steps):
        try:
            val, grad = value_and_grad(theta)
            ok = np.isfinite(val) and np.all(np.isfinite(grad))
        except (DecondError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("objective failed at step %d: %s", s, exc)
            ok = False
        if not ok:
            if s == 0:
                raise NonFiniteObjective("objective is not finite at the initial parameters")
            log.warning("non-finite objective at step %d; keeping the best state", s)
            aborted = True
            break
        history.append((s, float(val)))
        if on_step is not None:
            on_step(s, theta, float(val))
        if val > best_val:
            best_theta, best_val = theta.copy(), float(val)
        theta = opt.step(theta, grad)
    if not aborted and value_fn is not None and (steps > 0 or not history):
        val = safe_eval(value_fn, theta)
        if steps > 0:
            history.append((steps, val))
            if on_step is not None and np.isfinite(val):
                on_step(steps, theta, val)
        if val > best_val:
            best_theta, best_val = theta.copy(), val
    return AscentResult(best_theta, best_val, history, aborted, opt)
