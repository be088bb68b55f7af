"""First- and quasi-second-order optimizers over flat parameter vectors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalError

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class Adam:
    """Adam with bias correction. ``step`` updates ``params`` in place."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            m = self.m.get(i)
            if m is None:
                m = self.m[i] = np.zeros_like(p)
                self.v[i] = np.zeros_like(p)
            v = self.v[i]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def adam_minimize(fun: Objective, x0: np.ndarray, steps: int, lr: float,
                  betas=(0.9, 0.999)) -> tuple[np.ndarray, float, list[float]]:
    """Run ``steps`` Adam iterations; returns the best iterate seen."""
    x = np.array(x0, dtype=np.float64)
    opt = Adam(lr=lr, betas=betas)
    best_x, best_f = x.copy(), np.inf
    history = []
    for _ in range(steps):
        f, g = fun(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise NumericalError("Adam diverged: objective or gradient became non-finite")
        history.append(float(f))
        if f < best_f:
            best_f, best_x = f, x.copy()
        opt.step([x], [g])
    f, g = fun(x)
    if not np.isfinite(f):
        raise NumericalError("Adam diverged: objective became non-finite")
    history.append(float(f))
    if f < best_f:
        best_f, best_x = f, x.copy()
    return best_x, float(best_f), history


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    status: str  # "converged", "max_iter" or "line_search_failed"
    history: list[float] = field(default_factory=list)


def lbfgs_minimize(fun: Objective, x0: np.ndarray, max_iter: int = 100, history: int = 10,
                   gtol: float = 1e-6, c1: float = 1e-4, max_backtracks: int = 40) -> LbfgsResult:
    """L-BFGS with two-loop recursion and Armijo backtracking.

    Every accepted step satisfies the sufficient-decrease condition, so the
    objective sequence is monotone non-increasing.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    if not np.isfinite(f):
        raise NumericalError("L-BFGS started at a non-finite objective")
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    trace = [float(f)]
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= gtol:
            status = "converged"
            it -= 1
            break
        d = -_two_loop(g, s_hist, y_hist)
        slope = float(g @ d)
        if slope >= 0:
            # lost descent direction: restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d = -g
            slope = -gnorm * gnorm
        step = 1.0 if s_hist else min(1.0, 1.0 / gnorm)
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            status = "line_search_failed"
            log.warning("L-BFGS line search failed at iteration %d; returning best iterate", it)
            break
        s = x_new - x
        y = g_new - g
        if float(s @ y) > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > history:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        trace.append(float(f))
    return LbfgsResult(x=x, fun=float(f), grad_norm=float(np.linalg.norm(g)),
                       iterations=it, status=status, history=trace)


def _two_loop(g: np.ndarray, s_hist, y_hist) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q
