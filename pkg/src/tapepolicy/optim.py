"""Adam and Levenberg-Marquardt drivers fed by tape adjoints.

The Adam driver maximizes the kernel objective J by minimizing -J; every
reported J keeps the kernel's sign. Gradients come only from reverse replays.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tape as tp
from .kernel import DomainKernel


class NonFiniteObjectiveError(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"objective became non-finite ({value}) at iteration {iteration}; penalty blowup?")
        self.iteration = iteration
        self.value = value


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step. ``state`` is updated in place."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


@dataclass
class IterRecord:
    iter: int
    J: float
    grad_norm: float
    wall_ms: float


@dataclass
class TrainRun:
    records: list[IterRecord] = field(default_factory=list)
    params: np.ndarray | None = None
    seed: int = 0
    config: dict = field(default_factory=dict)
    exit_reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def final_J(self) -> float:
        return self.records[-1].J if self.records else float("nan")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path: str | Path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["iter", "J", "grad_norm", "wall_ms"])
            for r in self.records:
                w.writerow([r.iter, repr(r.J), repr(r.grad_norm), f"{r.wall_ms:.3f}"])


def train_adam(
    kernel: DomainKernel,
    init: np.ndarray,
    iterations: int,
    lr: float = 0.005,
    seed: int = 0,
    randoms_fn: Callable[[int], np.ndarray] | None = None,
    inputs: np.ndarray | None = None,
    maximize: bool = True,
    clip: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainRun:
    """Run ``iterations`` forward+reverse replays with an Adam update after each.

    ``randoms_fn(it)`` supplies fresh random slots per iteration (e.g. new
    initial states); by default the kernel's recorded training draws are used.
    Record ``i`` holds J at the parameters *before* update ``i``.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    theta = np.array(init, dtype=float)
    run = TrainRun(seed=seed, config={"iterations": iterations, "lr": lr, "kernel": kernel.name})
    if iterations == 0:
        run.params = theta
        run.exit_reason = "no_iterations"
        return run
    state = AdamState.zeros(len(theta), lr=lr)
    ws = kernel.workspace()
    sign = -1.0 if maximize else 1.0
    t0 = time.perf_counter()
    for it in range(iterations):
        rnd = randoms_fn(it) if randoms_fn is not None else None
        J, res = kernel.value_and_grad(theta, inputs=inputs, randoms=rnd, ws=ws)
        if not np.isfinite(J):
            raise NonFiniteObjectiveError(it, J)
        g = res.param_grads
        gn = float(np.linalg.norm(g))
        run.records.append(IterRecord(it, J, gn, (time.perf_counter() - t0) * 1e3))
        theta, state = adam_step(theta, sign * g, state)
        if clip is not None:
            np.clip(theta, clip[0], clip[1], out=theta)
    run.params = theta
    run.exit_reason = "max_iterations"
    return run


@dataclass
class LmState:
    damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 3.0
    damping_ceiling: float = 1e8
    grad_tol: float = 1e-8

    def __post_init__(self):
        if not self.damping > 0:
            raise ValueError("damping must be positive")


class DampingCeilingError(RuntimeError):
    pass


def _solve_damped(jac: np.ndarray, r: np.ndarray, damping: float) -> np.ndarray:
    jtj = jac.T @ jac
    d = np.diag(jtj).copy()
    # parameters with no influence get a unit scale so the system stays solvable
    d[d <= 1e-300] = 1.0
    return np.linalg.solve(jtj + damping * np.diag(d), -(jac.T @ r))


def lm_step(
    params: np.ndarray,
    residuals: np.ndarray,
    jacobian: np.ndarray,
    state: LmState,
    residual_fn: Callable[[np.ndarray], np.ndarray],
) -> tuple[np.ndarray, LmState, bool, np.ndarray]:
    """Try one damped Gauss-Newton step.

    Solves ``(J^T J + damping * diag(J^T J)) delta = -J^T r``. The step is
    accepted iff the residual norm decreases; accepted steps divide the damping
    by ``damping_down``, rejected ones multiply it by ``damping_up``.
    Returns ``(params, state, accepted, residuals)``.
    """
    params = np.asarray(params, dtype=float)
    r = np.asarray(residuals, dtype=float)
    jac = np.asarray(jacobian, dtype=float)
    if jac.shape != (len(r), len(params)):
        raise ValueError(f"jacobian shape {jac.shape} does not match ({len(r)}, {len(params)})")
    while True:
        try:
            delta = _solve_damped(jac, r, state.damping)
            break
        except np.linalg.LinAlgError:
            state.damping *= state.damping_up
            if state.damping > state.damping_ceiling:
                raise DampingCeilingError("normal equations stayed singular up to the damping ceiling")
    if not np.any(delta):
        return params, state, True, r
    trial = params + delta
    r_new = np.asarray(residual_fn(trial), dtype=float)
    if np.all(np.isfinite(r_new)) and r_new @ r_new < r @ r:
        state.damping = max(state.damping / state.damping_down, 1e-300)
        return trial, state, True, r_new
    state.damping *= state.damping_up
    return params, state, False, r


def train_lm(
    kernel: DomainKernel,
    init: np.ndarray,
    rows: list[int],
    max_iterations: int = 200,
    state: LmState | None = None,
    stall_tol: float = 1e-10,
    stall_patience: int = 3,
    seed: int = 0,
) -> TrainRun:
    """Levenberg-Marquardt on the kernel outputs listed in ``rows`` (residuals).

    Each iteration: one forward replay plus one reverse per residual to build
    the Jacobian, then damped steps until one is accepted. The J column holds
    the least-squares loss sum(r**2). Exits: ``grad_tol``, ``stall``,
    ``damping_ceiling``, ``max_iterations``.
    """
    state = state or LmState()
    theta = np.array(init, dtype=float)
    run = TrainRun(seed=seed, config={"max_iterations": max_iterations, "kernel": kernel.name, "lm": vars(state).copy()})
    ws = kernel.workspace()
    rows = list(rows)
    fwd_ws = kernel.workspace()

    def residual_fn(p):
        return kernel.evaluate(p, ws=fwd_ws)[rows]

    t0 = time.perf_counter()
    stalls = 0
    run.exit_reason = "max_iterations"
    for it in range(max_iterations):
        out, _, jac = tp.jacobian(kernel.tape, kernel.inputs, theta, kernel.randoms, rows, ws)
        r = out[rows]
        loss = float(r @ r)
        grad = jac.T @ r
        gn = float(np.linalg.norm(grad))
        run.records.append(IterRecord(it, loss, gn, (time.perf_counter() - t0) * 1e3))
        if not np.isfinite(loss):
            raise NonFiniteObjectiveError(it, loss)
        if gn < state.grad_tol:
            run.exit_reason = "grad_tol"
            break
        accepted = False
        while not accepted:
            theta, state, accepted, r_new = lm_step(theta, r, jac, state, residual_fn)
            if state.damping > state.damping_ceiling:
                break
        if not accepted:
            run.exit_reason = "damping_ceiling"
            break
        new_loss = float(r_new @ r_new)
        if loss - new_loss <= stall_tol * max(loss, 1e-300):
            stalls += 1
            if stalls >= stall_patience:
                run.exit_reason = "stall"
                break
        else:
            stalls = 0
    run.params = theta
    r_final = residual_fn(theta)
    run.config["final_loss"] = float(r_final @ r_final)
    run.config["final_damping"] = state.damping
    return run
