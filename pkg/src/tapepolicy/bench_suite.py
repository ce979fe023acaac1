"""Classical test functions, adjoint-Adam vs differential evolution, cart-pole and pendulum.

Every test function is written once over a list of coordinates using the tape
primitives, so the same code runs on recorded values (Adam through the
adjoint), on floats, and on numpy columns (a whole DE population at once).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tape as tp
from .kernel import DomainKernel
from .optim import AdamState, NonFiniteObjectiveError, adam_step
from .policy import MlpArch, evaluate, evaluate_batch, param_count
from .policy import init as policy_init
from .rng import stream
from .smooth import rational_sigmoid

SCHWEFEL_OPT = 420.968746
SCHWEFEL_EPS = 1e-12
_SCHWEFEL_C = SCHWEFEL_OPT * math.sin(math.sqrt(SCHWEFEL_OPT))


def _sum(xs):
    return tp.total(xs)


def sphere(x):
    return _sum(xi * xi for xi in x)


def rastrigin(x):
    return _sum(xi * xi - 10.0 * tp.cos(2.0 * math.pi * xi) + 10.0 for xi in x)


def rosenbrock(x):
    """Shifted so the minimum sits at the origin (z = x + 1)."""
    z = [xi + 1.0 for xi in x]
    if len(z) == 1:
        return (1.0 - z[0]) * (1.0 - z[0])
    return _sum(100.0 * (z[i + 1] - z[i] * z[i]) ** 2.0 + (1.0 - z[i]) * (1.0 - z[i]) for i in range(len(z) - 1))


def schwefel(x):
    """Shifted so f(0) = 0; |z| is smoothed as sqrt(z^2 + eps) to keep the tape total."""
    terms = []
    for xi in x:
        z = xi + SCHWEFEL_OPT
        a = tp.sqrt(z * z + SCHWEFEL_EPS)
        terms.append(_SCHWEFEL_C - z * tp.sin(tp.sqrt(a)))
    return _sum(terms)


def ackley(x):
    n = len(x)
    r = tp.sqrt(_sum(xi * xi for xi in x) / n)
    c = _sum(tp.cos(2.0 * math.pi * xi) for xi in x) / n
    return -20.0 * tp.exp(-0.2 * r) - tp.exp(c) + 20.0 + math.e


def hybrid_blocks(D: int) -> tuple[int, int, int, int]:
    q = D // 4
    return (D - 3 * q, q, q, q)


def hybrid(x):
    """Sphere + Rastrigin + Rosenbrock + Ackley on disjoint coordinate blocks."""
    x = list(x)
    ns, nr, nb, na = hybrid_blocks(len(x))
    parts = []
    i = 0
    for fn, n in ((sphere, ns), (rastrigin, nr), (rosenbrock, nb), (ackley, na)):
        if n:
            parts.append(fn(x[i : i + n]))
        i += n
    return _sum(parts)


@dataclass(frozen=True)
class TestFunction:
    key: str
    name: str
    bound: float
    fn: Callable

    def __call__(self, x):
        return self.fn(x)


FUNCTIONS = {
    "F1": TestFunction("F1", "Sphere", 5.12, sphere),
    "F3": TestFunction("F3", "Rastrigin", 5.12, rastrigin),
    "F5": TestFunction("F5", "Rosenbrock", 2.048, rosenbrock),
    "F7": TestFunction("F7", "Schwefel", 500.0, schwefel),
    "F9": TestFunction("F9", "Ackley", 32.768, ackley),
    "F12": TestFunction("F12", "Hybrid", 5.12, hybrid),
}


def get_function(key: str) -> TestFunction:
    for f in FUNCTIONS.values():
        if key in (f.key, f.name, f.name.lower()):
            return f
    raise KeyError(f"unknown test function {key!r}")


def eval_function(f: TestFunction, x, D: int | None = None) -> float:
    x = np.asarray(x, dtype=float)
    if D is not None and x.shape[-1] != D:
        raise ValueError(f"expected dimension {D}, got {x.shape[-1]}")
    return float(f(list(x)))


def eval_population(f: TestFunction, pop: np.ndarray) -> np.ndarray:
    """Evaluate rows of ``pop`` by running the scalar code on numpy columns."""
    return np.asarray(f([pop[:, i] for i in range(pop.shape[1])]), dtype=float)


def out_of_bounds(f: TestFunction, x) -> bool:
    return bool(np.any(np.abs(np.asarray(x)) > f.bound))


def function_tape(f: TestFunction, D: int) -> tp.Tape:
    return tp.record(lambda i, p, r: f(p), 0, D, 0)


@dataclass
class OptTrace:
    method: str
    function: str
    dim: int
    seed: int
    evals: np.ndarray
    best: np.ndarray
    x_best: np.ndarray
    wall_ms: float

    @property
    def final(self) -> float:
        return float(self.best[-1])


def adam_on_adjoint(f: TestFunction, D: int, budget_evals: int, seed: int, lr: float = 0.01, trace_every: int = 100) -> OptTrace:
    """Adam on the recorded scalar; one forward+reverse replay per evaluation."""
    if budget_evals < 1:
        raise ValueError("budget must be >= 1")
    t0 = time.perf_counter()
    tape = function_tape(f, D)
    ws = tape.workspace()
    x = stream(seed, f"adam-start-{f.key}-{D}").uniform(-f.bound, f.bound, D)
    st = AdamState.zeros(D, lr=lr)
    seeds = np.ones(1)
    empty = np.zeros(0)
    best, x_best = math.inf, x.copy()
    ev, bt = [], []
    for it in range(budget_evals):
        val = tp.forward(tape, empty, x, empty, ws)[0]
        if not math.isfinite(val):
            raise NonFiniteObjectiveError(it, val)
        if val < best:
            best, x_best = val, x.copy()
        if (it + 1) % trace_every == 0 or it == budget_evals - 1:
            ev.append(it + 1)
            bt.append(best)
        g = tp.reverse(tape, seeds, ws).param_grads
        x, st = adam_step(x, g, st)
    return OptTrace("adam_adjoint", f.name, D, seed, np.array(ev), np.array(bt), x_best, (time.perf_counter() - t0) * 1e3)


def differential_evolution(
    f: TestFunction,
    D: int,
    budget: int,
    seed: int,
    popsize: int = 15,
    mutation: tuple[float, float] = (0.5, 1.0),
    recombination: float = 0.7,
) -> OptTrace:
    """DE/rand/1/bin with per-generation dithered mutation and clipping to the box."""
    n = popsize * D
    if budget < n:
        raise ValueError(f"budget must be >= popsize*D = {n}")
    t0 = time.perf_counter()
    rng = stream(seed, f"de-{f.key}-{D}")
    lo, hi = -f.bound, f.bound
    pop = rng.uniform(lo, hi, (n, D))
    fit = eval_population(f, pop)
    used = n
    ev, bt = [used], [float(fit.min())]
    idx = np.arange(n)
    while used + n <= budget:
        F = rng.uniform(*mutation)
        r = np.empty((n, 3), dtype=int)
        for i in range(n):
            r[i] = rng.choice(np.delete(idx, i), 3, replace=False)
        mutant = np.clip(pop[r[:, 0]] + F * (pop[r[:, 1]] - pop[r[:, 2]]), lo, hi)
        cross = rng.random((n, D)) < recombination
        cross[idx, rng.integers(0, D, n)] = True
        trial = np.where(cross, mutant, pop)
        tf = eval_population(f, trial)
        used += n
        better = tf <= fit
        pop[better] = trial[better]
        fit[better] = tf[better]
        ev.append(used)
        bt.append(min(bt[-1], float(fit.min())))
    k = int(np.argmin(fit))
    return OptTrace("de", f.name, D, seed, np.array(ev), np.array(bt), pop[k].copy(), (time.perf_counter() - t0) * 1e3)


def write_results_csv(traces: list[OptTrace], path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["method", "function", "dim", "seed", "best", "wall_ms"])
        for t in traces:
            w.writerow([t.method, t.function, t.dim, t.seed, repr(t.final), f"{t.wall_ms:.3f}"])


# ---------------------------------------------------------------- cart-pole


@dataclass(frozen=True)
class CartPoleSpec:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force_mag: float = 10.0
    tau: float = 0.02
    x_limit: float = 2.4
    theta_limit: float = 12 * 2 * math.pi / 360
    horizon: int = 500
    sharpness: float = 20.0
    init_range: float = 0.05


def cartpole_arch() -> MlpArch:
    return MlpArch((4, 8, 8, 1))


def cartpole_step(s, action, spec: CartPoleSpec):
    """Classic-control Euler update with a continuous force ``force_mag * action``."""
    x, x_dot, th, th_dot = s
    total_mass = spec.cart_mass + spec.pole_mass
    pml = spec.pole_mass * spec.half_length
    force = spec.force_mag * action
    c, sn = tp.cos(th), tp.sin(th)
    temp = (force + pml * (th_dot * th_dot) * sn) / total_mass
    th_acc = (spec.gravity * sn - c * temp) / (spec.half_length * (4.0 / 3.0 - spec.pole_mass * (c * c) / total_mass))
    x_acc = temp - pml * th_acc * c / total_mass
    return (
        x + spec.tau * x_dot,
        x_dot + spec.tau * x_acc,
        th + spec.tau * th_dot,
        th_dot + spec.tau * th_acc,
    )


def _action(out):
    return tp.tanh(out)


def survival_indicator(s, spec: CartPoleSpec):
    x, th = s[0], s[2]
    k = spec.sharpness
    xl, tl = spec.x_limit, spec.theta_limit
    return (
        rational_sigmoid((xl - x) / xl, k)
        * rational_sigmoid((xl + x) / xl, k)
        * rational_sigmoid((tl - th) / tl, k)
        * rational_sigmoid((tl + th) / tl, k)
    )


def make_cartpole_builder(spec: CartPoleSpec, arch: MlpArch, n_init: int, horizon: int, return_states: bool = False):
    def builder(inputs, params, randoms):
        total = 0.0
        finals = []
        for e in range(n_init):
            s = tuple(randoms[4 * e : 4 * e + 4])
            alive = 1.0
            for _ in range(horizon):
                a = _action(evaluate(params, arch, list(s))[0])
                s = cartpole_step(s, a, spec)
                alive = alive * survival_indicator(s, spec)
                total = total + alive
            finals.extend(s)
        if return_states:
            return finals
        return total / n_init

    return builder


def build_cartpole_kernel(spec: CartPoleSpec, arch: MlpArch | None = None, n_init: int = 8, horizon: int = 200, return_states: bool = False) -> DomainKernel:
    arch = arch or cartpole_arch()
    builder = make_cartpole_builder(spec, arch, n_init, horizon, return_states)
    tape = tp.record(builder, 0, param_count(arch), 4 * n_init)
    n_out = 4 * n_init if return_states else 1
    return DomainKernel(
        name="cartpole",
        tape=tape,
        builder=builder,
        arch=arch,
        inputs=np.zeros(0),
        input_names=[],
        randoms=cartpole_inits(spec, n_init, 0, "cartpole-record").ravel(),
        output_names=[f"s{i}" for i in range(n_out)] if return_states else ["smoothed_return"],
        meta={"spec": spec, "n_init": n_init, "horizon": horizon},
    )


def cartpole_inits(spec: CartPoleSpec, n: int, seed: int, stream_id: str, counter: int = 0) -> np.ndarray:
    return stream(seed, stream_id, counter).uniform(-spec.init_range, spec.init_range, (n, 4))


def cartpole_rollout_hard(flat, arch: MlpArch, spec: CartPoleSpec, inits: np.ndarray, horizon: int | None = None, terminate: bool = True):
    """Vectorized hard-physics rollout; returns (steps survived, final states)."""
    horizon = spec.horizon if horizon is None else horizon
    s = tuple(np.array(inits[:, j], dtype=float) for j in range(4))
    alive = np.ones(len(inits), dtype=bool)
    steps = np.zeros(len(inits), dtype=int)
    for _ in range(horizon):
        a = np.tanh(evaluate_batch(flat, arch, np.stack(s, axis=1))[:, 0])
        nxt = cartpole_step(s, a, spec)
        if terminate:
            nxt = tuple(np.where(alive, n, o) for n, o in zip(nxt, s))
            ok = (np.abs(nxt[0]) <= spec.x_limit) & (np.abs(nxt[2]) <= spec.theta_limit)
            steps += alive & ok
            alive &= ok
        s = nxt
    return steps, np.stack(s, axis=1)


def cartpole_eval_hard(flat, spec: CartPoleSpec, n_episodes: int = 20, seed: int = 0, arch: MlpArch | None = None) -> tuple[float, float]:
    arch = arch or cartpole_arch()
    inits = cartpole_inits(spec, n_episodes, seed, "cartpole-eval")
    steps, _ = cartpole_rollout_hard(flat, arch, spec, inits)
    return float(steps.mean()), float(steps.std())


@dataclass
class RlRun:
    method: str
    seed: int
    params: np.ndarray
    trace: np.ndarray
    record_s: float
    train_s: float
    eval_mean: float
    eval_std: float
    solved: bool
    extra: dict = field(default_factory=dict)

    @property
    def wall_s(self) -> float:
        return self.record_s + self.train_s


def cartpole_train(
    spec: CartPoleSpec = CartPoleSpec(),
    epochs: int = 200,
    horizon: int = 200,
    inits_per_epoch: int = 8,
    lr: float = 0.05,
    seed: int = 0,
    kernel: DomainKernel | None = None,
    n_eval: int = 20,
) -> RlRun:
    t0 = time.perf_counter()
    ker = kernel or build_cartpole_kernel(spec, n_init=inits_per_epoch, horizon=horizon)
    t1 = time.perf_counter()
    arch = ker.arch
    theta = policy_init(arch, seed).flat
    st = AdamState.zeros(len(theta), lr=lr)
    ws = ker.workspace()
    trace = np.empty(epochs)
    for ep in range(epochs):
        rnd = cartpole_inits(spec, inits_per_epoch, seed, "cartpole-train", ep).ravel()
        J, res = ker.value_and_grad(theta, randoms=rnd, ws=ws)
        if not math.isfinite(J):
            raise NonFiniteObjectiveError(ep, J)
        trace[ep] = J
        theta, st = adam_step(theta, -res.param_grads, st)
    t2 = time.perf_counter()
    mean, std = cartpole_eval_hard(theta, spec, n_eval, seed, arch)
    return RlRun("adam_adjoint", seed, theta, trace, t1 - t0, t2 - t1, mean, std, mean >= 475.0)


def write_rl_csv(runs: list[RlRun], path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["method", "seed", "solved", "wall_s", "final_reward"])
        for r in runs:
            w.writerow([r.method, r.seed, int(r.solved), f"{r.wall_s:.3f}", repr(r.eval_mean)])


# ---------------------------------------------------------------- pendulum


@dataclass(frozen=True)
class PendulumSpec:
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    max_speed: float = 8.0
    max_torque: float = 2.0
    horizon: int = 200
    speed_weight: float = 0.1
    torque_weight: float = 0.001
    clip_sharpness: float = 20.0


def pendulum_arch() -> MlpArch:
    return MlpArch((3, 16, 16, 1))


def angle_normalize(th):
    return ((th + np.pi) % (2 * np.pi)) - np.pi


def _pendulum_accel(th, u, spec: PendulumSpec):
    return 3.0 * spec.gravity / (2.0 * spec.length) * tp.sin(th) + 3.0 / (spec.mass * spec.length**2) * u


def make_pendulum_builder(spec: PendulumSpec, arch: MlpArch, n_init: int, horizon: int):
    from .smooth import smooth_max, smooth_min

    k = spec.clip_sharpness

    def builder(inputs, params, randoms):
        total = 0.0
        for e in range(n_init):
            th, thd = randoms[2 * e], randoms[2 * e + 1]
            for _ in range(horizon):
                out = evaluate(params, arch, [tp.cos(th), tp.sin(th), thd])[0]
                u = spec.max_torque * tp.tanh(out)
                cost = (1.0 - tp.cos(th)) + spec.speed_weight * (thd * thd) + spec.torque_weight * (u * u)
                thd = thd + _pendulum_accel(th, u, spec) * spec.dt
                thd = smooth_max(smooth_min(thd, spec.max_speed, k), -spec.max_speed, k)
                th = th + thd * spec.dt
                total = total - cost
        return total / n_init

    return builder


def build_pendulum_kernel(spec: PendulumSpec, arch: MlpArch | None = None, n_init: int = 8, horizon: int | None = None) -> DomainKernel:
    arch = arch or pendulum_arch()
    horizon = spec.horizon if horizon is None else horizon
    builder = make_pendulum_builder(spec, arch, n_init, horizon)
    tape = tp.record(builder, 0, param_count(arch), 2 * n_init)
    return DomainKernel(
        name="pendulum",
        tape=tape,
        builder=builder,
        arch=arch,
        inputs=np.zeros(0),
        input_names=[],
        randoms=pendulum_inits(n_init, 0, "pendulum-record").ravel(),
        output_names=["surrogate_return"],
        meta={"spec": spec, "n_init": n_init, "horizon": horizon},
    )


def pendulum_inits(n: int, seed: int, stream_id: str, counter: int = 0) -> np.ndarray:
    g = stream(seed, stream_id, counter)
    return np.stack([g.uniform(-np.pi, np.pi, n), g.uniform(-1.0, 1.0, n)], axis=1)


def pendulum_eval_hard(flat, spec: PendulumSpec, n_episodes: int = 20, seed: int = 0, arch: MlpArch | None = None) -> tuple[float, float]:
    """Hard return with the wrapped-angle quadratic cost and exact clipping."""
    arch = arch or pendulum_arch()
    ini = pendulum_inits(n_episodes, seed, "pendulum-eval")
    th, thd = ini[:, 0].copy(), ini[:, 1].copy()
    ret = np.zeros(n_episodes)
    for _ in range(spec.horizon):
        out = evaluate_batch(flat, arch, np.stack([np.cos(th), np.sin(th), thd], axis=1))[:, 0]
        u = spec.max_torque * np.tanh(out)
        ret -= angle_normalize(th) ** 2 + spec.speed_weight * thd**2 + spec.torque_weight * u**2
        thd = np.clip(thd + _pendulum_accel(th, u, spec) * spec.dt, -spec.max_speed, spec.max_speed)
        th = th + thd * spec.dt
    return float(ret.mean()), float(ret.std())


def pendulum_train(
    spec: PendulumSpec = PendulumSpec(),
    epochs: int = 400,
    inits_per_epoch: int = 8,
    lr: float = 0.005,
    seed: int = 0,
    kernel: DomainKernel | None = None,
) -> RlRun:
    t0 = time.perf_counter()
    ker = kernel or build_pendulum_kernel(spec, n_init=inits_per_epoch)
    t1 = time.perf_counter()
    theta = policy_init(ker.arch, seed).flat
    st = AdamState.zeros(len(theta), lr=lr)
    ws = ker.workspace()
    trace = np.empty(epochs)
    for ep in range(epochs):
        rnd = pendulum_inits(inits_per_epoch, seed, "pendulum-train", ep).ravel()
        J, res = ker.value_and_grad(theta, randoms=rnd, ws=ws)
        if not math.isfinite(J):
            raise NonFiniteObjectiveError(ep, J)
        trace[ep] = J
        theta, st = adam_step(theta, -res.param_grads, st)
    t2 = time.perf_counter()
    mean, std = pendulum_eval_hard(theta, spec, 20, seed, ker.arch)
    return RlRun("adam_adjoint", seed, theta, trace, t1 - t0, t2 - t1, mean, std, mean >= -200.0)


def surrogate_improvement(start: float, end: float) -> float:
    """Relative gain of the smoothed objective, (end - start) / |start|."""
    return (end - start) / abs(start)


def pendulum_failure_repro(spec: PendulumSpec = PendulumSpec(), epochs: int = 400, seeds=range(5), n_probe: int = 64, **kw) -> list[dict]:
    """Train per seed and score the surrogate before/after on one fixed batch of start states."""
    ker = build_pendulum_kernel(spec, n_init=kw.get("inits_per_epoch", 8))
    probe = build_pendulum_kernel(spec, n_init=n_probe)
    probe_states = pendulum_inits(n_probe, 0, "pendulum-probe").ravel()
    rows = []
    for s in seeds:
        start = probe.value(policy_init(ker.arch, s).flat, randoms=probe_states)
        run = pendulum_train(spec, epochs=epochs, seed=s, kernel=ker, **kw)
        end = probe.value(run.params, randoms=probe_states)
        rows.append(
            {
                "seed": s,
                "hard_return": run.eval_mean,
                "hard_std": run.eval_std,
                "surrogate_start": start,
                "surrogate_end": end,
                "improvement": surrogate_improvement(start, end),
                "wall_s": run.wall_s,
                "run": run,
            }
        )
    return rows


def plateau_gradient_norms(spec: PendulumSpec, flat, n: int = 8, horizon: int = 50, seed: int = 0) -> tuple[float, float]:
    """Mean gradient norm of the surrogate from start states near theta=pi vs near upright."""
    ker = build_pendulum_kernel(spec, n_init=n, horizon=horizon)
    g = stream(seed, "pendulum-plateau")
    out = []
    for centre in (np.pi, 0.0):
        ini = np.stack([centre + g.uniform(-0.05, 0.05, n), np.zeros(n)], axis=1).ravel()
        _, res = ker.value_and_grad(flat, randoms=ini)
        out.append(float(np.linalg.norm(res.param_grads)))
    return out[0], out[1]
