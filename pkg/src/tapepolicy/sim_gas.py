"""Gas storage: Schwartz-Smith prices, smooth inject/withdraw kernel, DP baseline.

Inventory, rates and capacity share one volume unit. The recorded kernel
computes

    J = mean over paths of sum_t [ cashflow_t - (penalty_t - penalty_floor) ]

where the two policy outputs are squashed into an inject request in
[0, max_inject] and a withdraw request in [0, max_withdraw]. The inject leg is
limited against remaining space and the withdraw leg against inventory by
zero-preserving smooth clamps, so the net flow lies in
[-max_withdraw, +max_inject] and selling from an empty store is worth only the
smoothing leak. The penalty floor is the penalty at the initial inventory;
zero requests therefore give exactly J = 0. Forward-curve pillars are tape
inputs, so the reverse pass that trains the policy also returns every
pillar delta.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tape as tp
from .kernel import DomainKernel, SensitivityReport, central_fd, relative_error
from .optim import TrainRun, train_adam
from .policy import MlpArch, evaluate, evaluate_batch, param_count
from .policy import init as policy_init
from .rng import stream
from .smooth import rational_sigmoid, smooth_max, smooth_min, smooth_relu

DAYS_PER_YEAR = 365.0
N_FEATURES = 9


@dataclass(frozen=True)
class SchwartzSmithParams:
    kappa: float = 8.0
    sigma_chi: float = 0.45
    sigma_xi: float = 0.12
    rho: float = -0.15
    mu_xi: float = 0.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.sigma_chi < 0 or self.sigma_xi < 0:
            raise ValueError("volatilities must be nonnegative")
        if abs(self.rho) > 1:
            raise ValueError("|rho| must be <= 1")


@dataclass(frozen=True)
class StorageSpec:
    capacity: float = 1000.0
    max_inject: float = 100.0
    max_withdraw: float = 100.0
    initial_inventory: float = 0.0
    inject_cost: float = 0.0
    withdraw_cost: float = 0.0
    penalty_lambda: tuple[float, float] = (1.0, 1.0)  # (below zero, above capacity)
    k: float = 50.0
    action_sharpness: float = 2.0

    def __post_init__(self):
        if not 0 <= self.initial_inventory <= self.capacity:
            raise ValueError("initial inventory must lie in [0, capacity]")
        if not (self.max_inject > 0 and self.max_withdraw > 0):
            raise ValueError("rates must be positive")
        if not self.k > 0:
            raise ValueError("sharpness must be positive")


@dataclass(frozen=True)
class ForwardCurve:
    """Pillar prices with piecewise-constant daily interpolation.

    Day ``t`` uses pillar ``min(t // block_days, n_pillars - 1)``.
    """

    values: tuple[float, ...]
    block_days: int = 1

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not all(v > 0 for v in self.values):
            raise ValueError("forward prices must be positive")
        if self.block_days < 1:
            raise ValueError("block_days must be >= 1")

    @property
    def n_pillars(self) -> int:
        return len(self.values)

    def pillar_of(self, t: int) -> int:
        return min(t // self.block_days, self.n_pillars - 1)

    def daily(self, T: int, values=None) -> np.ndarray:
        v = np.asarray(self.values if values is None else values, dtype=float)
        return np.array([v[self.pillar_of(t)] for t in range(T)])

    def with_values(self, values) -> ForwardCurve:
        return replace(self, values=tuple(values))


def seasonal_desk_curve(T: int = 60, n_pillars: int = 12, base: float = 3.0, amplitude: float = 0.5) -> ForwardCurve:
    """Synthetic one-cycle seasonal curve: cheap at the start, dear mid-horizon."""
    p = np.arange(n_pillars)
    vals = base - amplitude * np.cos(2 * np.pi * p / n_pillars)
    return ForwardCurve(tuple(vals), block_days=max(1, math.ceil(T / n_pillars)))


@dataclass
class PricePaths:
    forward: np.ndarray  # (T,) daily forward prices
    chi: np.ndarray  # (N, T)
    xi: np.ndarray  # (N, T)
    mult: np.ndarray  # (N, T) spot / forward

    @property
    def spot(self) -> np.ndarray:
        return self.forward[None, :] * self.mult

    @property
    def n_paths(self) -> int:
        return self.chi.shape[0]

    def randoms(self) -> np.ndarray:
        """Tape random-slot layout: per (path, day): chi, xi, multiplier."""
        return np.stack([self.chi, self.xi, self.mult], axis=-1).ravel()


def factor_moments(params: SchwartzSmithParams, t_years: np.ndarray):
    """Mean and variance of chi_t + xi_t started from zero."""
    k, sc, sx, rho = params.kappa, params.sigma_chi, params.sigma_xi, params.rho
    var_chi = sc**2 * (1 - np.exp(-2 * k * t_years)) / (2 * k)
    var_xi = sx**2 * t_years
    cov = rho * sc * sx * (1 - np.exp(-k * t_years)) / k
    return params.mu_xi * t_years, var_chi + var_xi + 2 * cov


def simulate_prices(params: SchwartzSmithParams, curve: ForwardCurve, n_paths: int, T: int, seed: int) -> PricePaths:
    """Two-factor paths with exact joint Gaussian steps; E[spot_t] = F_t.

    Day 0 sits at chi = xi = 0, so its spot equals the forward exactly.
    """
    dt = 1.0 / DAYS_PER_YEAR
    k, sc, sx, rho = params.kappa, params.sigma_chi, params.sigma_xi, params.rho
    decay = math.exp(-k * dt)
    v_chi = sc**2 * (1 - math.exp(-2 * k * dt)) / (2 * k)
    v_xi = sx**2 * dt
    c = rho * sc * sx * (1 - decay) / k
    # Cholesky of the 2x2 step covariance; handles the zero-vol corner
    l11 = math.sqrt(v_chi)
    l21 = c / l11 if l11 > 0 else 0.0
    l22 = math.sqrt(max(v_xi - l21 * l21, 0.0))
    gen = stream(seed, "schwartz-smith")
    z = gen.standard_normal((n_paths, max(T - 1, 0), 2))
    chi = np.zeros((n_paths, T))
    xi = np.zeros((n_paths, T))
    for t in range(1, T):
        e1 = l11 * z[:, t - 1, 0]
        e2 = l21 * z[:, t - 1, 0] + l22 * z[:, t - 1, 1]
        chi[:, t] = chi[:, t - 1] * decay + e1
        xi[:, t] = xi[:, t - 1] + params.mu_xi * dt + e2
    mean, var = factor_moments(params, np.arange(T) * dt)
    mult = np.exp(chi + xi - (mean + 0.5 * var)[None, :])
    return PricePaths(curve.daily(T), chi, xi, mult)


def deterministic_paths(curve: ForwardCurve, T: int, n_paths: int = 1) -> PricePaths:
    z = np.zeros((n_paths, T))
    return PricePaths(curve.daily(T), z, z.copy(), np.ones((n_paths, T)))


def gas_arch(T: int, hidden: tuple[int, ...] = (5, 5)) -> MlpArch:
    return MlpArch((N_FEATURES, *hidden, 2), True, T, 2)


def _features(inv, t, T, cap, m, chi, xi, last):
    phase = 2 * math.pi * t / DAYS_PER_YEAR
    return [inv / cap, t / T, math.sin(phase), math.cos(phase), m, chi, xi, (T - t) / T, last]


def penalty_floor(spec: StorageSpec) -> float:
    lo, hi = spec.penalty_lambda
    a = smooth_relu(-spec.initial_inventory, spec.k)
    b = smooth_relu(spec.initial_inventory - spec.capacity, spec.k)
    return lo * (a * a) + hi * (b * b)


def _requested_legs(u0, u1, spec: StorageSpec):
    """Inject and withdraw requests in [0, max_inject] and [0, max_withdraw]."""
    ks = spec.action_sharpness
    return spec.max_inject * rational_sigmoid(u0, ks), spec.max_withdraw * rational_sigmoid(u1, ks)


@dataclass(frozen=True)
class DemandSpec:
    """Optional delivery obligation: each day a volume is drawn from ``levels``.

    Shortfall below the drawn volume is charged ``penalty * smooth_relu(d + f)**2``
    (withdrawals are negative flows). Extension scenario only.
    """

    levels: tuple[float, ...] = (0.0, 0.25, 0.5)
    probs: tuple[float, ...] = (0.6, 0.3, 0.1)
    penalty: float = 5.0

    def __post_init__(self):
        if len(self.levels) != len(self.probs) or abs(sum(self.probs) - 1.0) > 1e-12:
            raise ValueError("demand levels and probabilities must match and sum to one")

    def draw(self, n_paths: int, T: int, seed: int) -> np.ndarray:
        gen = stream(seed, "gas-demand")
        return gen.choice(np.asarray(self.levels, dtype=float), size=(n_paths, T), p=self.probs)


def make_gas_builder(
    spec: StorageSpec,
    curve: ForwardCurve,
    n_paths: int,
    T: int,
    arch: MlpArch | None,
    schedule=None,
    demand: DemandSpec | None = None,
):
    """Builder ``(pillars, params, randoms) -> [J]`` usable plain or recorded.

    With ``schedule`` (array of T requested net flows) the policy is bypassed.
    Random slots per (path, day): chi, xi, spot multiplier, and the demand draw
    when ``demand`` is set.
    """
    cap, k = spec.capacity, spec.k
    lo, hi = spec.penalty_lambda
    floor = penalty_floor(spec)
    costs = spec.inject_cost > 0 or spec.withdraw_cost > 0
    pillar_of = [curve.pillar_of(t) for t in range(T)]
    stride = 3 if demand is None else 4
    r0 = smooth_relu(0.0, k)

    def builder(pillars, params, randoms):
        total = 0.0
        for n in range(n_paths):
            inv = spec.initial_inventory
            last = 0.0
            path_value = 0.0
            for t in range(T):
                base = stride * (n * T + t)
                chi, xi, m = randoms[base], randoms[base + 1], randoms[base + 2]
                spot = pillars[pillar_of[t]] * m
                if schedule is None:
                    u = evaluate(params, arch, _features(inv, t, T, cap, m, chi, xi, last), t)
                    want_in, want_out = _requested_legs(u[0], u[1], spec)
                else:
                    want_in, want_out = max(float(schedule[t]), 0.0), max(-float(schedule[t]), 0.0)
                # zero-preserving smooth limits: a zero request moves exactly nothing
                space = cap - inv
                inj = smooth_min(want_in, space, k) - smooth_min(0.0, space, k)
                wd = smooth_min(want_out, inv, k) - smooth_min(0.0, inv, k)
                f = inj - wd
                cash = spot * (wd - inj)
                if costs:
                    cash = cash - spec.inject_cost * inj - spec.withdraw_cost * wd
                inv = inv + f
                below = smooth_relu(-inv, k)
                above = smooth_relu(inv - cap, k)
                pen = lo * (below * below) + hi * (above * above) - floor
                if demand is not None:
                    short = smooth_relu(randoms[base + 3] - wd, k)
                    pen = pen + demand.penalty * (short * short - r0 * r0)
                path_value = path_value + (cash - pen)
                last = f / spec.max_inject
            total = total + path_value
        return [total / n_paths]

    return builder


@dataclass
class GasConfig:
    """Desk-scale defaults; the full-scale setting is T=365, N=256, K=1000."""

    T: int = 60
    n_paths: int = 64
    iterations: int = 300
    lr: float = 0.005
    n_pillars: int = 12
    n_levels: int = 51
    train_seed: int = 77
    eval_seed: int = 999
    n_eval_paths: int = 256
    hidden: tuple[int, ...] = (5, 5)
    spec: StorageSpec = field(default_factory=StorageSpec)
    market: SchwartzSmithParams = field(default_factory=SchwartzSmithParams)

    def curve(self) -> ForwardCurve:
        return seasonal_desk_curve(self.T, self.n_pillars)

    def arch(self) -> MlpArch:
        return gas_arch(self.T, self.hidden)

    @classmethod
    def full_scale(cls) -> GasConfig:
        return cls(T=365, n_paths=256, iterations=1000, n_eval_paths=1024)


def build_gas_kernel(
    spec: StorageSpec,
    market: SchwartzSmithParams | None,
    curve: ForwardCurve,
    n_paths: int,
    T: int,
    arch: MlpArch | None,
    seed: int = 77,
    schedule=None,
    paths: PricePaths | None = None,
    demand: DemandSpec | None = None,
) -> DomainKernel:
    """Record the gas kernel over ``n_paths`` simulated paths of ``T`` days.

    ``market=None`` records on the deterministic curve (all multipliers 1).
    Supplying ``paths`` overrides simulation.
    """
    if schedule is None and arch is None:
        raise ValueError("either a policy architecture or a forced schedule is required")
    if arch is not None and (arch.n_inputs != N_FEATURES or arch.n_outputs != 2):
        raise ValueError("gas policy must map 9 features to 2 outputs")
    if arch is not None and arch.use_time_bias and arch.horizon < T:
        raise ValueError("time-bias table shorter than the horizon")
    if schedule is not None and len(schedule) != T:
        raise ValueError("schedule length must equal T")
    if paths is None:
        paths = deterministic_paths(curve, T, n_paths) if market is None else simulate_prices(market, curve, n_paths, T, seed)
    if paths.chi.shape != (n_paths, T):
        raise ValueError("price paths do not match (n_paths, T)")
    builder = make_gas_builder(spec, curve, n_paths, T, arch, schedule, demand)
    n_params = 0 if schedule is not None else param_count(arch)
    randoms = gas_randoms(paths, demand.draw(n_paths, T, seed) if demand else None)
    tape = tp.record(builder, curve.n_pillars, n_params, len(randoms))
    return DomainKernel(
        name="gas",
        tape=tape,
        builder=builder,
        arch=None if schedule is not None else arch,
        inputs=np.asarray(curve.values, dtype=float),
        input_names=[f"pillar_{i}" for i in range(curve.n_pillars)],
        randoms=randoms,
        output_names=["J"],
        meta={"spec": spec, "market": market, "curve": curve, "T": T, "n_paths": n_paths, "demand": demand},
    )


def gas_randoms(paths: PricePaths, demand: np.ndarray | None = None) -> np.ndarray:
    if demand is None:
        return paths.randoms()
    return np.stack([paths.chi, paths.xi, paths.mult, demand], axis=-1).ravel()


def eval_randoms(kernel: DomainKernel, seed: int) -> np.ndarray:
    """Fresh random slots for the kernel's (path, day) grid from another seed."""
    m = kernel.meta
    if m["market"] is None:
        return kernel.randoms
    paths = simulate_prices(m["market"], m["curve"], m["n_paths"], m["T"], seed)
    d = m["demand"].draw(m["n_paths"], m["T"], seed) if m["demand"] else None
    return gas_randoms(paths, d)


def greeks(
    kernel: DomainKernel,
    params,
    eval_seed: int | None = None,
    fd_rel_bump: float = 1e-4,
    with_fd: bool = True,
) -> SensitivityReport:
    """Pillar deltas dJ/dF from one forward + one reverse, with a central-FD column.

    ``eval_seed`` replays on fresh paths; ``None`` keeps the recorded draws.
    """
    rnd = None if eval_seed is None else eval_randoms(kernel, eval_seed)
    params = np.zeros(0) if params is None else params
    ws = kernel.workspace()
    _, res = kernel.value_and_grad(params, randoms=rnd, ws=ws)
    fd = None
    if with_fd:
        x0 = kernel.inputs
        fd = central_fd(
            lambda x: kernel.value(params, inputs=x, randoms=rnd, ws=ws),
            x0,
            range(len(x0)),
            fd_rel_bump * np.abs(x0),
        )
    return SensitivityReport(list(kernel.input_names), res.input_grads.copy(), fd, label="delta")


def greeks_timing(kernel: DomainKernel, params, reps: int = 5) -> tuple[float, float]:
    """Median wall-clock (ms) of adjoint deltas vs bump-and-revalue deltas.

    The bump side costs one base forward plus two per pillar.
    """
    ws = kernel.workspace()
    x0 = kernel.inputs

    def adjoint():
        kernel.value_and_grad(params, ws=ws)

    def bump():
        kernel.value(params, ws=ws)
        central_fd(lambda x: kernel.value(params, inputs=x, ws=ws), x0, range(len(x0)), 1e-4 * np.abs(x0))

    return median_ms(adjoint, reps), median_ms(bump, reps)


def median_ms(fn, reps: int = 5, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(ts))


def save_curve_csv(curve: ForwardCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pillar_index", "price"])
        for i, v in enumerate(curve.values):
            w.writerow([i, repr(v)])


def load_curve_csv(path, block_days: int = 1) -> ForwardCurve:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and rows[0][0] == "pillar_index":
        rows = rows[1:]
    rows.sort(key=lambda r: int(r[0]))
    if [int(r[0]) for r in rows] != list(range(len(rows))):
        raise ValueError("pillar indices must be 0..n-1")
    return ForwardCurve(tuple(float(r[1]) for r in rows), block_days)


def dp_solve(spec: StorageSpec, prices, n_levels: int = 51):
    """Exact backward induction on the hard-constraint problem.

    Inventory lives on ``n_levels`` uniform levels over [0, capacity]; a daily
    move of ``j`` levels is allowed when ``-max_withdraw <= j * step <=
    max_inject``. Terminal inventory is worthless. Returns ``(value, policy)``
    where ``policy[t, i]`` is the next level from level ``i`` on day ``t``.
    """
    if n_levels < 2:
        raise ValueError("need at least two inventory levels")
    prices = np.asarray(prices, dtype=float)
    T = len(prices)
    step = spec.capacity / (n_levels - 1)
    up = int(math.floor(spec.max_inject / step + 1e-9))
    down = int(math.floor(spec.max_withdraw / step + 1e-9))
    moves = np.arange(-down, up + 1)
    levels = np.arange(n_levels)
    V = np.zeros(n_levels)
    policy = np.zeros((T, n_levels), dtype=np.int64)
    for t in range(T - 1, -1, -1):
        best = np.full(n_levels, -np.inf)
        arg = levels.copy()
        for j in moves:
            nxt = levels + j
            ok = (nxt >= 0) & (nxt < n_levels)
            vol = j * step
            cash = -prices[t] * vol - (spec.inject_cost * vol if j > 0 else spec.withdraw_cost * -vol)
            cand = np.where(ok, cash + V[np.clip(nxt, 0, n_levels - 1)], -np.inf)
            better = cand > best
            best = np.where(better, cand, best)
            arg = np.where(better, nxt, arg)
        V = best
        policy[t] = arg
    i0 = int(round(spec.initial_inventory / step))
    return float(V[i0]), policy


def evaluate_hard(params, spec: StorageSpec, paths: PricePaths, arch: MlpArch, return_paths: bool = False):
    """Replay the policy with exact clamps and no penalties (outside the tape)."""
    params = np.asarray(params, dtype=float)
    n, T = paths.chi.shape
    cap = spec.capacity
    inv = np.full(n, spec.initial_inventory)
    last = np.zeros(n)
    value = np.zeros(n)
    spot = paths.spot
    trace = np.empty((n, T))
    for t in range(T):
        phase = 2 * math.pi * t / DAYS_PER_YEAR
        feats = np.column_stack(
            [
                inv / cap,
                np.full(n, t / T),
                np.full(n, math.sin(phase)),
                np.full(n, math.cos(phase)),
                paths.mult[:, t],
                paths.chi[:, t],
                paths.xi[:, t],
                np.full(n, (T - t) / T),
                last,
            ]
        )
        u = evaluate_batch(params, arch, feats, t)
        want_in, want_out = _requested_legs(u[:, 0], u[:, 1], spec)
        inj = np.minimum(want_in, cap - inv)
        wd = np.minimum(want_out, inv)
        f = inj - wd
        cash = spot[:, t] * (wd - inj) - spec.inject_cost * inj - spec.withdraw_cost * wd
        # clip absorbs rounding drift at the bounds
        inv = np.clip(inv + f, 0.0, cap)
        trace[:, t] = inv
        value += cash
        last = f / spec.max_inject
    if return_paths:
        return float(value.mean()), value, trace
    return float(value.mean())


@dataclass
class GasRun:
    kernel: DomainKernel
    run: TrainRun
    config: GasConfig


def train_gas(cfg: GasConfig, seed: int, kernel: DomainKernel | None = None, deterministic: bool = False) -> GasRun:
    """Record (unless a kernel is given) and train one gas policy from ``seed``."""
    if kernel is None:
        market = None if deterministic else cfg.market
        n = 1 if deterministic else cfg.n_paths
        kernel = build_gas_kernel(cfg.spec, market, cfg.curve(), n, cfg.T, cfg.arch(), seed=cfg.train_seed)
    # start from the no-trade policy: J = 0 exactly and buying cheap days has a clear gradient
    init = policy_init(kernel.arch, seed, output_scale=0.0).flat
    run = train_adam(kernel, init, cfg.iterations, lr=cfg.lr, seed=seed)
    return GasRun(kernel, run, cfg)


def sharpness_sweep(cfg: GasConfig, k_list, seeds, deterministic: bool = True) -> list[dict]:
    """Train per (k, seed); report smooth trained J and hard value per k.

    With ``deterministic`` the desk curve is used without noise (one path) and
    hard values are compared against :func:`dp_solve` on the same curve.
    Otherwise hard values use out-of-sample paths from ``cfg.eval_seed``.
    """
    k_list = list(k_list)
    if not k_list:
        raise ValueError("k_list must be nonempty")
    curve = cfg.curve()
    if deterministic:
        eval_paths = deterministic_paths(curve, cfg.T)
    else:
        eval_paths = simulate_prices(cfg.market, curve, cfg.n_eval_paths, cfg.T, cfg.eval_seed)
    dp_value, _ = dp_solve(cfg.spec, curve.daily(cfg.T), cfg.n_levels)
    rows = []
    for k in k_list:
        kcfg = replace(cfg, spec=replace(cfg.spec, k=float(k)))
        kernel = None
        js, hs = [], []
        for s in seeds:
            gr = train_gas(kcfg, s, kernel=kernel, deterministic=deterministic)
            kernel = gr.kernel
            js.append(kernel.value(gr.run.params))
            hs.append(evaluate_hard(gr.run.params, kcfg.spec, eval_paths, kernel.arch))
        rows.append(
            {
                "k": float(k),
                "J_mean": float(np.mean(js)),
                "J_std": float(np.std(js)),
                "hard_mean": float(np.mean(hs)),
                "hard_std": float(np.std(hs)),
                "dp_value": dp_value,
                "hard_over_dp": float(np.mean(hs) / dp_value) if dp_value else float("nan"),
            }
        )
    return rows


def greeks_rel_err(report: SensitivityReport, floor: float = 1e-8) -> float:
    return float(np.max(relative_error(report.adjoint, report.fd, floor)))
