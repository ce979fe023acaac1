"""Pension ALM: three market drivers, monthly rebalancing, risk sensitivities.

Monthly step (dt = 1/12) on each scenario:

    equity  R_eq = exp((mu - sigma^2/2) dt + sigma sqrt(dt) z_eq) - 1
    rate    r'   = theta + (r - theta) e^{-kappa dt} + sd_r z_r        (exact OU)
    spread  s'   = s_bar + (s - s_bar) e^{-kappa_s dt} + sd_s z_s      (exact OU)
    bond    R_b  = r dt - D_b (r' - r)
    credit  R_c  = (r + s) dt - D_c ((r' - r) + (s' - s))
    assets  A'   = A (1 + w . R) + premium/12 - payout
    liabs   L'   = L (1 + i_m) - payout

The observed rate adds synthetic basis-point tilts (one per extra risk factor)
so scaling studies can grow the factor count without touching the scenario
loop. Kernel outputs: ``[J, mean surplus change]`` with

    J = E[S_T - S_0] - lambda * E[sum_t smooth_relu(1 - A_t/L_t)^2].
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tape as tp
from .kernel import DomainKernel, SensitivityReport, relative_error
from .optim import TrainRun, train_adam
from .policy import MlpArch, evaluate, evaluate_batch, param_count
from .policy import init as policy_init
from .rng import stream
from .smooth import rational_sigmoid, smooth_relu

DT = 1.0 / 12.0
NAMED_FACTORS = ("r0", "gbm_sigma", "premium", "spread0", "ou_sigma")
N_FEATURES = 5
TILT_SCALE = 1e-4  # tilt inputs are in basis points


@dataclass(frozen=True)
class AlmMarketParams:
    hw_kappa: float = 0.1
    hw_sigma: float = 0.01
    hw_theta: float = 0.04
    gbm_mu: float = 0.08
    gbm_sigma: float = 0.18
    ou_kappa: float = 0.5
    ou_sigma: float = 0.02
    ou_mean: float = 0.015
    r0: float = 0.04
    spread0: float = 0.015
    bond_duration: float = 7.0
    credit_duration: float = 5.0
    correlation: tuple[tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        if not (self.hw_kappa > 0 and self.ou_kappa > 0):
            raise ValueError("mean reversion rates must be positive")
        if min(self.hw_sigma, self.gbm_sigma, self.ou_sigma) < 0:
            raise ValueError("volatilities must be nonnegative")
        c = np.asarray(self.correlation, dtype=float)
        if c.shape != (3, 3) or not np.allclose(c, c.T) or np.any(np.diag(c) != 1.0):
            raise ValueError("correlation must be a symmetric 3x3 matrix with unit diagonal")
        np.linalg.cholesky(c)


@dataclass(frozen=True)
class FundSpec:
    """Fund in scaled currency units (initial assets 100 by default)."""

    initial_assets: float = 100.0
    initial_funded_ratio: float = 0.79
    discount_rate: float = 0.068
    annual_premium: float = 5.0
    payout_years: float = 30.0
    payout: float | None = None  # overrides the annuity-implied monthly payout
    horizon_months: int = 36
    penalty_lambda: float = 1.0
    funding_floor: float = 1.0
    k: float = 50.0
    action_sharpness: float = 1.0

    def __post_init__(self):
        if not self.initial_funded_ratio > 0:
            raise ValueError("funded ratio must be positive")
        if self.horizon_months < 1:
            raise ValueError("horizon must be at least one month")
        if self.initial_assets <= 0:
            raise ValueError("initial assets must be positive")

    @property
    def initial_liabilities(self) -> float:
        return self.initial_assets / self.initial_funded_ratio

    @property
    def monthly_discount(self) -> float:
        return (1.0 + self.discount_rate) ** DT - 1.0

    @property
    def monthly_payout(self) -> float:
        """Level payout that amortizes the initial liabilities over ``payout_years``."""
        if self.payout is not None:
            return self.payout
        i = self.monthly_discount
        n = self.payout_years * 12
        if i == 0:
            return self.initial_liabilities / n
        return self.initial_liabilities * i / (1.0 - (1.0 + i) ** -n)


@dataclass(frozen=True)
class RiskFactorSet:
    """Names and base values of the factors exposed as tape inputs."""

    names: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("factor names must be unique")
        if len(self.names) != len(self.values):
            raise ValueError("names and values differ in length")

    def __len__(self):
        return len(self.names)

    @classmethod
    def default(cls, market: AlmMarketParams, fund: FundSpec, n_factors: int = 5) -> RiskFactorSet:
        """First ``n_factors`` of the five named factors, then zero-valued tilts."""
        if n_factors < 1:
            raise ValueError("need at least one factor")
        base = (market.r0, market.gbm_sigma, fund.annual_premium, market.spread0, market.ou_sigma)
        names = list(NAMED_FACTORS[:n_factors])
        values = list(base[:n_factors])
        for j in range(n_factors - len(names)):
            names.append(f"tilt_{j}")
            values.append(0.0)
        return cls(tuple(names), tuple(values))


def tilt_basis(n_tilts: int, T: int) -> np.ndarray:
    """(n_tilts, T) Gaussian bumps with evenly spaced centers over the horizon."""
    if n_tilts == 0:
        return np.zeros((0, T))
    centers = np.linspace(0, T - 1, n_tilts)
    width = max(T / max(n_tilts, 1), 1.0)
    t = np.arange(T)
    return np.exp(-(((t[None, :] - centers[:, None]) / width) ** 2))


@dataclass
class Scenarios:
    """Correlated standard normals per (scenario, month, driver)."""

    z: np.ndarray  # (n, T, 3): equity, rate, spread

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def randoms(self) -> np.ndarray:
        return self.z.ravel()


def draw_scenarios(market: AlmMarketParams, n: int, T: int, seed: int) -> Scenarios:
    gen = stream(seed, "alm-scenarios")
    chol = np.linalg.cholesky(np.asarray(market.correlation, dtype=float))
    z = gen.standard_normal((n, T, 3)) @ chol.T
    return Scenarios(z)


def alm_arch(T: int) -> MlpArch:
    return MlpArch((N_FEATURES, 5, 5, 2), True, T, 2)


def simplex_weights(u0, u1, ks: float = 1.0):
    """Two raw outputs -> (equity, bond, credit) weights on the simplex."""
    s1 = rational_sigmoid(u0, ks)
    s2 = rational_sigmoid(u1, ks)
    w_eq = s1
    w_bond = (1.0 - s1) * s2
    return w_eq, w_bond, 1.0 - w_eq - w_bond


def _ou_step_sd(kappa: float, sigma, dt: float = DT):
    return sigma * math.sqrt((1.0 - math.exp(-2.0 * kappa * dt)) / (2.0 * kappa))


def make_alm_builder(
    market: AlmMarketParams,
    fund: FundSpec,
    factors: RiskFactorSet,
    n_scen: int,
    arch: MlpArch | None,
    fixed_weights=None,
):
    """Builder ``(factor_values, params, randoms) -> [J, mean surplus change]``."""
    T = fund.horizon_months
    n_named = min(len(factors), len(NAMED_FACTORS))
    n_tilts = len(factors) - n_named
    basis = tilt_basis(n_tilts, T + 1)
    base_vals = (market.r0, market.gbm_sigma, fund.annual_premium, market.spread0, market.ou_sigma)
    d_r = math.exp(-market.hw_kappa * DT)
    d_s = math.exp(-market.ou_kappa * DT)
    sd_r = _ou_step_sd(market.hw_kappa, market.hw_sigma)
    sd_s_unit = _ou_step_sd(market.ou_kappa, 1.0)
    i_m = fund.monthly_discount
    payout = fund.monthly_payout
    A0 = fund.initial_assets
    L0 = fund.initial_liabilities
    lam, k = fund.penalty_lambda, fund.k
    sqdt = math.sqrt(DT)

    def builder(x, params, randoms):
        fac = [x[j] if j < n_named else base_vals[j] for j in range(len(NAMED_FACTORS))]
        r0, sig_eq, prem, s0, sig_s = fac
        # tilt path shared by all scenarios
        tilt = []
        for t in range(T + 1):
            acc = 0.0
            for j in range(n_tilts):
                acc = acc + x[n_named + j] * (float(basis[j, t]) * TILT_SCALE)
            tilt.append(acc)
        drift_eq = (market.gbm_mu - 0.5 * (sig_eq * sig_eq)) * DT
        vol_eq = sig_eq * sqdt
        sd_s = sig_s * sd_s_unit
        contrib = prem * DT
        surplus_total = 0.0
        pen_total = 0.0
        for n in range(n_scen):
            A, L = A0, L0
            r, s = r0, s0
            last = 0.0
            pen = 0.0
            for t in range(T):
                base = 3 * (n * T + t)
                z_eq, z_r, z_s = randoms[base], randoms[base + 1], randoms[base + 2]
                fr = A / L
                if fixed_weights is None:
                    u = evaluate(params, arch, [fr, 10.0 * r, 10.0 * s, t / T, 10.0 * last], t)
                    w_eq, w_b, w_c = simplex_weights(u[0], u[1], fund.action_sharpness)
                else:
                    w_eq, w_b, w_c = fixed_weights
                r_new = market.hw_theta + (r - market.hw_theta) * d_r + sd_r * z_r
                s_new = market.ou_mean + (s - market.ou_mean) * d_s + sd_s * z_s
                ro, ro_new = r + tilt[t], r_new + tilt[t + 1]
                R_eq = tp.exp(drift_eq + vol_eq * z_eq) - 1.0
                dr = ro_new - ro
                R_b = ro * DT - market.bond_duration * dr
                R_c = (ro + s) * DT - market.credit_duration * (dr + (s_new - s))
                A = A * (1.0 + (w_eq * R_eq + w_b * R_b + w_c * R_c)) + contrib - payout
                L = L * (1.0 + i_m) - payout
                short = smooth_relu(fund.funding_floor - A / L, k)
                pen = pen + short * short
                r, s, last = r_new, s_new, R_eq
            surplus_total = surplus_total + ((A - L) - (A0 - L0))
            pen_total = pen_total + pen
        mean_surplus = surplus_total / n_scen
        return [mean_surplus - lam * (pen_total / n_scen), mean_surplus]

    return builder


def build_alm_kernel(
    market: AlmMarketParams,
    fund: FundSpec,
    n_scenarios: int,
    arch: MlpArch | None,
    seed: int = 2024,
    n_factors: int = 5,
    fixed_weights=None,
    scenarios: Scenarios | None = None,
) -> DomainKernel:
    T = fund.horizon_months
    if fixed_weights is None:
        if arch is None:
            raise ValueError("either a policy architecture or fixed weights is required")
        if arch.n_inputs != N_FEATURES or arch.n_outputs != 2:
            raise ValueError("ALM policy must map 5 features to 2 outputs")
        if arch.use_time_bias and arch.horizon < T:
            raise ValueError("time-bias table shorter than the horizon")
    else:
        _check_simplex(fixed_weights)
    factors = RiskFactorSet.default(market, fund, n_factors)
    if scenarios is None:
        scenarios = draw_scenarios(market, n_scenarios, T, seed)
    if scenarios.z.shape != (n_scenarios, T, 3):
        raise ValueError("scenario array does not match (n_scenarios, T, 3)")
    builder = make_alm_builder(market, fund, factors, n_scenarios, arch, fixed_weights)
    n_params = 0 if fixed_weights is not None else param_count(arch)
    tape = tp.record(builder, len(factors), n_params, n_scenarios * T * 3)
    return DomainKernel(
        name="alm",
        tape=tape,
        builder=builder,
        arch=None if fixed_weights is not None else arch,
        inputs=np.asarray(factors.values, dtype=float),
        input_names=list(factors.names),
        randoms=scenarios.randoms(),
        output_names=["J", "surplus_change"],
        meta={"market": market, "fund": fund, "factors": factors, "scenarios": scenarios},
    )


def _check_simplex(w):
    w = np.asarray(w, dtype=float)
    if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be a nonnegative 3-vector summing to 1")


def bump_sizes(values, bump_size: float) -> np.ndarray:
    """Relative bumps with a unit floor so zero-valued tilts still move."""
    return bump_size * np.maximum(np.abs(np.asarray(values, dtype=float)), 1.0)


def risk_sensitivities(kernel: DomainKernel, params, output: int = 0) -> SensitivityReport:
    """All factor derivatives of output ``output`` from one forward + one reverse."""
    params = np.zeros(0) if params is None else params
    _, res = kernel.value_and_grad(params, output=output)
    return SensitivityReport(list(kernel.input_names), res.input_grads.copy(), label="sensitivity")


@dataclass
class BumpResult:
    report: SensitivityReport
    wall_ms: float
    n_forwards: int


def bump_and_revalue(kernel: DomainKernel, params, bump_size: float = 1e-4, central: bool = True, output: int = 0) -> BumpResult:
    """Finite-difference factor sensitivities; central uses 2N+1 forwards, one-sided N+1."""
    if not bump_size > 0:
        raise ValueError("bump_size must be positive")
    params = np.zeros(0) if params is None else params
    ws = kernel.workspace()
    x0 = kernel.inputs
    h = bump_sizes(x0, bump_size)
    out = np.empty(len(x0))
    t0 = time.perf_counter()
    base = kernel.evaluate(params, inputs=x0, ws=ws)[output]
    n = 1
    for i in range(len(x0)):
        xp = x0.copy()
        xp[i] += h[i]
        up = kernel.evaluate(params, inputs=xp, ws=ws)[output]
        n += 1
        if central:
            xm = x0.copy()
            xm[i] -= h[i]
            dn = kernel.evaluate(params, inputs=xm, ws=ws)[output]
            n += 1
            out[i] = (up - dn) / (2 * h[i])
        else:
            out[i] = (up - base) / h[i]
    wall = (time.perf_counter() - t0) * 1e3
    return BumpResult(SensitivityReport(list(kernel.input_names), out, label="bump"), wall, n)


def adjoint_ms(kernel: DomainKernel, params, reps: int = 5) -> float:
    ws = kernel.workspace()
    kernel.value_and_grad(params, ws=ws)
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        kernel.value_and_grad(params, ws=ws)
        ts.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(ts))


def scaling_study(
    market: AlmMarketParams,
    fund: FundSpec,
    factor_counts,
    n_scenarios: int = 256,
    seed: int = 2024,
    reps: int = 5,
    central: bool = True,
    params_seed: int = 0,
) -> list[dict]:
    """Rows of (n_factors, bump_ms, adjoint_ms, speedup), one recording per N."""
    rows = []
    arch = alm_arch(fund.horizon_months)
    params = policy_init(arch, params_seed).flat
    for n in factor_counts:
        if n < 1:
            raise ValueError("factor counts must be >= 1")
        ker = build_alm_kernel(market, fund, n_scenarios, arch, seed=seed, n_factors=n)
        adj = adjoint_ms(ker, params, reps)
        bump_and_revalue(ker, params, central=central)  # warm
        bump = float(np.median([bump_and_revalue(ker, params, central=central).wall_ms for _ in range(reps)]))
        rows.append({"n_factors": n, "bump_ms": bump, "adjoint_ms": adj, "speedup": bump / adj})
    return rows


def write_scaling_csv(rows: list[dict], path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["n_factors", "bump_ms", "adjoint_ms", "speedup"])
        for r in rows:
            w.writerow([r["n_factors"], f"{r['bump_ms']:.4f}", f"{r['adjoint_ms']:.4f}", f"{r['speedup']:.4f}"])


@dataclass
class FundOutcome:
    surplus_change: np.ndarray  # per scenario
    penalty: np.ndarray  # per scenario, unscaled
    weights: np.ndarray  # (n, T, 3)

    @property
    def mean(self) -> float:
        return float(self.surplus_change.mean())

    @property
    def std(self) -> float:
        return float(self.surplus_change.std(ddof=1)) if len(self.surplus_change) > 1 else 0.0

    def objective(self, lam: float) -> float:
        return float(self.surplus_change.mean() - lam * self.penalty.mean())


def simulate_fund(market: AlmMarketParams, fund: FundSpec, scenarios: Scenarios, weights_fn) -> FundOutcome:
    """Vectorized replay outside the tape; ``weights_fn(t, features) -> (n, 3)``."""
    n, T = scenarios.n, fund.horizon_months
    z = scenarios.z
    d_r = math.exp(-market.hw_kappa * DT)
    d_s = math.exp(-market.ou_kappa * DT)
    sd_r = _ou_step_sd(market.hw_kappa, market.hw_sigma)
    sd_s = _ou_step_sd(market.ou_kappa, market.ou_sigma)
    A = np.full(n, fund.initial_assets)
    L = np.full(n, fund.initial_liabilities)
    r = np.full(n, market.r0)
    s = np.full(n, market.spread0)
    last = np.zeros(n)
    pen = np.zeros(n)
    W = np.empty((n, T, 3))
    payout, i_m = fund.monthly_payout, fund.monthly_discount
    drift = (market.gbm_mu - 0.5 * market.gbm_sigma**2) * DT
    for t in range(T):
        feats = np.column_stack([A / L, 10 * r, 10 * s, np.full(n, t / T), 10 * last])
        w = np.asarray(weights_fn(t, feats), dtype=float)
        w = np.broadcast_to(w, (n, 3))
        W[:, t] = w
        r_new = market.hw_theta + (r - market.hw_theta) * d_r + sd_r * z[:, t, 1]
        s_new = market.ou_mean + (s - market.ou_mean) * d_s + sd_s * z[:, t, 2]
        R_eq = np.exp(drift + market.gbm_sigma * math.sqrt(DT) * z[:, t, 0]) - 1.0
        dr = r_new - r
        R_b = r * DT - market.bond_duration * dr
        R_c = (r + s) * DT - market.credit_duration * (dr + (s_new - s))
        A = A * (1.0 + (w[:, 0] * R_eq + w[:, 1] * R_b + w[:, 2] * R_c)) + fund.annual_premium * DT - payout
        L = L * (1.0 + i_m) - payout
        short = smooth_relu(fund.funding_floor - A / L, fund.k)
        pen += short * short
        r, s, last = r_new, s_new, R_eq
    sc = (A - L) - (fund.initial_assets - fund.initial_liabilities)
    return FundOutcome(sc, pen, W)


STATIC_STRATEGIES = {
    "growth_60_40": (0.6, 0.4, 0.0),
    "max_equity_70_30": (0.7, 0.3, 0.0),
    "conservative_30_70": (0.3, 0.7, 0.0),
}


def static_strategy(market: AlmMarketParams, fund: FundSpec, scenarios: Scenarios, weights) -> tuple[float, float]:
    """Mean and std of the unpenalized surplus change under fixed weights."""
    _check_simplex(weights)
    out = simulate_fund(market, fund, scenarios, lambda t, f: np.asarray(weights, dtype=float))
    return out.mean, out.std


def policy_outcome(params, arch: MlpArch, market: AlmMarketParams, fund: FundSpec, scenarios: Scenarios) -> FundOutcome:
    def wfn(t, feats):
        u = evaluate_batch(params, arch, feats, t)
        return np.column_stack(simplex_weights(u[:, 0], u[:, 1], fund.action_sharpness))

    return simulate_fund(market, fund, scenarios, wfn)


@dataclass
class AlmConfig:
    """Desk-scale defaults; the full-scale setting is 120 months, 2048 scenarios."""

    n_scenarios: int = 256
    iterations: int = 300
    lr: float = 0.005
    train_seed: int = 2024
    eval_seed: int = 4049
    fund: FundSpec = field(default_factory=FundSpec)
    market: AlmMarketParams = field(default_factory=AlmMarketParams)

    def arch(self) -> MlpArch:
        return alm_arch(self.fund.horizon_months)

    @classmethod
    def full_scale(cls) -> AlmConfig:
        return cls(n_scenarios=2048, iterations=1000, fund=replace(FundSpec(), horizon_months=120))


def train_alm(cfg: AlmConfig, seed: int, kernel: DomainKernel | None = None) -> tuple[DomainKernel, TrainRun]:
    if kernel is None:
        kernel = build_alm_kernel(cfg.market, cfg.fund, cfg.n_scenarios, cfg.arch(), seed=cfg.train_seed)
    init = policy_init(kernel.arch, seed).flat
    return kernel, train_adam(kernel, init, cfg.iterations, lr=cfg.lr, seed=seed)


def compare_with_statics(cfg: AlmConfig, params, scenarios: Scenarios | None = None) -> list[dict]:
    """Rows (strategy, mean, std, risk_adjusted, penalized) on common scenarios."""
    if scenarios is None:
        scenarios = draw_scenarios(cfg.market, cfg.n_scenarios, cfg.fund.horizon_months, cfg.train_seed)
    lam = cfg.fund.penalty_lambda
    rows = []
    out = policy_outcome(params, cfg.arch(), cfg.market, cfg.fund, scenarios)
    rows.append(_row("policy", out, lam))
    for name, w in STATIC_STRATEGIES.items():
        o = simulate_fund(cfg.market, cfg.fund, scenarios, lambda t, f, w=w: np.asarray(w))
        rows.append(_row(name, o, lam))
    return rows


def _row(name, out: FundOutcome, lam) -> dict:
    return {
        "strategy": name,
        "mean": out.mean,
        "std": out.std,
        "risk_adjusted": out.mean / out.std if out.std > 0 else float("nan"),
        "penalized": out.objective(lam),
    }


def sensitivity_rel_err(adj: SensitivityReport, bump: SensitivityReport, floor: float = 1e-8) -> float:
    return float(np.max(relative_error(adj.adjoint, bump.adjoint, floor)))
