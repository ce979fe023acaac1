"""Four-unit pharmaceutical chain: CSTR -> crystallizer -> filter -> dryer.

One explicit-Euler integration (time in hours) runs the units in sequence:

* CSTR, isothermal at the jacket temperature: ``dC/dt = (C_f - C)/tau - k C``,
  ``dP/dt = -P/tau + k C`` with ``k = A exp(-Ea / (R T_jacket))``.
* Seeded cooling crystallizer via moments mu0..mu3 (size in um, counts in
  1e9 per m3). Relative supersaturation ``s = relu_k((c - c_sat)/c_sat)``
  against a quadratic solubility curve, nucleation ``B = k_b s^b``, growth
  ``G = k_g s^g``, solute balance ``dc/dt = -3 alpha G mu2``. Temperature falls
  at ``cooling_rate * 2 sig(u1)`` (controller output 1), floored smoothly.
* Constant-pressure Darcy filter: ``dV/dt = dP k_f / (R_m + alpha_c m_c V)``
  with Kozeny-style ``alpha_c ~ (L_ref/L)^2``; cake moisture
  ``X = X_res (L_ref/L)^0.5 + X_free exp(-3 V / V_liq)``.
* Falling-rate dryer: ``dX/dt = -k_d (T_gas - T_ref) min_k(X/X_c, 1) X_c`` with
  ``T_gas = T_gas_set + dT (2 sig(u2) - 1)`` (controller output 2).

CQAs: conversion, crystal yield, mean size, cake moisture, drying loss. The
four CPPs (jacket temperature, nominal cooling rate, pressure drop, gas
temperature set point) are tape inputs.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tape as tp
from .kernel import DomainKernel, central_fd, relative_error
from .optim import TrainRun, train_adam, train_lm
from .policy import MlpArch, evaluate, param_count
from .policy import init as policy_init
from .smooth import rational_sigmoid, smooth_max, smooth_min, smooth_relu

R_GAS = 8.314
CQA_NAMES = ("conversion", "yield", "mean_size", "cake_moisture", "drying_loss")
CPP_NAMES = ("jacket_temperature", "cooling_rate", "pressure_drop", "gas_temperature")
N_FEATURES = 8


@dataclass(frozen=True)
class CstrSpec:
    Ea: float = 50_000.0  # J/mol
    A: float = 1.5e10  # 1/h
    feed_concentration: float = 120.0  # kg/m3
    jacket_temperature: float = 300.0  # K
    residence_time: float = 0.05  # h
    duration: float = 0.5  # h


@dataclass(frozen=True)
class CrystallizerSpec:
    k_b: float = 50.0  # 1e9 / (m3 h)
    b: float = 2.0
    k_g: float = 300.0  # um / h
    g: float = 1.0
    solubility: tuple[float, float, float] = (20.0, 0.8, 0.02)  # kg/m3 vs deg C
    alpha: float = 7e-7  # kg per (1e9 crystals um^3): density x volume shape factor
    seed_count: float = 1.0  # 1e9 / m3
    seed_size: float = 50.0  # um
    start_temperature: float = 333.15  # K
    min_temperature: float = 278.15  # K
    cooling_rate: float = 0.3  # K/min, nominal
    duration: float = 3.0  # h


@dataclass(frozen=True)
class FilterSpec:
    pressure_drop: float = 2e5  # Pa
    flow_constant: float = 1.5e-5  # m3 / (h Pa) at unit resistance
    medium_resistance: float = 1.0
    cake_resistance: float = 0.17  # per kg/m3 of cake at the reference size
    reference_size: float = 100.0  # um
    liquor_volume: float = 1.0  # m3
    residual_moisture: float = 0.15
    free_moisture: float = 1.0
    duration: float = 0.5  # h


@dataclass(frozen=True)
class DryerSpec:
    gas_temperature: float = 333.15  # K, set point
    trim: float = 15.0  # K, controller authority around the set point
    reference_temperature: float = 293.15  # K
    rate_constant: float = 0.06  # 1 / (K h)
    critical_moisture: float = 0.1
    duration: float = 2.0  # h


@dataclass(frozen=True)
class ObjectiveSpec:
    size_target: float = 80.0  # um
    size_weight: float = 1.0
    lod_limit: float = 0.005
    lod_weight: float = 0.01
    heat_cost: float = 2e-4  # per K h of excess gas temperature
    k: float = 50.0


@dataclass(frozen=True)
class ChainSpec:
    cstr: CstrSpec = field(default_factory=CstrSpec)
    crystallizer: CrystallizerSpec = field(default_factory=CrystallizerSpec)
    filter: FilterSpec = field(default_factory=FilterSpec)
    dryer: DryerSpec = field(default_factory=DryerSpec)
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    euler_steps: int = 1500
    phase_split: tuple[int, int, int, int] = (300, 600, 200, 400)  # at 1500 steps
    control_interval: float = 0.05  # h between controller evaluations
    action_sharpness: float = 1.0

    def __post_init__(self):
        if self.euler_steps < 100:
            raise ValueError("euler_steps must be >= 100")
        positives = [
            self.cstr.Ea,
            self.cstr.residence_time,
            self.cstr.duration,
            self.cstr.jacket_temperature,
            self.crystallizer.k_g,
            self.crystallizer.cooling_rate,
            self.crystallizer.duration,
            self.crystallizer.min_temperature,
            self.filter.pressure_drop,
            self.filter.duration,
            self.dryer.gas_temperature,
            self.dryer.rate_constant,
            self.dryer.duration,
            self.dryer.critical_moisture,
            self.control_interval,
        ]
        if min(positives) <= 0 or self.cstr.A < 0 or self.crystallizer.k_b < 0:
            raise ValueError("rate constants, times and temperatures must be positive")

    def phase_steps(self) -> tuple[int, int, int, int]:
        tot = sum(self.phase_split)
        n = [max(1, round(self.euler_steps * p / tot)) for p in self.phase_split]
        n[-1] = self.euler_steps - sum(n[:-1])
        return tuple(n)

    def base_cpps(self) -> np.ndarray:
        return np.array(
            [
                self.cstr.jacket_temperature,
                self.crystallizer.cooling_rate,
                self.filter.pressure_drop,
                self.dryer.gas_temperature,
            ]
        )

    def with_steps(self, n: int) -> ChainSpec:
        return replace(self, euler_steps=n)


def pharma_arch() -> MlpArch:
    return MlpArch((N_FEATURES, 6, 2))


@dataclass(frozen=True)
class SpecTargets:
    targets: tuple[float, ...]
    scales: tuple[float, ...]

    def __post_init__(self):
        if len(self.targets) != 5 or len(self.scales) != 5:
            raise ValueError("targets and scales must have length 5")
        if min(self.scales) <= 0:
            raise ValueError("scales must be positive")


# conversion is fixed by the jacket temperature, so its residual is an irreducible floor
DEFAULT_TARGETS = SpecTargets((0.9, 0.45, 90.0, 0.25, 0.004), (0.05, 0.05, 10.0, 0.05, 0.002))


def _solubility(coef, T):
    tc = T - 273.15
    return coef[0] + coef[1] * tc + coef[2] * (tc * tc)


def _pad_gain(extra, j: int) -> float:
    # padded CPPs enter as small relative trims on four unit constants
    return 1e-3 * (1 + (j % 3))


def make_pharma_builder(spec: ChainSpec, arch: MlpArch | None, n_extra: int = 0, targets: SpecTargets | None = None, fixed_controls=None):
    """Builder ``(cpps, params, randoms) -> [5 CQAs, J, (5 residuals, loss)]``.

    ``fixed_controls`` = (u1, u2) holds raw controller outputs constant instead
    of evaluating the policy. ``n_extra`` padded CPPs follow the four real ones.
    """
    cs, cr, fl, dr, ob = spec.cstr, spec.crystallizer, spec.filter, spec.dryer, spec.objective
    n1, n2, n3, n4 = spec.phase_steps()
    dt1, dt2, dt3, dt4 = cs.duration / n1, cr.duration / n2, fl.duration / n3, dr.duration / n4
    every2 = max(1, round(spec.control_interval / dt2))
    every4 = max(1, round(spec.control_interval / dt4))
    ks = spec.action_sharpness
    k = ob.k
    T_span = cr.start_temperature - cr.min_temperature

    def controller(params, feats):
        if fixed_controls is not None:
            return fixed_controls
        return evaluate(params, arch, feats)

    def builder(x, params, randoms):
        T_j, cool_nom, dP, T_gas_set = x[0], x[1], x[2], x[3]
        trims = [1.0, 1.0, 1.0, 1.0]
        for j in range(n_extra):
            trims[j % 4] = trims[j % 4] + x[4 + j] * _pad_gain(x, j)

        # CSTR
        kr = cs.A * tp.exp(-cs.Ea / (R_GAS * T_j))
        C, P = cs.feed_concentration, 0.0
        for _ in range(n1):
            rxn = kr * C
            C, P = C + dt1 * ((cs.feed_concentration - C) / cs.residence_time - rxn), P + dt1 * (rxn - P / cs.residence_time)
        conversion = P / cs.feed_concentration

        # crystallizer
        c0 = P
        c0_safe = c0 + 1e-9  # keeps the zero-conversion limit finite
        c = c0
        T = cr.start_temperature
        m0 = cr.seed_count
        m1 = m0 * cr.seed_size
        m2 = m1 * cr.seed_size
        m3 = m2 * cr.seed_size
        k_g = cr.k_g * trims[0]
        k_b = cr.k_b * trims[1]
        rate = 0.0
        for i in range(n2):
            sat = _solubility(cr.solubility, T)
            ss = smooth_relu((c - sat) / sat, k)
            if i % every2 == 0:
                feats = [
                    (T - cr.min_temperature) / T_span,
                    c / cs.feed_concentration,
                    ss,
                    (m1 / m0) / 100.0,
                    (c0 - c) / c0_safe,
                    1.0,
                    0.0,
                    i / n2,
                ]
                u = controller(params, feats)
                rate = cool_nom * 60.0 * (2.0 * rational_sigmoid(u[0], ks))
            G = k_g * ss**cr.g
            B = k_b * ss**cr.b
            c, m0, m1, m2, m3 = (
                c - dt2 * 3.0 * cr.alpha * G * m2,
                m0 + dt2 * B,
                m1 + dt2 * G * m0,
                m2 + dt2 * 2.0 * G * m1,
                m3 + dt2 * 3.0 * G * m2,
            )
            T = smooth_max(T - dt2 * rate, cr.min_temperature, k)
        yield_ = (c0 - c) / c0_safe
        size = m1 / m0
        mass = cr.alpha * (m3 - cr.seed_count * cr.seed_size**3)

        # filter
        rel = fl.reference_size / size
        alpha_c = fl.cake_resistance * trims[2] * (rel * rel)
        V = 0.0
        for _ in range(n3):
            V = V + dt3 * (dP * fl.flow_constant) / (fl.medium_resistance + alpha_c * mass * V)
        moisture = fl.residual_moisture * rel**0.5 + fl.free_moisture * tp.exp(-3.0 * V / fl.liquor_volume)

        # dryer
        X = moisture
        Xc = dr.critical_moisture
        kd = dr.rate_constant * trims[3]
        heat = 0.0
        T_gas = T_gas_set
        for i in range(n4):
            if i % every4 == 0:
                feats = [0.0, c / cs.feed_concentration, 0.0, size / 100.0, yield_, X / moisture, 1.0, i / n4]
                u = controller(params, feats)
                T_gas = T_gas_set + dr.trim * (2.0 * rational_sigmoid(u[1], ks) - 1.0)
            X = X - dt4 * kd * (T_gas - dr.reference_temperature) * (smooth_min(X / Xc, 1.0, k) * Xc)
            heat = heat + dt4 * (T_gas - dr.reference_temperature)
        lod = X / (1.0 + X)

        short = smooth_relu((ob.size_target - size) / ob.size_target, k)
        over = smooth_relu((lod - ob.lod_limit) / ob.lod_limit, k)
        J = yield_ - ob.size_weight * (short * short) - ob.lod_weight * (over * over) - ob.heat_cost * heat
        cqas = [conversion, yield_, size, moisture, lod]
        out = cqas + [J]
        if targets is not None:
            res = [(q - t) / s for q, t, s in zip(cqas, targets.targets, targets.scales)]
            out = out + res + [tp.total(r * r for r in res)]
        return out

    return builder


def build_pharma_kernel(
    spec: ChainSpec,
    arch: MlpArch | None = None,
    n_extra_cpps: int = 0,
    targets: SpecTargets | None = None,
    fixed_controls=None,
) -> DomainKernel:
    if arch is None and fixed_controls is None:
        arch = pharma_arch()
    if arch is not None and (arch.n_inputs != N_FEATURES or arch.n_outputs != 2):
        raise ValueError("pharma controller must map 8 features to 2 outputs")
    builder = make_pharma_builder(spec, arch, n_extra_cpps, targets, fixed_controls)
    n_params = 0 if fixed_controls is not None else param_count(arch)
    tape = tp.record(builder, 4 + n_extra_cpps, n_params, 0)
    names = list(CQA_NAMES) + ["J"]
    if targets is not None:
        names += [f"r_{n}" for n in CQA_NAMES] + ["loss"]
    return DomainKernel(
        name="pharma",
        tape=tape,
        builder=builder,
        arch=None if fixed_controls is not None else arch,
        inputs=np.concatenate([spec.base_cpps(), np.zeros(n_extra_cpps)]),
        input_names=list(CPP_NAMES) + [f"pad_{j}" for j in range(n_extra_cpps)],
        randoms=np.zeros(0),
        output_names=names,
        objective=5,
        meta={"spec": spec, "targets": targets, "n_extra": n_extra_cpps},
    )


def cpp_bumps(x0, rel: float = 1e-4) -> np.ndarray:
    return rel * np.maximum(np.abs(np.asarray(x0, dtype=float)), 1.0)


def ichq8_jacobian(kernel: DomainKernel, params, with_fd: bool = True):
    """5x4 dCQA/dCPP from one forward + five reverse replays; optional FD oracle."""
    params = np.zeros(0) if params is None else params
    _, jin, _ = tp.jacobian(kernel.tape, kernel.inputs, params, kernel.randoms, rows=range(5))
    adj = jin[:, :4].copy()
    fd = None
    if with_fd:
        ws = kernel.workspace()
        fd = np.empty((5, 4))
        h = cpp_bumps(kernel.inputs[:4])
        for j in range(4):
            xp, xm = kernel.inputs.copy(), kernel.inputs.copy()
            xp[j] += h[j]
            xm[j] -= h[j]
            fd[:, j] = (kernel.evaluate(params, inputs=xp, ws=ws)[:5] - kernel.evaluate(params, inputs=xm, ws=ws)[:5]) / (2 * h[j])
    return adj, fd


def jacobian_rel_err(adj, fd, small: float = 1e-6, abs_tol: float = 1e-8) -> np.ndarray:
    """Relative error per entry; entries with |fd| < ``small`` are scored as abs/abs_tol*1e-3."""
    adj, fd = np.asarray(adj), np.asarray(fd)
    rel = relative_error(adj, fd)
    tiny = np.abs(fd) < small
    rel[tiny] = np.abs(adj - fd)[tiny] / abs_tol * 1e-3
    return rel


def write_ichq8_csv(adj, fd, path, comment: str | None = None) -> None:
    rel = jacobian_rel_err(adj, fd) if fd is not None else np.full_like(adj, np.nan)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["cqa", "cpp", "adjoint", "fd", "rel_err"])
        for i, q in enumerate(CQA_NAMES):
            for j, p in enumerate(CPP_NAMES):
                w.writerow([q, p, repr(float(adj[i, j])), repr(float(fd[i, j])) if fd is not None else "nan", repr(float(rel[i, j]))])


def spec_targeting_residuals(cqas, targets: SpecTargets) -> np.ndarray:
    cqas = np.asarray(cqas, dtype=float)[:5]
    return (cqas - np.asarray(targets.targets)) / np.asarray(targets.scales)


def loss_gradient_by_cqa_seeds(kernel: DomainKernel, params, targets: SpecTargets) -> np.ndarray:
    """Parameter gradient of sum r_i^2 with one reverse seeded s_i = 2 r_i / scale_i on the CQA outputs."""
    ws = kernel.workspace()
    out = tp.forward(kernel.tape, kernel.inputs, params, kernel.randoms, ws)
    r = spec_targeting_residuals(out, targets)
    seeds = np.zeros(kernel.tape.n_outputs)
    seeds[:5] = 2.0 * r / np.asarray(targets.scales)
    return tp.reverse(kernel.tape, seeds, ws).param_grads.copy()


def step_halving_drift(spec: ChainSpec, params, arch: MlpArch | None = None) -> np.ndarray:
    """Relative change of each CQA when the Euler step count doubles (plain evaluation)."""
    arch = arch or pharma_arch()
    a = np.array(make_pharma_builder(spec, arch)(list(spec.base_cpps()), list(params), [])[:5])
    b = np.array(make_pharma_builder(spec.with_steps(2 * spec.euler_steps), arch)(list(spec.base_cpps()), list(params), [])[:5])
    return np.abs(b - a) / np.abs(a)


def hard_trajectory(spec: ChainSpec, params, arch: MlpArch | None = None) -> dict:
    """Numpy replay with exact clamps; returns per-step CSTR mass balance and CQAs."""
    arch = arch or pharma_arch()
    cs = spec.cstr
    n1 = spec.phase_steps()[0]
    dt1 = cs.duration / n1
    kr = cs.A * math.exp(-cs.Ea / (R_GAS * cs.jacket_temperature))
    C, P = cs.feed_concentration, 0.0
    balance = np.empty(n1)
    for i in range(n1):
        rxn = kr * C
        C, P = C + dt1 * ((cs.feed_concentration - C) / cs.residence_time - rxn), P + dt1 * (rxn - P / cs.residence_time)
        balance[i] = cs.feed_concentration - (C + P)
    cqas = np.array(make_pharma_builder(spec, arch)(list(spec.base_cpps()), list(params), [])[:5])
    return {"balance": balance, "cqas": cqas}


def crossover_study(spec: ChainSpec, params, cpp_counts=(4, 8, 16, 32), reps: int = 7) -> list[dict]:
    """Rows (n_cpps, fd_ms, adjoint_ms): 2n forwards vs one forward + five reverses."""
    rows = []
    arch = pharma_arch()
    for n in cpp_counts:
        if n < 4:
            raise ValueError("at least the four physical CPPs are required")
        ker = build_pharma_kernel(spec, arch, n_extra_cpps=n - 4)
        ws = ker.workspace()
        x0 = ker.inputs
        h = cpp_bumps(x0)

        def fd():
            for j in range(n):
                xp, xm = x0.copy(), x0.copy()
                xp[j] += h[j]
                xm[j] -= h[j]
                ker.evaluate(params, inputs=xp, ws=ws)
                ker.evaluate(params, inputs=xm, ws=ws)

        def adj():
            tp.jacobian(ker.tape, x0, params, ker.randoms, range(5), ws)

        rows.append({"n_cpps": n, "fd_ms": _median_ms(fd, reps), "adjoint_ms": _median_ms(adj, reps)})
    return rows


def crossover_point(rows: list[dict]) -> float:
    """Smallest CPP count where FD becomes slower, by linear fit of fd_ms in n."""
    n = np.array([r["n_cpps"] for r in rows], dtype=float)
    fd = np.array([r["fd_ms"] for r in rows])
    adj = np.median([r["adjoint_ms"] for r in rows])
    slope, icpt = np.polyfit(n, fd, 1)
    return float((adj - icpt) / slope)


def write_crossover_csv(rows, path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["n_cpps", "fd_ms", "adjoint_ms"])
        for r in rows:
            w.writerow([r["n_cpps"], f"{r['fd_ms']:.4f}", f"{r['adjoint_ms']:.4f}"])


def _median_ms(fn, reps: int) -> float:
    fn()
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(ts))


@dataclass
class PharmaConfig:
    """Desk defaults; the full-scale chain uses 9300 Euler steps and K=500."""

    iterations: int = 300
    lr: float = 0.005
    spec: ChainSpec = field(default_factory=ChainSpec)
    adam_iterations_lm: int = 500
    lm_max_iterations: int = 100


def train_pharma(cfg: PharmaConfig, seed: int, kernel: DomainKernel | None = None) -> tuple[DomainKernel, TrainRun]:
    kernel = kernel or build_pharma_kernel(cfg.spec)
    init = policy_init(kernel.arch, seed).flat
    return kernel, train_adam(kernel, init, cfg.iterations, lr=cfg.lr, seed=seed)


def lm_vs_adam(cfg: PharmaConfig, seeds, targets: SpecTargets = DEFAULT_TARGETS, kernel: DomainKernel | None = None) -> list[dict]:
    """Spec-targeting from identical inits: Adam (fixed K) vs LM on the 5 residual rows."""
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("need at least three seeds")
    ker = kernel or build_pharma_kernel(cfg.spec, targets=targets)
    loss_view = replace(ker, objective=len(ker.output_names) - 1)
    rows = []
    res_rows = list(range(6, 11))
    for s in seeds:
        init = policy_init(ker.arch, s).flat
        t0 = time.perf_counter()
        adam = train_adam(loss_view, init.copy(), cfg.adam_iterations_lm, lr=cfg.lr, seed=s, maximize=False)
        adam_ms = (time.perf_counter() - t0) * 1e3
        t0 = time.perf_counter()
        lm = train_lm(ker, init.copy(), res_rows, max_iterations=cfg.lm_max_iterations, seed=s)
        lm_ms = (time.perf_counter() - t0) * 1e3
        adam_res = float(np.linalg.norm(ker.evaluate(adam.params)[res_rows]))
        lm_res = float(np.linalg.norm(ker.evaluate(lm.params)[res_rows]))
        rows.append(
            {
                "seed": s,
                "init_hash": hash(init.tobytes()),
                "adam_residual": adam_res,
                "lm_residual": lm_res,
                "adam_iterations": adam.iterations,
                "lm_iterations": lm.iterations,
                "adam_ms": adam_ms,
                "lm_ms": lm_ms,
                "lm_exit": lm.exit_reason,
            }
        )
    return rows


def write_lm_csv(rows, path, comment: str | None = None) -> None:
    cols = ["seed", "adam_residual", "lm_residual", "adam_iterations", "lm_iterations", "adam_ms", "lm_ms", "lm_exit"]
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])


def central_cpp_fd(kernel: DomainKernel, params, output: int) -> np.ndarray:
    ws = kernel.workspace()
    x0 = kernel.inputs
    return central_fd(lambda x: kernel.evaluate(params, inputs=x, ws=ws)[output], x0, range(len(x0)), cpp_bumps(x0))
