"""Command-line runner: training, sensitivities, validation and benchmark reports.

Exit codes::

    0  success
    2  configuration or argument error
    3  objective became non-finite during training
    4  policy file missing
    5  validation failed (failed checks are named on stderr and in the report)

Configuration files are plain ``key = value`` text with ``[section]`` headers.
Keys before any header belong to ``[run]`` (domain, seed, paths, iterations,
lr, k, desk, out_dir); ``[gas]``, ``[alm]`` and ``[pharma]`` sections override
fields of the matching domain configuration (dotted names reach nested specs,
e.g. ``spec.capacity`` or ``cstr.Ea``). Command-line flags override the file.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import math
import sys
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import bench_suite as bs
from . import sim_alm, sim_gas, sim_pharma
from .kernel import DomainKernel, SensitivityReport, central_fd, relative_error
from .optim import NonFiniteObjectiveError
from .policy import PolicyParams, load_csv, save_csv
from .rng import stream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_MISSING_POLICY = 4
EXIT_VALIDATION = 5

DOMAINS = ("gas", "alm", "pharma", "bench")
MIRROR_THRESHOLD = 1e-12
FD_THRESHOLD = 1e-3


class ConfigError(ValueError):
    pass


# full-scale (paths, iterations) per domain; desk values come from the domain configs
FULL_SCALE = {"gas": (256, 1000), "alm": (2048, 500), "pharma": (1, 500), "bench": (8, 200)}
DESK = {"gas": (64, 300), "alm": (256, 300), "pharma": (1, 500), "bench": (8, 200)}
DEFAULT_LR = {"gas": 0.005, "alm": 0.005, "pharma": 0.005, "bench": 0.05}


@dataclass
class ExperimentConfig:
    domain: str
    seed: int = 0
    paths: int | None = None
    iterations: int | None = None
    lr: float | None = None
    k: float | None = None
    desk: bool = True
    out_dir: Path = Path("runs")
    section: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        table = DESK if self.desk else FULL_SCALE
        if self.paths is None:
            self.paths = table[self.domain][0]
        if self.iterations is None:
            self.iterations = table[self.domain][1]
        if self.lr is None:
            self.lr = DEFAULT_LR[self.domain]
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.paths < 1:
            raise ConfigError("paths must be >= 1")
        if self.k is not None and not self.k > 0:
            raise ConfigError("sharpness k must be positive")
        self.out_dir = Path(self.out_dir)

    def echo(self, **extra) -> str:
        items = {
            "domain": self.domain,
            "seed": self.seed,
            "paths": self.paths,
            "iterations": self.iterations,
            "lr": self.lr,
            "k": self.k,
            "desk": int(self.desk),
        }
        items.update(self.section)
        items.update(extra)
        return "config: " + " ".join(f"{k}={v}" for k, v in items.items())


def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(type(like[0])(v) for v in text.replace(",", " ").split()) if like else tuple(float(v) for v in text.split(","))
    return text


def _override(obj, dotted: str, text: str):
    head, _, rest = dotted.partition(".")
    if not dataclasses.is_dataclass(obj) or head not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown setting {dotted!r} for {type(obj).__name__}")
    cur = getattr(obj, head)
    try:
        new = _override(cur, rest, text) if rest else _coerce(text, cur)
        return replace(obj, **{head: new})
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"bad value for {dotted}: {e}") from e


def read_config_file(path) -> tuple[dict, dict]:
    """Return ([run] settings, domain-section settings keyed by section name)."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {p}: {e}") from e
    run = dict(cp["run"]) if cp.has_section("run") else {}
    sections = {s: dict(cp[s]) for s in cp.sections() if s != "run"}
    unknown = set(sections) - {"gas", "alm", "pharma", "bench"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    return run, sections


def build_config(args) -> ExperimentConfig:
    run: dict = {}
    sections: dict = {}
    if getattr(args, "config", None):
        run, sections = read_config_file(args.config)
    try:
        domain = getattr(args, "domain", None) or run.get("domain")
        if domain is None:
            raise ConfigError("domain is required")
        kw = {
            "seed": int(run["seed"]) if "seed" in run else 0,
            "paths": int(run["paths"]) if "paths" in run else None,
            "iterations": int(run["iterations"]) if "iterations" in run else None,
            "lr": float(run["lr"]) if "lr" in run else None,
            "k": float(run["k"]) if "k" in run else None,
            "desk": _coerce(run["desk"], True) if "desk" in run else True,
            "out_dir": Path(run.get("out_dir", "runs")),
        }
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    extra = set(run) - {"domain", "seed", "paths", "iterations", "lr", "k", "desk", "out_dir"}
    if extra:
        raise ConfigError(f"unknown run settings {sorted(extra)}")
    for name in ("seed", "paths", "iterations", "lr", "k"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    if getattr(args, "full_scale", False):
        kw["desk"] = False
    if getattr(args, "out", None):
        kw["out_dir"] = Path(args.out)
    return ExperimentConfig(domain=domain, section=sections.get(domain, {}), **kw)


def domain_config(cfg: ExperimentConfig):
    """Domain configuration object with desk/full defaults, file overrides and run settings applied."""
    if cfg.domain == "gas":
        d = sim_gas.GasConfig() if cfg.desk else sim_gas.GasConfig.full_scale()
        d = replace(d, n_paths=cfg.paths, iterations=cfg.iterations, lr=cfg.lr)
        if cfg.k is not None:
            d = replace(d, spec=replace(d.spec, k=cfg.k))
    elif cfg.domain == "alm":
        d = sim_alm.AlmConfig() if cfg.desk else sim_alm.AlmConfig.full_scale()
        d = replace(d, n_scenarios=cfg.paths, iterations=cfg.iterations, lr=cfg.lr)
        if cfg.k is not None:
            d = replace(d, fund=replace(d.fund, k=cfg.k))
    elif cfg.domain == "pharma":
        spec = sim_pharma.ChainSpec() if cfg.desk else sim_pharma.ChainSpec(euler_steps=9300)
        if cfg.k is not None:
            spec = replace(spec, objective=replace(spec.objective, k=cfg.k))
        d = sim_pharma.PharmaConfig(iterations=cfg.iterations, lr=cfg.lr, spec=spec)
    else:
        d = bs.CartPoleSpec() if cfg.k is None else bs.CartPoleSpec(sharpness=cfg.k)
    for key, text in cfg.section.items():
        if cfg.domain == "pharma" and not key.startswith("spec.") and key not in {f.name for f in dataclasses.fields(d)}:
            key = "spec." + key
        d = _override(d, key, text)
    return d


def build_kernel(cfg: ExperimentConfig, dcfg=None) -> DomainKernel:
    dcfg = dcfg or domain_config(cfg)
    if cfg.domain == "gas":
        return sim_gas.build_gas_kernel(dcfg.spec, dcfg.market, dcfg.curve(), dcfg.n_paths, dcfg.T, dcfg.arch(), seed=dcfg.train_seed)
    if cfg.domain == "alm":
        return sim_alm.build_alm_kernel(dcfg.market, dcfg.fund, dcfg.n_scenarios, dcfg.arch(), seed=dcfg.train_seed)
    if cfg.domain == "pharma":
        return sim_pharma.build_pharma_kernel(dcfg.spec)
    return bs.build_cartpole_kernel(dcfg, n_init=cfg.paths)


def train_domain(cfg: ExperimentConfig, kernel: DomainKernel | None = None):
    """Train one policy; returns (kernel, params, records-table)."""
    dcfg = domain_config(cfg)
    if cfg.domain == "gas":
        gr = sim_gas.train_gas(dcfg, cfg.seed, kernel=kernel)
        return gr.kernel, gr.run.params, gr.run
    if cfg.domain == "alm":
        ker, run = sim_alm.train_alm(dcfg, cfg.seed, kernel=kernel)
        return ker, run.params, run
    if cfg.domain == "pharma":
        ker, run = sim_pharma.train_pharma(dcfg, cfg.seed, kernel=kernel)
        return ker, run.params, run
    ker = kernel or build_kernel(cfg, dcfg)
    res = bs.cartpole_train(dcfg, epochs=cfg.iterations, inits_per_epoch=cfg.paths, lr=cfg.lr, seed=cfg.seed, kernel=ker)
    return ker, res.params, res


# ---------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    domain: str
    mirror_max_rel_err: float | None = None
    adjoint_vs_fd_max_rel_err: float | None = None
    cross_validation_pass: bool | None = None
    cross_validation_detail: str = ""
    mirror_threshold: float = MIRROR_THRESHOLD
    fd_threshold: float = FD_THRESHOLD
    wall_s: float = 0.0

    @property
    def complete(self) -> bool:
        return None not in (self.mirror_max_rel_err, self.adjoint_vs_fd_max_rel_err, self.cross_validation_pass)

    def failed_checks(self) -> list[str]:
        failed = []
        if self.mirror_max_rel_err is None or not self.mirror_max_rel_err < self.mirror_threshold:
            failed.append("mirror")
        if self.adjoint_vs_fd_max_rel_err is None or not self.adjoint_vs_fd_max_rel_err < self.fd_threshold:
            failed.append("adjoint_vs_fd")
        if not self.cross_validation_pass:
            failed.append("cross_validation")
        return failed

    @property
    def passed(self) -> bool:
        return self.complete and not self.failed_checks()

    def to_text(self) -> str:
        lines = [
            f"domain = {self.domain}",
            f"complete = {int(self.complete)}",
            f"mirror_max_rel_err = {self.mirror_max_rel_err!r}",
            f"mirror_threshold = {self.mirror_threshold!r}",
            f"adjoint_vs_fd_max_rel_err = {self.adjoint_vs_fd_max_rel_err!r}",
            f"fd_threshold = {self.fd_threshold!r}",
            f"cross_validation = {'pass' if self.cross_validation_pass else 'fail'}",
            f"cross_validation_detail = {self.cross_validation_detail}",
            f"failed_checks = {','.join(self.failed_checks())}",
            f"wall_s = {self.wall_s:.2f}",
        ]
        return "\n".join(lines) + "\n"


def input_bumps(x) -> np.ndarray:
    # small relative steps: smooth penalty bends can be narrow in physical units
    return 1e-6 * np.maximum(np.abs(np.asarray(x, dtype=float)), 1.0)


def adjoint_vs_fd(kernel: DomainKernel, params, n_directions: int = 50, seed: int = 0, param_step: float = 1e-4) -> dict:
    """Max relative error of the adjoint against central FD.

    Covers every exposed input slot and ``n_directions`` random unit
    directions in parameter space. Directional errors are measured relative
    to max(|FD|, 1e-3 * |grad|) so near-orthogonal directions stay meaningful.
    """
    ws = kernel.workspace()
    _, res = kernel.value_and_grad(params, ws=ws)
    g_in = res.input_grads.copy()
    g_p = res.param_grads.copy()
    x0 = kernel.inputs
    fd_in = central_fd(lambda x: kernel.value(params, inputs=x, ws=ws), x0, range(len(x0)), input_bumps(x0))
    in_floor = 1e-8 * max(1.0, float(np.max(np.abs(fd_in)))) if len(x0) else 0.0
    err_in = relative_error(g_in, fd_in, in_floor) if len(x0) else np.zeros(0)
    gen = stream(seed, "validate-directions")
    err_dir = np.zeros(n_directions)
    gnorm = float(np.linalg.norm(g_p))
    for i in range(n_directions):
        d = gen.standard_normal(len(params))
        d /= np.linalg.norm(d)
        fp = kernel.value(params + param_step * d, ws=ws)
        fm = kernel.value(params - param_step * d, ws=ws)
        fd = (fp - fm) / (2 * param_step)
        err_dir[i] = relative_error([g_p @ d], [fd], 1e-3 * gnorm)[0]
    return {
        "inputs": float(err_in.max()) if len(err_in) else 0.0,
        "directions": float(err_dir.max()) if n_directions else 0.0,
        "max": float(max(err_in.max() if len(err_in) else 0.0, err_dir.max() if n_directions else 0.0)),
    }


def _cross_validate(cfg: ExperimentConfig, dcfg, kernel: DomainKernel, params) -> tuple[bool, str]:
    if cfg.domain == "gas":
        det = sim_gas.train_gas(dcfg, cfg.seed, deterministic=True)
        curve = dcfg.curve()
        hard = sim_gas.evaluate_hard(det.run.params, dcfg.spec, sim_gas.deterministic_paths(curve, dcfg.T), det.kernel.arch)
        dp, _ = sim_gas.dp_solve(dcfg.spec, curve.daily(dcfg.T), dcfg.n_levels)
        ratio = hard / dp
        ok = 0.8 * dp <= hard <= dp * (1 + 1e-12)
        return ok, f"hard={hard:.4f} dp={dp:.4f} ratio={ratio:.4f} (need 0.8..1.0)"
    if cfg.domain == "alm":
        scen = sim_alm.draw_scenarios(dcfg.market, dcfg.n_scenarios, dcfg.fund.horizon_months, dcfg.eval_seed)
        rows = sim_alm.compare_with_statics(dcfg, params, scen)
        pol = rows[0]["mean"]
        best = max(rows[1:], key=lambda r: r["mean"])
        return pol >= best["mean"], f"policy_mean={pol:.4f} best_static={best['strategy']}:{best['mean']:.4f}"
    if cfg.domain == "pharma":
        drift = sim_pharma.step_halving_drift(dcfg.spec, params)
        adj, _ = sim_pharma.ichq8_jacobian(kernel, params, with_fd=False)
        ok = bool(np.all(drift < 0.01)) and adj[0, 0] > 0
        return ok, f"max_step_halving_drift={drift.max():.5f} dconversion_djacket={adj[0, 0]:.4e}"
    raise ConfigError("validation is defined for gas, alm and pharma")


def validate_domain(
    cfg: ExperimentConfig,
    params=None,
    mirror_threshold: float = MIRROR_THRESHOLD,
    fd_threshold: float = FD_THRESHOLD,
    n_directions: int = 50,
) -> ValidationReport:
    """Run mirror, adjoint-vs-FD and domain cross-validation on a (trained) desk kernel."""
    t0 = time.perf_counter()
    rep = ValidationReport(cfg.domain, mirror_threshold=mirror_threshold, fd_threshold=fd_threshold)
    dcfg = domain_config(cfg)
    if params is None:
        kernel, params, _ = train_domain(cfg)
    else:
        kernel = build_kernel(cfg, dcfg)
    rep.mirror_max_rel_err = kernel.mirror(params)
    rep.adjoint_vs_fd_max_rel_err = adjoint_vs_fd(kernel, params, n_directions, cfg.seed)["max"]
    rep.cross_validation_pass, rep.cross_validation_detail = _cross_validate(cfg, dcfg, kernel, params)
    rep.wall_s = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------- commands


def _utc_stamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")


def fresh_path(directory: Path, prefix: str) -> Path:
    """UTC-stamped CSV path that never collides with an existing file."""
    directory.mkdir(parents=True, exist_ok=True)
    p = directory / f"{prefix}_{_utc_stamp()}.csv"
    n = 1
    while p.exists():
        p = directory / f"{prefix}_{_utc_stamp()}_{n}.csv"
        n += 1
    return p


def cmd_train(args) -> int:
    cfg = build_config(args)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    stem = cfg.out_dir / f"{cfg.domain}_seed{cfg.seed}"
    kernel, params, run = train_domain(cfg)
    if cfg.domain == "bench":
        bs.write_rl_csv([run], f"{stem}_train.csv", comment=cfg.echo())
    else:
        run.to_csv(f"{stem}_train.csv", comment=cfg.echo())
    save_csv(PolicyParams(kernel.arch, params), f"{stem}_policy.txt")
    print(f"wrote {stem}_train.csv and {stem}_policy.txt")
    return EXIT_OK


def _load_policy(path, kernel: DomainKernel) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    pol = load_csv(p)
    if pol.arch != kernel.arch:
        raise ConfigError(f"policy architecture {pol.arch.descriptor()} does not match {kernel.arch.descriptor()}")
    return pol.flat


def cmd_greeks(args) -> int:
    cfg = build_config(args)
    if not Path(args.policy).exists():
        print(f"policy file not found: {args.policy}", file=sys.stderr)
        return EXIT_MISSING_POLICY
    if cfg.domain == "bench":
        raise ConfigError("greeks are defined for gas, alm and pharma")
    dcfg = domain_config(cfg)
    kernel = build_kernel(cfg, dcfg)
    params = _load_policy(args.policy, kernel)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / f"{cfg.domain}_greeks.csv"
    if cfg.domain == "gas":
        sim_gas.greeks(kernel, params).to_csv(out, name_col="pillar", comment=cfg.echo())
    elif cfg.domain == "alm":
        adj = sim_alm.risk_sensitivities(kernel, params)
        bump = sim_alm.bump_and_revalue(kernel, params)
        SensitivityReport(adj.names, adj.adjoint, bump.report.adjoint, label="sensitivity").to_csv(out, name_col="factor", comment=cfg.echo())
    else:
        adj, fd = sim_pharma.ichq8_jacobian(kernel, params)
        sim_pharma.write_ichq8_csv(adj, fd, out, comment=cfg.echo())
    print(f"wrote {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    domains = ["gas", "alm", "pharma"] if args.domain == "all" else [args.domain]
    failed = []
    for d in domains:
        args.domain = d
        cfg = build_config(args)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        params = None
        if args.policy:
            if not Path(args.policy).exists():
                print(f"policy file not found: {args.policy}", file=sys.stderr)
                return EXIT_MISSING_POLICY
            params = _load_policy(args.policy, build_kernel(cfg))
        path = cfg.out_dir / f"validation_{d}.txt"
        rep = ValidationReport(d, mirror_threshold=args.mirror_threshold, fd_threshold=args.fd_threshold)
        try:
            rep = validate_domain(cfg, params, args.mirror_threshold, args.fd_threshold, args.directions)
        finally:
            path.write_text(rep.to_text())
        status = "PASS" if rep.passed else "FAIL"
        print(f"{d}: {status} mirror={rep.mirror_max_rel_err:.3e} fd={rep.adjoint_vs_fd_max_rel_err:.3e} xval={rep.cross_validation_detail}")
        if not rep.passed:
            failed.append(f"{d}:{'+'.join(rep.failed_checks())}")
    if failed:
        print("validation failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_bench(args) -> int:
    out = Path(args.out or "runs")
    seeds = list(range(args.seeds))
    echo = f"config: suite={args.suite} seeds={args.seeds} budget={args.budget} dims={args.dims}"
    if args.suite == "cec":
        traces = []
        keys = args.functions.split(",") if args.functions else list(bs.FUNCTIONS)
        for D in args.dims:
            for key in keys:
                f = bs.get_function(key)
                for s in seeds:
                    traces.append(bs.adam_on_adjoint(f, D, args.budget, s))
                    traces.append(bs.differential_evolution(f, D, args.budget, s))
        path = fresh_path(out, "cec")
        bs.write_results_csv(traces, path, comment=echo)
    elif args.suite == "cartpole":
        spec = bs.CartPoleSpec()
        ker = bs.build_cartpole_kernel(spec)
        runs = [bs.cartpole_train(spec, seed=s, kernel=ker) for s in seeds]
        path = fresh_path(out, "cartpole")
        bs.write_rl_csv(runs, path, comment=echo)
    else:
        rows = bs.pendulum_failure_repro(seeds=seeds)
        path = fresh_path(out, "pendulum")
        bs.write_rl_csv([r["run"] for r in rows], path, comment=echo)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_scaling(args) -> int:
    args.domain = "alm"
    cfg = build_config(args)
    dcfg = domain_config(cfg)
    rows = sim_alm.scaling_study(dcfg.market, dcfg.fund, args.factors, n_scenarios=dcfg.n_scenarios, seed=dcfg.train_seed)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / "alm_scaling.csv"
    sim_alm.write_scaling_csv(rows, path, comment=cfg.echo(factors=",".join(map(str, args.factors))))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    args.domain = "gas"
    cfg = build_config(args)
    dcfg = domain_config(cfg)
    rows = sim_gas.sharpness_sweep(dcfg, args.ks, range(args.seeds), deterministic=not args.stochastic)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / "gas_sharpness_sweep.csv"
    cols = ["k", "J_mean", "J_std", "hard_mean", "hard_std", "dp_value", "hard_over_dp"]
    with open(path, "w") as fh:
        fh.write(f"# {cfg.echo(ks=','.join(map(str, args.ks)), stochastic=int(args.stochastic))}\n")
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(r[c])) for c in cols) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_crossover(args) -> int:
    args.domain = "pharma"
    cfg = build_config(args)
    dcfg = domain_config(cfg)
    params = sim_pharma.policy_init(sim_pharma.pharma_arch(), cfg.seed).flat
    rows = sim_pharma.crossover_study(dcfg.spec, params, args.cpps)
    n_star = sim_pharma.crossover_point(rows)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / "pharma_crossover.csv"
    sim_pharma.write_crossover_csv(rows, path, comment=cfg.echo(crossover_n=f"{n_star:.2f}"))
    print(f"wrote {path}; measured crossover at about {n_star:.1f} CPPs")
    return EXIT_OK


def cmd_lm_compare(args) -> int:
    args.domain = "pharma"
    cfg = build_config(args)
    dcfg = domain_config(cfg)
    rows = sim_pharma.lm_vs_adam(dcfg, range(args.seeds))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / "pharma_lm_vs_adam.csv"
    sim_pharma.write_lm_csv(rows, path, comment=cfg.echo())
    print(f"wrote {path}")
    return EXIT_OK


def _add_common(p, domain: bool = True):
    if domain:
        p.add_argument("--domain", choices=DOMAINS)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--k", type=float, help="smoothing sharpness")
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--desk", action="store_true", help="desk-scale defaults (the default)")
    scale.add_argument("--full-scale", action="store_true", help="full-scale defaults")
    p.add_argument("--out", help="output directory")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tapepolicy", description=__doc__.split("\n")[0])
    ap.add_argument("--threads", type=int, default=1, help="worker threads for compiled replays")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy and write its trace and parameters")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("greeks", help="input sensitivities of a trained policy, adjoint and FD")
    _add_common(p)
    p.add_argument("--policy", required=True)
    p.set_defaults(func=cmd_greeks)

    p = sub.add_parser("validate", help="mirror, adjoint-vs-FD and cross-validation checks")
    _add_common(p, domain=False)
    p.add_argument("--domain", choices=("gas", "alm", "pharma", "all"), default="all")
    p.add_argument("--policy")
    p.add_argument("--mirror-threshold", type=float, default=MIRROR_THRESHOLD)
    p.add_argument("--fd-threshold", type=float, default=FD_THRESHOLD)
    p.add_argument("--directions", type=int, default=50)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bench", help="classical functions, cart-pole or pendulum benchmark")
    p.add_argument("--suite", choices=("cec", "cartpole", "pendulum"), required=True)
    p.add_argument("--dims", type=int, nargs="+", default=[10])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--budget", type=int, default=50_000)
    p.add_argument("--functions", help="comma-separated keys, e.g. F1,F3")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("scaling", help="pension-fund bump vs adjoint timing over factor counts")
    _add_common(p, domain=False)
    p.add_argument("--factors", type=int, nargs="+", default=[5, 10, 50])
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("sweep", help="gas storage sharpness sweep against the DP benchmark")
    _add_common(p, domain=False)
    p.add_argument("--ks", type=float, nargs="+", default=[10, 50, 200, 500, 1000])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--stochastic", action="store_true", help="train on simulated paths instead of the curve")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("crossover", help="pharma FD vs adjoint timing over padded CPP counts")
    _add_common(p, domain=False)
    p.add_argument("--cpps", type=int, nargs="+", default=[4, 8, 16, 32])
    p.set_defaults(func=cmd_crossover)

    p = sub.add_parser("lm-compare", help="pharma spec targeting: Levenberg-Marquardt vs Adam")
    _add_common(p, domain=False)
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_lm_compare)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    if args.threads >= 1:
        import numba

        numba.config.THREADING_LAYER = "workqueue"
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteObjectiveError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except FileNotFoundError as e:
        print(f"file not found: {e}", file=sys.stderr)
        return EXIT_MISSING_POLICY


if __name__ == "__main__":
    sys.exit(main())
