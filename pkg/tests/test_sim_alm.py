import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tapepolicy.policy import init as policy_init
from tapepolicy.sim_alm import (
    DT,
    STATIC_STRATEGIES,
    AlmConfig,
    AlmMarketParams,
    FundSpec,
    RiskFactorSet,
    Scenarios,
    alm_arch,
    build_alm_kernel,
    bump_and_revalue,
    draw_scenarios,
    policy_outcome,
    risk_sensitivities,
    sensitivity_rel_err,
    simplex_weights,
    simulate_fund,
    static_strategy,
    write_scaling_csv,
)
from tapepolicy.smooth import smooth_relu

MK = AlmMarketParams()
CALM = AlmMarketParams(hw_sigma=0.0, gbm_sigma=0.0, ou_sigma=0.0)


def test_validation():
    with pytest.raises(ValueError):
        AlmMarketParams(hw_kappa=0.0)
    with pytest.raises(ValueError):
        AlmMarketParams(gbm_sigma=-0.1)
    with pytest.raises(ValueError):
        FundSpec(initial_funded_ratio=0.0)
    with pytest.raises(ValueError):
        FundSpec(horizon_months=0)
    with pytest.raises(ValueError):
        RiskFactorSet(("a", "a"), (1.0, 2.0))


def test_default_factor_set():
    f = RiskFactorSet.default(MK, FundSpec())
    assert f.names == ("r0", "gbm_sigma", "premium", "spread0", "ou_sigma")
    g = RiskFactorSet.default(MK, FundSpec(), 8)
    assert g.names[5:] == ("tilt_0", "tilt_1", "tilt_2") and g.values[5:] == (0.0, 0.0, 0.0)


@given(st.floats(-30, 30), st.floats(-30, 30), st.floats(0.1, 10))
def test_simplex_map(u0, u1, ks):
    w = simplex_weights(u0, u1, ks)
    assert all(0.0 <= x <= 1.0 for x in w)
    assert sum(w) == pytest.approx(1.0, abs=2e-16)


def test_zero_vol_paths_follow_closed_forms():
    fund = FundSpec(horizon_months=24)
    sc = draw_scenarios(MK, 3, 24, 1)
    w = (0.0, 1.0, 0.0)
    out = simulate_fund(CALM, fund, sc, lambda t, f: np.asarray(w))
    # rebuild the rate path and bond accumulation from the closed forms
    t = np.arange(25)
    r = CALM.hw_theta + (CALM.r0 - CALM.hw_theta) * np.exp(-CALM.hw_kappa * t * DT)
    A, L = fund.initial_assets, fund.initial_liabilities
    for m in range(24):
        R = r[m] * DT - CALM.bond_duration * (r[m + 1] - r[m])
        A = A * (1 + R) + fund.annual_premium * DT - fund.monthly_payout
        L = L * (1 + fund.monthly_discount) - fund.monthly_payout
    expected = (A - L) - (fund.initial_assets - fund.initial_liabilities)
    assert np.allclose(out.surplus_change, expected, rtol=1e-12, atol=1e-12)
    eq = simulate_fund(CALM, fund, sc, lambda t, f: np.array([1.0, 0.0, 0.0]))
    assert np.ptp(eq.surplus_change) == 0.0


def test_three_month_hand_accumulation_on_tape():
    fund = FundSpec(horizon_months=3, annual_premium=6.0, payout=0.5, discount_rate=0.12)
    mk = AlmMarketParams(hw_sigma=0.0, gbm_sigma=0.0, ou_sigma=0.0, r0=0.03, hw_theta=0.03, spread0=0.01, ou_mean=0.01)
    ker = build_alm_kernel(mk, fund, 2, None, fixed_weights=(0.5, 0.3, 0.2))
    J, surplus = ker.evaluate(np.zeros(0))
    # r, s constant -> no duration effects; equity earns exp(mu/12) - 1
    R = 0.5 * (math.exp(0.08 / 12) - 1) + 0.3 * (0.03 / 12) + 0.2 * (0.04 / 12)
    A, L = 100.0, 100.0 / 0.79
    i_m = 1.12 ** (1 / 12) - 1
    pen = 0.0
    for _ in range(3):
        A = A * (1 + R) + 0.5 - 0.5
        L = L * (1 + i_m) - 0.5
        pen += smooth_relu(1.0 - A / L, 50.0) ** 2
    assert surplus == pytest.approx((A - L) - (100.0 - 100.0 / 0.79), rel=1e-13)
    assert J == pytest.approx(surplus - 1.0 * pen, rel=1e-13)


def test_no_flows_keeps_surplus_constant():
    mk = AlmMarketParams(hw_sigma=0.0, gbm_sigma=0.0, ou_sigma=0.0, gbm_mu=0.0, r0=0.0, hw_theta=0.0, spread0=0.0, ou_mean=0.0)
    fund = FundSpec(horizon_months=6, annual_premium=0.0, payout=0.0, discount_rate=0.0)
    ker = build_alm_kernel(mk, fund, 3, alm_arch(6), seed=3)
    assert ker.evaluate(policy_init(ker.arch, 0).flat)[1] == 0.0


@pytest.fixture(scope="module")
def kernel():
    return build_alm_kernel(MK, FundSpec(horizon_months=12), 32, alm_arch(12), seed=5)


def test_mirror_and_sensitivities_match_bumps(kernel):
    p = policy_init(kernel.arch, 2).flat
    assert kernel.mirror(p) < 1e-12
    adj = risk_sensitivities(kernel, p)
    assert len(adj) == 5 and adj.names[0] == "r0"
    central = bump_and_revalue(kernel, p)
    assert central.n_forwards == 11
    assert sensitivity_rel_err(adj, central.report) < 1e-3
    one = bump_and_revalue(kernel, p, central=False)
    assert one.n_forwards == 6
    with pytest.raises(ValueError):
        bump_and_revalue(kernel, p, bump_size=0.0)


def test_sensitivities_are_repeatable(kernel):
    p = policy_init(kernel.arch, 4).flat
    a = risk_sensitivities(kernel, p).adjoint
    b = risk_sensitivities(kernel, p).adjoint
    assert a.tobytes() == b.tobytes()


def test_rate_sensitivity_positive_for_bond_fund():
    fund = FundSpec(horizon_months=6)
    ker = build_alm_kernel(CALM, fund, 1, None, fixed_weights=(0.0, 1.0, 0.0))
    rep = risk_sensitivities(ker, None, output=1)
    assert rep.as_dict()["r0"] > 0


def test_every_tilt_moves_the_objective():
    fund = FundSpec(horizon_months=12)
    ker = build_alm_kernel(MK, fund, 8, None, n_factors=12, fixed_weights=(0.2, 0.5, 0.3))
    rep = risk_sensitivities(ker, None)
    assert len(rep) == 12
    assert np.all(np.abs(rep.adjoint[5:]) > 0)
    bump = bump_and_revalue(ker, None).report
    assert sensitivity_rel_err(rep, bump) < 1e-3


def test_tape_matches_numpy_replay(kernel):
    p = policy_init(kernel.arch, 7).flat
    sc = kernel.meta["scenarios"]
    out = policy_outcome(p, kernel.arch, MK, kernel.meta["fund"], sc)
    J, surplus = kernel.evaluate(p)
    assert surplus == pytest.approx(out.mean, rel=1e-10)
    assert J == pytest.approx(out.objective(1.0), rel=1e-10)
    assert np.allclose(out.weights.sum(axis=2), 1.0, atol=1e-15)
    assert np.all(out.weights >= 0)


def test_static_orderings():
    fund = FundSpec()
    sc = draw_scenarios(MK, 512, fund.horizon_months, 9)
    stats = {k: static_strategy(MK, fund, sc, w) for k, w in STATIC_STRATEGIES.items()}
    assert min(stats, key=lambda k: stats[k][1]) == "conservative_30_70"
    assert static_strategy(MK, fund, sc, (1, 0, 0))[0] != static_strategy(MK, fund, sc, (0, 1, 0))[0]
    with pytest.raises(ValueError):
        static_strategy(MK, fund, sc, (0.5, 0.6, 0.0))


def test_correlated_draws():
    corr = ((1.0, 0.5, 0.0), (0.5, 1.0, 0.0), (0.0, 0.0, 1.0))
    sc = draw_scenarios(AlmMarketParams(correlation=corr), 20000, 2, 1)
    c = np.corrcoef(sc.z[:, 0, 0], sc.z[:, 0, 1])[0, 1]
    assert c == pytest.approx(0.5, abs=0.03)
    with pytest.raises(ValueError):
        AlmMarketParams(correlation=((1.0, 2.0, 0.0), (2.0, 1.0, 0.0), (0.0, 0.0, 1.0)))


def test_scaling_csv(tmp_path):
    rows = [{"n_factors": 5, "bump_ms": 10.0, "adjoint_ms": 2.0, "speedup": 5.0}]
    write_scaling_csv(rows, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "n_factors,bump_ms,adjoint_ms,speedup"


def test_short_training_improves_objective():
    cfg = AlmConfig(n_scenarios=16, iterations=40)
    from tapepolicy.sim_alm import train_alm

    _, run = train_alm(cfg, 1)
    J = run.column("J")
    assert J[-1] > J[0]
