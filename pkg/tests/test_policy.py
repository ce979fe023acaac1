import numpy as np
import pytest

from tapepolicy import tape as tp
from tapepolicy.policy import MlpArch, PolicyParams, evaluate, evaluate_batch, init, load_csv, param_count, save_csv

GAS = MlpArch((9, 5, 5, 2), True, 365, 2)
PHARMA = MlpArch((8, 6, 2))
ALM = MlpArch((5, 5, 5, 2), True, 120, 2)


def test_param_counts_from_the_three_domains():
    assert param_count(GAS) == 822
    assert GAS.n_mlp == 92
    assert param_count(PHARMA) == 68
    assert param_count(ALM) == 312
    assert ALM.n_mlp == 72


def test_capacity_formula():
    small = MlpArch((9, 5, 5, 2))
    big = MlpArch((9, 16, 16, 2))
    assert param_count(big) - param_count(small) == (9 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2) - 92


def test_bad_arch():
    with pytest.raises(ValueError):
        MlpArch((3,))
    with pytest.raises(ValueError):
        MlpArch((3, 0, 1))


def test_init_deterministic_and_seed_dependent():
    a, b, c = init(GAS, 1), init(GAS, 1), init(GAS, 2)
    assert np.array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, c.flat)
    assert np.all(a.time_biases == 0)
    assert a.time_biases.shape == (365, 2)


def test_init_limits_and_zero_layer_biases():
    p = init(PHARMA, 0).flat
    w1 = p[:48]
    assert np.all(np.abs(w1) <= np.sqrt(6 / 14))
    assert np.all(p[48:54] == 0)
    assert np.all(p[66:68] == 0)


def test_zero_params_give_zero_action():
    p = np.zeros(param_count(GAS))
    assert evaluate(p, GAS, [0.3] * 9, t=4) == [0.0, 0.0]


def test_time_bias_only_path():
    p = PolicyParams(GAS, np.zeros(822))
    p.time_biases[7] = (0.3, -0.1)
    assert evaluate(p, GAS, [1.0] * 9, t=7) == [0.3, -0.1]


def test_dimension_and_time_errors():
    p = np.zeros(822)
    with pytest.raises(ValueError):
        evaluate(p, GAS, [0.0] * 8, t=0)
    with pytest.raises(IndexError):
        evaluate(p, GAS, [0.0] * 9, t=365)


def _policy_tape(arch, state, t):
    n = param_count(arch)
    return tp.record(lambda i, p, r: evaluate(p, arch, i, t), arch.n_inputs, n)


def test_tape_matches_plain_and_fd():
    arch = MlpArch((4, 3, 3, 2), True, 5, 2)
    params = init(arch, 3).flat + np.random.default_rng(0).normal(scale=0.1, size=param_count(arch))
    state = np.array([0.2, -0.4, 1.0, 0.5])
    t = _policy_tape(arch, state, 2)
    out = tp.forward(t, state, params)
    plain = evaluate(params, arch, list(state), 2)
    assert np.max(np.abs(out - plain)) < 1e-15
    batch = evaluate_batch(params, arch, state[None, :], 2)[0]
    assert np.allclose(batch, plain, rtol=0, atol=1e-14)
    _, _, jpar = tp.jacobian(t, state, params, [], rows=[0, 1])
    h = 1e-6
    for j in range(len(params)):
        pp, pm = params.copy(), params.copy()
        pp[j] += h
        pm[j] -= h
        fd = (np.array(evaluate(pp, arch, list(state), 2)) - np.array(evaluate(pm, arch, list(state), 2))) / (2 * h)
        assert np.all(np.abs(jpar[:, j] - fd) <= 1e-6 * np.maximum(np.abs(fd), 1.0))


def test_hidden_activations_bounded():
    arch = MlpArch((3, 4, 1))
    p = init(arch, 0).flat * 50
    h = np.tanh(np.array([[100.0, -100.0, 3.0]]) @ p[:12].reshape(4, 3).T + p[12:16])
    assert np.all(np.abs(h) <= 1)


def test_csv_roundtrip(tmp_path):
    p = init(GAS, 5)
    p.flat[-1] = 0.125
    save_csv(p, tmp_path / "pol.csv")
    first = (tmp_path / "pol.csv").read_text().splitlines()[0]
    assert first == "mlp:9-5-5-2;time_bias=365x2"
    back = load_csv(tmp_path / "pol.csv")
    assert back.arch == GAS
    assert np.array_equal(back.flat, p.flat)
