import numpy as np
import pytest
from scipy.optimize import least_squares

from tapepolicy import tape as tp
from tapepolicy.kernel import DomainKernel
from tapepolicy.optim import (
    AdamState,
    LmState,
    NonFiniteObjectiveError,
    adam_step,
    lm_step,
    train_adam,
    train_lm,
)


def make_kernel(builder, n_params, n_out=1, name="toy"):
    t = tp.record(builder, 0, n_params, 0)
    return DomainKernel(name, t, builder, None, np.zeros(0), [], np.zeros(0), [f"y{k}" for k in range(n_out)])


def test_adam_first_step():
    st = AdamState.zeros(1, lr=0.005)
    p, st = adam_step(np.zeros(1), np.ones(1), st)
    # m_hat = v_hat = 1 after bias correction
    assert p[0] == pytest.approx(-0.005 / (1 + 1e-8), rel=1e-15)
    assert st.step == 1


def test_adam_zero_gradient_keeps_params():
    st = AdamState.zeros(3)
    p0 = np.array([1.0, -2.0, 3.0])
    p, _ = adam_step(p0, np.zeros(3), st)
    assert np.array_equal(p, p0)


def test_adam_positive_scaling_keeps_sign():
    g = np.array([0.3, -2.0, 1e-3, -7.0])
    s1 = adam_step(np.zeros(4), g, AdamState.zeros(4))[0]
    s2 = adam_step(np.zeros(4), 37.0 * g, AdamState.zeros(4))[0]
    assert np.array_equal(np.sign(s1), np.sign(s2))
    assert np.all(np.abs(s1) <= 0.005 + 1e-15)


def test_adam_length_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2))


def test_train_adam_quadratic_optimum():
    k = make_kernel(lambda i, p, r: -((p[0] - 2.0) ** 2.0), 1)
    run = train_adam(k, np.zeros(1), 2000, lr=0.005)
    assert abs(run.params[0] - 2.0) < 1e-3
    assert run.iterations == 2000
    assert np.all(np.diff(run.column("iter")) == 1)
    assert np.all(run.column("wall_ms") >= 0)


def test_train_adam_zero_iterations():
    k = make_kernel(lambda i, p, r: -((p[0] - 2.0) ** 2.0), 1)
    run = train_adam(k, np.array([0.7]), 0)
    assert run.params.tolist() == [0.7] and run.records == []


def test_train_adam_is_deterministic():
    k = make_kernel(lambda i, p, r: -((p[0] - 2.0) ** 2.0) - tp.exp(p[1]) + p[1], 2)
    a = train_adam(k, np.array([0.1, 0.5]), 100)
    b = train_adam(k, np.array([0.1, 0.5]), 100)
    assert a.column("J").tobytes() == b.column("J").tobytes()
    assert a.params.tobytes() == b.params.tobytes()


def test_train_adam_non_finite_aborts():
    k = make_kernel(lambda i, p, r: tp.log(p[0]), 1)
    with pytest.raises(NonFiniteObjectiveError):
        train_adam(k, np.array([-1.0]), 5)


def test_lm_linear_residual_one_step():
    state = LmState(damping=1e-14)
    p, state, ok, r = lm_step(np.zeros(1), np.array([-2.0]), np.array([[1.0]]), state, lambda q: q - 2.0)
    assert ok
    assert p[0] == pytest.approx(2.0, abs=1e-12)


def test_lm_zero_residual_is_accepted_noop():
    p, _, ok, _ = lm_step(np.ones(2), np.zeros(3), np.ones((3, 2)), LmState(), lambda q: np.zeros(3))
    assert ok and p.tolist() == [1.0, 1.0]


def test_lm_rejects_and_raises_damping():
    st = LmState(damping=1e-3)
    # residual_fn reports a worse point regardless of the step
    p, st, ok, _ = lm_step(np.zeros(1), np.array([1.0]), np.array([[1.0]]), st, lambda q: np.array([5.0]))
    assert not ok and p[0] == 0.0
    assert st.damping == pytest.approx(1e-2)


def _rosen_r(p):
    return np.array([10.0 * (p[1] - p[0] ** 2), 1.0 - p[0]])


def _rosen_j(p):
    return np.array([[-20.0 * p[0], 10.0], [-1.0, 0.0]])


def test_lm_rosenbrock_converges():
    ref = least_squares(_rosen_r, [-1.2, 1.0], method="lm").x
    p = np.array([-1.2, 1.0])
    st = LmState()
    norms = [np.linalg.norm(_rosen_r(p))]
    for it in range(200):
        r = _rosen_r(p)
        if np.linalg.norm(_rosen_j(p).T @ r) < st.grad_tol:
            break
        p, st, ok, r_new = lm_step(p, r, _rosen_j(p), st, _rosen_r)
        if ok:
            assert np.linalg.norm(r_new) < norms[-1]
            norms.append(np.linalg.norm(r_new))
    assert it < 200
    assert np.allclose(p, [1.0, 1.0], atol=1e-6)
    assert np.allclose(p, ref, atol=1e-6)


def test_train_lm_on_recorded_rosenbrock():
    k = make_kernel(lambda i, p, r: [10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]], 2, n_out=2)
    run = train_lm(k, np.array([-1.2, 1.0]), rows=[0, 1], max_iterations=200)
    assert run.exit_reason in {"grad_tol", "stall"}
    assert np.allclose(run.params, [1.0, 1.0], atol=1e-6)
    J = run.column("J")
    assert np.all(np.diff(J) < 0)


def test_train_lm_zero_residual_start():
    k = make_kernel(lambda i, p, r: [p[0] - 1.0, p[1] + 2.0], 2, n_out=2)
    run = train_lm(k, np.array([1.0, -2.0]), rows=[0, 1])
    assert run.exit_reason == "grad_tol" and run.iterations == 1


def test_lm_jacobian_from_reverse_matches_fd():
    def b(i, p, r):
        return [tp.exp(p[0] * p[1]) - 1.0, tp.sin(p[0]) + p[1] ** 3.0, p[0] / (1.0 + p[1] * p[1])]

    k = make_kernel(b, 2, n_out=3)
    p = np.array([0.4, -0.8])
    _, _, jac = tp.jacobian(k.tape, k.inputs, p, k.randoms, rows=[0, 1, 2])
    h = 1e-6
    fd = np.empty((3, 2))
    for j in range(2):
        pp, pm = p.copy(), p.copy()
        pp[j] += h
        pm[j] -= h
        fd[:, j] = (k.evaluate(pp) - k.evaluate(pm)) / (2 * h)
    assert np.all(np.abs(jac - fd) <= 1e-3 * np.abs(fd) + 1e-12)
