import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilevel_smooth import numkit
from bilevel_smooth.errors import InvalidParameter, ShapeMismatch, SingularSensitivity
from bilevel_smooth.problem import from_polynomials, random_points
from bilevel_smooth.smoothing import (
    eval_C,
    eval_sbal,
    eval_zk,
    eval_zk_grads,
    evaluate,
    jac_C,
    kkt_residual_bound,
    limit_jacobians,
    sensitivity,
    solve_path,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_zk_symmetric_case():
    zk = eval_zk([0.0], [0.0], 1.0, 1.0)
    assert zk.z[0] == 1.0 and zk.kappa[0] == 1.0


def test_zk_r_zero_collapse_example():
    zk = eval_zk([-2.0], [0.0], 0.0, 1.0)
    assert zk.z[0] == 2.0 and zk.kappa[0] == 0.0


def test_zk_identities_example():
    zk = eval_zk([0.3], [0.7], 0.5, 2.0)
    assert zk.z[0] * zk.kappa[0] == pytest.approx(1.0, abs=1e-12)
    assert zk.z[0] + 0.3 == pytest.approx(zk.kappa[0] - 2.0 * 0.7, abs=1e-12)


def test_zk_rejects_bad_params():
    with pytest.raises(InvalidParameter):
        eval_zk([0.0], [0.0], 1.0, 0.0)
    with pytest.raises(InvalidParameter):
        eval_zk([0.0], [0.0], -1.0, 1.0)


def test_zk_no_cancellation_far_from_kink():
    # t = 1e8 would leave nothing of z in the naive difference form
    zk = eval_zk([1e8], [0.0], 1.0, 1.0)
    assert zk.z[0] > 0
    assert zk.z[0] * zk.kappa[0] == pytest.approx(1.0, rel=1e-14)


@settings(max_examples=300, deadline=None)
@given(finite, finite, st.floats(0.0, 1e3), st.floats(1e-7, 10.0))
def test_zk_identities_property(g, s, r, rho):
    zk = eval_zk(np.array([g]), np.array([s]), r, rho)
    z, k = zk.z[0], zk.kappa[0]
    assert z >= 0 and k >= 0
    assert abs(z * k - r * rho) <= 1e-9 * max(1.0, r * rho)
    assert abs((z + g) - (k - rho * s)) <= 1e-9 * max(1.0, k + rho * abs(s))


@settings(max_examples=200, deadline=None)
@given(finite, finite, st.floats(1e-7, 10.0))
def test_zk_r_zero_collapse_property(g, s, rho):
    zk = eval_zk(np.array([g]), np.array([s]), 0.0, rho)
    t = rho * s + g
    assert zk.z[0] == max(0.0, -t)
    assert zk.kappa[0] == max(0.0, t)


def test_zk_broadcasts_array_parameters(rng):
    g, s = rng.uniform(-5, 5, 50), rng.uniform(-5, 5, 50)
    r, rho = rng.uniform(0, 2, 50), rng.uniform(0.1, 3, 50)
    zk = eval_zk(g, s, r, rho)
    for i in range(50):
        one = eval_zk(g[i:i + 1], s[i:i + 1], r[i], rho[i])
        assert zk.z[i] == one.z[0] and zk.kappa[i] == one.kappa[0]


def _smooth_points(prob, n, seed):
    r = np.random.default_rng(seed)
    return [(x, y, r.uniform(-1.0, 2.0, prob.m)) for x, y in random_points(prob, n, r)]


@pytest.mark.parametrize("r", [1e-1, 1e-3])
def test_zk_grads_match_differences(corpus_problem, r):
    prob, rho = corpus_problem, 0.7
    d = prob.d
    for x, y, s in _smooth_points(prob, 10, 11):
        gr = eval_zk_grads(prob, x, y, s, r, rho)
        v = np.concatenate([x, y])
        zfun = lambda v: eval_zk(prob.g(v[:d], v[d:]), s, r, rho).z  # noqa: E731
        kfun = lambda v: eval_zk(prob.g(v[:d], v[d:]), s, r, rho).kappa  # noqa: E731
        assert numkit.rel_error(gr.z_xy, numkit.central_diff_jacobian(zfun, v)) <= 1e-6
        assert numkit.rel_error(gr.kappa_xy, numkit.central_diff_jacobian(kfun, v)) <= 1e-6
        zs = numkit.central_diff_jacobian(lambda t: eval_zk(prob.g(x, y), t, r, rho).z, s)
        ks = numkit.central_diff_jacobian(lambda t: eval_zk(prob.g(x, y), t, r, rho).kappa, s)
        assert numkit.rel_error(gr.z_s, zs) <= 1e-6
        assert numkit.rel_error(gr.kappa_s, ks) <= 1e-6


def test_zk_grads_half_ratio_at_symmetric_point(qp_kink):
    # g = -y, so z = kappa when rho*s + g = 0
    y = np.array([0.4])
    s = np.array([0.4])
    gr = eval_zk_grads(qp_kink, [0.1], y, s, 0.01, 1.0)
    np.testing.assert_allclose(gr.z_xy, [[0.0, 0.5]])
    np.testing.assert_allclose(gr.kappa_xy, [[0.0, -0.5]])


def test_zk_grads_need_positive_r(qp_kink):
    with pytest.raises(InvalidParameter):
        eval_zk_grads(qp_kink, [0.0], [0.0], [0.0], 0.0, 1.0)


def test_sbal_gradients_match_differences(corpus_problem):
    prob, r, rho = corpus_problem, 1e-2, 1.3
    for x, y, s in _smooth_points(prob, 8, 5):
        _, gy, gs = eval_sbal(prob, x, y, s, r, rho)
        fy = numkit.central_diff_jacobian(
            lambda v: np.array([eval_sbal(prob, x, v, s, r, rho)[0]]), y)[0]
        fs = numkit.central_diff_jacobian(
            lambda v: np.array([eval_sbal(prob, x, y, v, r, rho)[0]]), s)[0]
        assert numkit.rel_error(gy, fy) <= 1e-6
        assert numkit.rel_error(gs, fs) <= 1e-6


def test_sbal_grad_s_zero_on_balance(qp_kink):
    # choose s so that z = -g; then kappa = r*rho/z = z + g + rho*s
    r, rho, y = 0.01, 1.0, np.array([0.5])
    z, g = 0.5, -0.5
    s = np.array([(r * rho / z - z - g) / rho])
    _, _, gs = eval_sbal(qp_kink, [0.0], y, s, r, rho)
    assert abs(gs[0]) <= 1e-14


def test_sbal_near_kkt_point(qp_kink):
    _, gy, _ = eval_sbal(qp_kink, [1.0], [1.0], [0.0], 1e-8, 1.0)
    assert np.linalg.norm(gy) <= 1e-3


def test_C_vanishes_at_kkt_as_r_shrinks(qp_kink):
    norms = [np.linalg.norm(eval_C(qp_kink, [2.0], [2.0], [0.0], r, 1.0)) for r in (1e-2, 1e-4, 1e-8)]
    assert norms[0] > norms[1] > norms[2]
    assert norms[2] <= 1e-7
    assert np.linalg.norm(eval_C(qp_kink, [2.0], [2.0], [0.0], 0.0, 1.0)) == 0.0


@pytest.mark.parametrize("x", [-1.0, -0.3, 0.0, 0.4, 2.0])
@pytest.mark.parametrize("r", [1e-1, 1e-4])
@pytest.mark.parametrize("rho", [0.5, 2.0])
def test_C_at_kkt_pair_within_bound(qp_kink, x, r, rho):
    y, u = np.array([max(x, 0.0)]), np.array([max(-x, 0.0)])
    assert np.linalg.norm(eval_C(qp_kink, [x], y, u, r, rho)) <= kkt_residual_bound(qp_kink, [x], y, r, rho)


def test_kkt_residual_bound_halving_r(qp_kink):
    b1 = kkt_residual_bound(qp_kink, [0.3], [0.3], 1e-4, 1.0)
    b2 = kkt_residual_bound(qp_kink, [0.3], [0.3], 5e-5, 1.0)
    assert b1 / b2 == pytest.approx(np.sqrt(2.0))


def test_jac_C_matches_differences(corpus_problem):
    prob, r, rho = corpus_problem, 1e-2, 0.9
    l = prob.l
    for x, y, s in _smooth_points(prob, 10, 9):
        jys, jx = jac_C(prob, x, y, s, r, rho)
        v = np.concatenate([y, s])
        fd_ys = numkit.central_diff_jacobian(lambda w: eval_C(prob, x, w[:l], w[l:], r, rho), v)
        fd_x = numkit.central_diff_jacobian(lambda w: eval_C(prob, w, y, s, r, rho), x)
        assert numkit.rel_error(jys, fd_ys) <= 1e-5
        assert numkit.rel_error(jx, fd_x) <= 1e-5


def test_jac_C_zero_block_when_g_ignores_y():
    prob = from_polynomials(dict(name="gx", d=1, l=1, F="x1", f="y1^2 - x1*y1",
                                 g=["x1 - 3"], x0=[0.0], y0=[0.0]))
    jys, _ = jac_C(prob, [0.5], [0.2], [1.0], 0.1, 1.0)
    assert jys[1, 0] == 0.0 and jys[0, 1] == 0.0


def test_evaluate_invariants(corpus_problem):
    for x, y, s in _smooth_points(corpus_problem, 5, 2):
        ev = evaluate(corpus_problem, x, y, s, 1e-3, 1.0)
        l = corpus_problem.l
        assert np.all((ev.W >= 0) & (ev.W <= 1))
        ul = ev.Btilde[:l, :l]
        assert np.max(np.abs(ul - ul.T)) <= 1e-10
        assert np.all(np.isfinite(ev.phi)) and np.all(np.isfinite(ev.psi))


@pytest.mark.parametrize("x, expected", [(0.5, 1.0), (-0.5, 0.0)])
def test_sensitivity_branches(qp_kink, x, expected):
    r, rho = 1e-8, 1.0
    y, s = solve_path(qp_kink, [x], r, rho)
    sens = sensitivity(qp_kink, [x], y, s, r, rho)
    assert abs(sens.V[0, 0] - expected) <= 1e-3
    assert numkit.inf_norm(sens.btilde + sens.Btilde @ sens.Vtilde) <= 1e-8 * (1 + numkit.inf_norm(sens.btilde))


def test_sensitivity_matches_path_differences(corpus_problem):
    prob, r, rho = corpus_problem, 1e-4, 1.0
    x0 = np.asarray(prob.x0, dtype=float)
    y, s = solve_path(prob, x0, r, rho)

    def path(x):
        return solve_path(prob, x, r, rho, y0=y, s0=s)[0]

    fd = numkit.central_diff_jacobian(path, x0)
    V = sensitivity(prob, x0, y, s, r, rho).V
    assert numkit.rel_error(V, fd) <= 1e-4


def test_sensitivity_singular_is_typed():
    # f and g both independent of y leaves the top rows of Btilde empty
    prob = from_polynomials(dict(name="flat", d=1, l=1, F="x1", f="x1", g=["x1 - 5"],
                                 x0=[0.0], y0=[0.0]))
    with pytest.raises(SingularSensitivity):
        sensitivity(prob, [0.0], [0.0], [0.0], 1e-2, 1.0)


def test_limit_jacobians_interior_branch(qp_kink):
    lj = limit_jacobians(qp_kink, [0.5], [0.5], [0.0], [1.0])
    np.testing.assert_array_equal(lj.A_mat[1], [0.0, 1.0])
    v = -np.linalg.solve(lj.A_mat, lj.a_mat)
    assert v[0, 0] == pytest.approx(1.0)


def test_limit_jacobians_active_branch(qp_kink):
    lj = limit_jacobians(qp_kink, [-0.5], [0.0], [0.5], np.diag([0.0]))
    v = -np.linalg.solve(lj.A_mat, lj.a_mat)
    assert v[0, 0] == pytest.approx(0.0)
    assert v[1, 0] == pytest.approx(-1.0)


def test_Btilde_tends_to_limit_matrix(qp_kink):
    r, rho = 1e-10, 1.0
    y, s = solve_path(qp_kink, [0.5], r, rho)
    ev = evaluate(qp_kink, [0.5], y, s, r, rho)
    lj = limit_jacobians(qp_kink, [0.5], [0.5], [0.0], [1.0])
    assert np.max(np.abs(ev.Btilde - lj.A_mat)) <= 1e-4
    assert np.max(np.abs(ev.btilde - lj.a_mat)) <= 1e-4


def test_limit_jacobians_validation(qp_kink):
    with pytest.raises(ShapeMismatch):
        limit_jacobians(qp_kink, [0.0], [0.0], [0.0, 1.0], [1.0])
    with pytest.raises(InvalidParameter):
        limit_jacobians(qp_kink, [0.0], [0.0], [0.0], [2.0])


def test_solve_path_qp_kink_closed_form(qp_kink):
    for x in (-1.0, 0.0, 0.5, 2.0):
        for r in (1e-2, 1e-6):
            y, _ = solve_path(qp_kink, [x], r, 1.0)
            assert y[0] == pytest.approx((x + np.sqrt(x * x + 4 * r)) / 2, rel=1e-10, abs=1e-14)
