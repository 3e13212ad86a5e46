import dataclasses

import numpy as np
import pytest

from expfbf.errors import CapacityError, InvalidInputError, NumericFailure
from expfbf.features import FourierFeatureMap, TaylorFeatureMap
from expfbf.fbf import (
    F2_dense,
    FilterConfig,
    covariance_health,
    filter_step,
    init_filter,
    jacobian_F1,
    jacobian_F2,
    load_model,
    predict,
    regressor,
    run_sequence,
    save_model,
    state_transition,
    update,
)

from oracles import DenseJointKalman, central_difference_jacobian, relative_error


def mg_config(**kw):
    base = dict(
        n_x=5, n_y=1, n_u=7,
        state_map=TaylorFeatureMap.from_kernel_parameter(5, 4, 0.6),
        input_map=TaylorFeatureMap.from_kernel_parameter(7, 4, 1.8),
        sigma_s=0.3, sigma_y=0.3, p4_init=10.0, kappa1=0.4, kappa2=0.1,
    )
    base.update(kw)
    return FilterConfig(**base)


def small_config(layout="full", **kw):
    """n_s = 2, D_psi = 3, D_phi = 2."""
    base = dict(
        n_x=1, n_y=1, n_u=1,
        state_map=TaylorFeatureMap(1, 2, 1.0),
        input_map=TaylorFeatureMap(1, 1, 1.0),
        sigma_s=0.2, sigma_y=0.3, sigma_omega=0.05, p4_init=0.8,
        layout=layout, seed=11,
    )
    base.update(kw)
    return FilterConfig(**base)


def test_mg_dimensions():
    cfg = mg_config()
    assert cfg.state_map.dim == 126 and cfg.input_map.dim == 330
    assert cfg.n_s == 6 and cfg.dim_z == 456 and cfg.n_omega == 2736
    m = init_filter(cfg)
    assert m.A.shape == (6, 126) and m.B.shape == (6, 330)
    assert np.all(m.P2 == 0)
    assert np.all(np.abs(m.W) <= 0.1) and np.all(np.abs(m.s) <= 0.1)


def test_init_deterministic():
    a, b = init_filter(small_config(seed=5)), init_filter(small_config(seed=5))
    assert np.array_equal(a.W, b.W) and np.array_equal(a.s, b.s)
    c = init_filter(small_config(seed=6))
    assert not np.array_equal(a.W, c.W)


def test_init_capacity_error():
    with pytest.raises(CapacityError, match="per-state-block"):
        init_filter(mg_config(layout="full", input_map=TaylorFeatureMap(7, 6, 1.0)))


def test_config_validation():
    with pytest.raises(InvalidInputError):
        small_config(sigma_s=0.0)
    with pytest.raises(InvalidInputError):
        small_config(kappa1=1.5)
    with pytest.raises(InvalidInputError):
        small_config(mode="other")
    with pytest.raises(InvalidInputError):
        small_config(measure_start=5)


def test_config_roundtrip():
    cfg = mg_config(seed=4)
    back = FilterConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()


def test_state_transition_zero_operator():
    m = init_filter(small_config())
    m.W[:] = 0
    assert np.all(state_transition(m, np.array([0.3])) == 0)


def test_concat_identity_dynamics():
    fmap = FourierFeatureMap.random(2, 3, 1.0, seed=0)
    cfg = FilterConfig(n_x=2, n_y=2, mode="concat", state_map=fmap)
    m = init_filter(cfg)
    m.W = np.eye(cfg.n_s)
    m.set_state(np.array([0.4, -0.2]))
    assert np.array_equal(state_transition(m), m.s)


def test_state_transition_mg_matches_dense_oracle():
    cfg = mg_config(seed=2)
    m = init_filter(cfg)
    rng = np.random.default_rng(0)
    m.s = rng.uniform(-1, 1, 6)
    u = rng.uniform(-1, 1, 7)
    psi = cfg.state_map(m.s[:5])
    phi = cfg.input_map(u)
    expect = np.array([sum(m.A[i, j] * psi[j] for j in range(126))
                       + sum(m.B[i, j] * phi[j] for j in range(330)) for i in range(6)])
    assert state_transition(m, u) == pytest.approx(expect, rel=1e-12, abs=1e-14)


def test_missing_or_spurious_input():
    m = init_filter(small_config())
    with pytest.raises(InvalidInputError):
        state_transition(m)
    fmap = TaylorFeatureMap(2, 2, 1.0)
    m2 = init_filter(FilterConfig(n_x=2, n_y=1, state_map=fmap))
    with pytest.raises(InvalidInputError):
        state_transition(m2, np.ones(1))


def test_F1_feature_state_is_A():
    fmap = TaylorFeatureMap(2, 2, 1.0)
    cfg = FilterConfig(n_x=2, n_y=1, mode="feature-state", state_map=fmap)
    m = init_filter(cfg)
    assert np.array_equal(jacobian_F1(m), m.A)


def test_F1_selector_gives_feature_jacobian():
    fmap = TaylorFeatureMap(2, 1, 1.0)  # D = 3
    cfg = FilterConfig(n_x=2, n_y=1, state_map=fmap)
    m = init_filter(cfg)
    m.W[:] = 0
    m.W[:, :3] = np.eye(3)
    m.s = np.array([0.3, -0.5, 0.1])
    F1 = jacobian_F1(m)
    assert F1[:, :2] == pytest.approx(fmap.jacobian(m.s[:2]))
    assert np.all(F1[:, 2] == 0)


def test_F1_matches_finite_differences():
    rng = np.random.default_rng(3)
    for trial in range(50):
        m = init_filter(mg_config(seed=trial))
        m.W = rng.uniform(-1, 1, m.W.shape)
        m.s = rng.uniform(-1, 1, 6)
        u = rng.uniform(-1, 1, 7)

        def f(s):
            mm = m.copy()
            mm.s = s
            return state_transition(mm, u)

        fd = central_difference_jacobian(f, m.s.copy())
        assert relative_error(jacobian_F1(m), fd) <= 1e-4


def test_F2_single_row_and_selector():
    fmap = TaylorFeatureMap(1, 2, 1.0)
    cfg = FilterConfig(n_x=1, n_y=1, mode="feature-state", state_map=fmap,
                       input_map=TaylorFeatureMap(1, 1, 1.0), n_u=1)
    assert cfg.n_s == 3
    m = init_filter(small_config())
    u = np.array([0.4])
    z = jacobian_F2(m, u)
    assert np.array_equal(z, np.r_[m.config.state_map(m.s[:1]), m.config.input_map(u)])
    # psi(s) = e_1: F2 v picks the first weight of each row
    cfg1 = FilterConfig(n_x=1, n_y=1, mode="feature-state", state_map=TaylorFeatureMap(1, 0, 1.0))
    assert cfg1.n_s == 1
    z1 = np.array([1.0])
    assert np.array_equal(F2_dense(cfg1, z1), [[1.0]])
    cfgs = small_config()
    zs = np.array([1.0, 0, 0, 0, 0])
    v = np.arange(cfgs.n_omega, dtype=float)
    F2 = F2_dense(cfgs, zs)
    # canonical order: A[0,:], A[1,:], B[0,:], B[1,:]; e_1 picks A[k, 0]
    assert F2 @ v == pytest.approx([v[0], v[3]])


def test_structured_F2_P4_F2T_matches_dense():
    cfg = small_config()
    m = init_filter(cfg)
    rng = np.random.default_rng(4)
    G = rng.normal(size=(cfg.n_omega, cfg.n_omega))
    P4 = G @ G.T
    m.P4 = P4
    z = regressor(m, np.array([0.2]))
    n_s, dz = cfg.n_s, cfg.dim_z
    structural = np.einsum("d,kdle,e->kl", z, P4.reshape(n_s, dz, n_s, dz), z)
    F2 = np.kron(np.eye(n_s), z[None, :])  # internal row-block order
    assert structural == pytest.approx(F2 @ P4 @ F2.T, abs=1e-10)


def test_predict_pure_process_noise():
    fmap = TaylorFeatureMap(2, 1, 1.0)
    cfg = FilterConfig(n_x=2, n_y=1, mode="feature-state", state_map=fmap, sigma_s=0.4)
    for layout in ("full", "per-state-block"):
        m = init_filter(dataclasses.replace(cfg, layout=layout))
        m.W[:] = 0
        m.s = np.zeros(3)
        m.P2 = np.random.default_rng(0).normal(size=m.P2.shape)
        predict(m)
        P1 = m.P1 if layout == "full" else m.P1[0]
        assert P1 == pytest.approx(0.16 * np.eye(3))


def test_predict_static_weights_keep_P4():
    m = init_filter(small_config(sigma_omega=0.0))
    P4 = m.P4.copy()
    predict(m, np.array([0.1]))
    assert np.array_equal(m.P4, P4)


def _dense_oracle_run(cfg, steps, seed):
    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(steps, cfg.n_u))
    meas = rng.normal(size=(steps, cfg.n_y))
    m = init_filter(cfg)
    P1, P2, P4 = m.canonical_covariance()
    P = np.block([[P1, P2], [P2.T, P4]])
    oracle = DenseJointKalman(m.s, m.weight_vector(), P, cfg.sigma_s, cfg.sigma_y,
                              cfg.sigma_omega, cfg.measurement_indices)
    n_s, da = cfg.n_s, cfg.dim_a

    def unpack(omega):
        return omega[: n_s * da].reshape(n_s, da), omega[n_s * da :].reshape(n_s, -1)

    def transition_for(u):
        def f(s, omega):
            A, B = unpack(omega)
            d = cfg.state_map.input_dim
            return A @ cfg.state_map(s[:d]) + B @ cfg.input_map(u)
        return f

    def jac_s_for(u):
        def f(s, omega):
            A, _ = unpack(omega)
            d = cfg.state_map.input_dim
            J = np.zeros((n_s, n_s))
            J[:, :d] = A @ cfg.state_map.jacobian(s[:d])
            return J
        return f

    def jac_w_for(u):
        def f(s, omega):
            d = cfg.state_map.input_dim
            z = np.r_[cfg.state_map(s[:d]), cfg.input_map(u)]
            return F2_dense(cfg, z)
        return f

    worst = 0.0
    for i in range(steps):
        u, d = inputs[i], meas[i]
        filter_step(m, u, d)
        oracle.step(transition_for(u), jac_s_for(u), jac_w_for(u), d)
        P1, P2, P4 = m.canonical_covariance()
        Pm = np.block([[P1, P2], [P2.T, P4]])
        worst = max(worst,
                    np.abs(m.s - oracle.s).max(),
                    np.abs(m.weight_vector() - oracle.omega).max(),
                    np.abs(Pm - oracle.P).max())
    return worst


def test_full_layout_equals_dense_joint_kalman():
    assert _dense_oracle_run(small_config(), 50, seed=0) <= 1e-8


def test_full_layout_oracle_three_states():
    cfg = FilterConfig(n_x=2, n_y=1, n_u=1, state_map=TaylorFeatureMap(2, 1, 1.2),
                       input_map=TaylorFeatureMap(1, 2, 1.0), sigma_s=0.1, sigma_y=0.2,
                       p4_init=0.5, layout="full", seed=3)
    assert cfg.n_s == 3 and cfg.dim_z <= 8
    assert _dense_oracle_run(cfg, 50, seed=1) <= 1e-8


def test_per_state_block_groups_equal_dense_row_filters():
    """Each row group is an exact joint Kalman filter over [s; W[k]]."""
    cfg = small_config(layout="per-state-block")
    m = init_filter(cfg)
    rng = np.random.default_rng(7)
    n_s = cfg.n_s
    for _ in range(50):
        u, d = rng.normal(size=1), rng.normal(size=1)
        s0, W0 = m.s.copy(), m.W.copy()
        groups = [m.group_covariance(k) for k in range(n_s)]
        filter_step(m, u, d)
        for k in range(n_s):
            def transition(s, w, k=k):
                W = W0.copy()
                W[k] = w
                return W @ np.r_[cfg.state_map(s[:1]), cfg.input_map(u)]

            def jac_s(s, w, k=k):
                W = W0.copy()
                W[k] = w
                J = np.zeros((n_s, n_s))
                J[:, :1] = W[:, : cfg.dim_a] @ cfg.state_map.jacobian(s[:1])
                return J

            def jac_w(s, w, k=k):
                J = np.zeros((n_s, cfg.dim_z))
                J[k] = np.r_[cfg.state_map(s[:1]), cfg.input_map(u)]
                return J

            o = DenseJointKalman(s0, W0[k], groups[k], cfg.sigma_s, cfg.sigma_y,
                                 cfg.sigma_omega, cfg.measurement_indices)
            o.step(transition, jac_s, jac_w, d)
            assert np.abs(m.group_covariance(k) - o.P).max() <= 1e-9
            assert np.abs(m.W[k] - o.omega).max() <= 1e-9
            assert abs(m.s[k] - o.s[k]) <= 1e-9


def test_single_row_layouts_agree():
    fmap = TaylorFeatureMap(1, 0, 1.0)
    kw = dict(n_x=1, n_y=1, n_u=1, mode="feature-state", state_map=fmap,
              input_map=TaylorFeatureMap(1, 2, 1.0), kappa1=0.6, kappa2=0.3, seed=2)
    a = init_filter(FilterConfig(layout="full", **kw))
    b = init_filter(FilterConfig(layout="per-state-block", **kw))
    rng = np.random.default_rng(1)
    for _ in range(30):
        u, d = rng.normal(size=1), rng.normal(size=1)
        filter_step(a, u, d)
        filter_step(b, u, d)
    assert b.s == pytest.approx(a.s, abs=1e-12)
    assert b.W == pytest.approx(a.W, abs=1e-12)
    assert b.P4[0] == pytest.approx(a.P4, abs=1e-12)


def test_zero_innovation_is_fixed_point():
    for layout in ("full", "per-state-block"):
        m = init_filter(small_config(layout=layout))
        W0 = m.W.copy()
        rng = np.random.default_rng(0)
        for _ in range(20):
            u = rng.normal(size=1)
            predict(m, u)
            prior = m.s.copy()
            _, rep = update(m, prior[m.config.measurement_indices])
            assert np.all(rep.innovation == 0)
            assert np.array_equal(m.s, prior)
        assert np.array_equal(m.W, W0)


def test_uninformative_measurement():
    m = init_filter(small_config(sigma_y=1e8))
    predict(m, np.array([0.5]))
    prior, W0 = m.s.copy(), m.W.copy()
    update(m, np.array([100.0]))
    assert m.s == pytest.approx(prior, abs=1e-10)
    assert m.W == pytest.approx(W0, abs=1e-10)


def test_empty_sequence_leaves_model_unchanged():
    m = init_filter(small_config())
    before = m.copy()
    m2, reps = run_sequence(m, np.zeros((0, 1)), np.zeros((0, 1)))
    assert reps == [] and np.array_equal(m2.s, before.s) and np.array_equal(m2.P1, before.P1)


def test_constant_measurements_converge():
    m = init_filter(small_config(layout="per-state-block", sigma_s=0.01, sigma_omega=0.0))
    _, reps = run_sequence(m, np.full((200, 1), 0.3), np.full(200, 0.7))
    assert abs(reps[-1].innovation[0]) < abs(reps[0].innovation[0])
    assert abs(reps[-1].innovation[0]) < 0.05


def test_reports_are_measurement_selections_and_deterministic():
    def run():
        m = init_filter(mg_config(seed=1))
        rng = np.random.default_rng(2)
        _, reps = run_sequence(m, rng.uniform(0, 1, (20, 7)), rng.uniform(0, 1, 20),
                               clean=rng.uniform(0, 1, 20))
        return reps

    a, b = run(), run()
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.posterior_output, ra.posterior_state[[5]])
        assert np.array_equal(ra.prior_output, ra.prior_state[[5]])
        assert np.array_equal(ra.posterior_state, rb.posterior_state)
        assert ra.posterior_se == rb.posterior_se


def test_covariance_health_mg_batch():
    from expfbf.dynamics import MgParams, add_awgn, mackey_glass

    clean = mackey_glass(MgParams(N=200)).clean
    noisy, _ = add_awgn(clean, 10, 0)
    m = init_filter(mg_config(seed=0))
    inputs = [noisy[i - 7 : i][::-1] for i in range(7, 107)]
    worst = []

    def monitor(model, rep):
        worst.append(covariance_health(model))

    run_sequence(m, inputs, noisy[7:107], monitor=monitor)
    worst = np.array(worst)
    assert worst[:, 0].max() <= 1e-9 and worst[:, 1].max() <= 1e-9
    assert worst[:, 2].min() >= -1e-8


def test_innovation_failure_reports_step():
    m = init_filter(small_config())
    m.P1 = -np.eye(m.config.n_s)
    with pytest.raises(NumericFailure) as info:
        update(m, np.array([0.0]))
    assert info.value.index == 0


def test_non_finite_features_fail():
    m = init_filter(small_config())
    m.s = np.array([np.nan, 0.0])
    with pytest.raises((NumericFailure, InvalidInputError)):
        predict(m, np.array([0.0]))


@pytest.mark.parametrize("layout", ["full", "per-state-block"])
def test_checkpoint_roundtrip_bit_exact(tmp_path, layout):
    m = init_filter(small_config(layout=layout))
    rng = np.random.default_rng(0)
    run_sequence(m, rng.normal(size=(10, 1)), rng.normal(size=10))
    path = tmp_path / "m.bin"
    save_model(m, path)
    back = load_model(path)
    assert back.step == m.step == 10
    for name in ("s", "W", "P1", "P2", "P4"):
        assert np.array_equal(getattr(back, name), getattr(m, name)), name
    assert back.config.to_dict() == m.config.to_dict()
    save_model(back, tmp_path / "m2.bin")
    assert path.read_bytes() == (tmp_path / "m2.bin").read_bytes()
    # resumed runs match uninterrupted ones
    u, d = rng.normal(size=(5, 1)), rng.normal(size=5)
    run_sequence(m, u, d)
    run_sequence(back, u, d)
    assert np.array_equal(back.W, m.W)


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a model")
    with pytest.raises(InvalidInputError):
        load_model(p)


def test_canonical_covariance_only_for_full():
    m = init_filter(small_config(layout="per-state-block"))
    with pytest.raises(InvalidInputError):
        m.canonical_covariance()
    assert m.group_covariance(0).shape == (2 + 5, 2 + 5)
