import numpy as np
import pytest

from fisherlora import dense, lora, micrograd as mg, subspace


def unit(rng, k):
    x = rng.standard_normal(k)
    return x / np.linalg.norm(x)


def random_psd(rng, k):
    a = rng.standard_normal((k, k + 1))
    return a @ a.T / (k + 1)


def test_build_factors_basis_case():
    init = lora.build_factors(np.array([[1.0], [0.0]]), np.array([[1.0], [0.0]]), [4.0], alpha=1.0)
    np.testing.assert_array_equal(init.A, [[2.0, 0.0]])
    np.testing.assert_array_equal(init.B, [[2.0], [0.0]])
    np.testing.assert_array_equal(init.B @ init.A, [[4.0, 0.0], [0.0, 0.0]])
    assert init.scale == 1.0 and init.rank == 1


def test_build_factors_zero_sigma():
    rng = np.random.default_rng(0)
    init = lora.build_factors(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)), [0.0, 0.0], 2.0)
    assert not init.A.any() and not init.B.any()


def test_build_factors_triple_product_oracle():
    rng = np.random.default_rng(1)
    u, s, v = rng.standard_normal((5, 3)), rng.random(3) * 4, rng.standard_normal((6, 3))
    init = lora.build_factors(u, v, s, alpha=3.0)
    oracle = np.zeros((5, 6))
    for k in range(3):
        oracle += s[k] * np.outer(u[:, k], v[:, k])
    assert np.max(np.abs(init.B @ init.A - oracle)) <= 1e-10
    assert init.scale == 1.0


def test_build_factors_rejects_negative():
    with pytest.raises(ValueError):
        lora.build_factors(np.eye(2), np.eye(2), [1.0, -1.0], 1.0)


def test_decompose_examples():
    rng = np.random.default_rng(2)
    w0 = rng.standard_normal((3, 4))
    zero = lora.build_factors(np.zeros((3, 2)), np.zeros((4, 2)), [1.0, 1.0], 2.0)
    np.testing.assert_array_equal(lora.decompose(w0, zero).W_res, w0)
    no_scale = lora.build_factors(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)), [1.0, 2.0], 0.0)
    np.testing.assert_array_equal(lora.decompose(w0, no_scale).W_res, w0)
    init = lora.decompose(w0, lora.build_factors(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)),
                                                 [1.0, 2.0], 5.0))
    assert np.max(np.abs(init.W_res + init.scale * init.B @ init.A - w0)) <= 1e-12


def test_decompose_shape_mismatch():
    init = lora.build_factors(np.eye(2), np.eye(2), [1.0, 1.0], 1.0)
    with pytest.raises(dense.ShapeError):
        lora.decompose(np.eye(3), init)


def test_raw_alpha_scale():
    init = lora.build_factors(np.eye(2), np.eye(2), [1.0, 1.0], 4.0, raw_alpha=True)
    assert init.scale == 4.0
    assert lora.build_factors(np.eye(2), np.eye(2), [1.0, 1.0], 4.0).scale == 2.0


def test_alpha_linearity():
    rng = np.random.default_rng(3)
    w0 = rng.standard_normal((4, 5))
    u, v = rng.standard_normal((4, 2)), rng.standard_normal((5, 2))
    a = lora.decompose(w0, lora.build_factors(u, v, [1.0, 2.0], 2.0))
    b = lora.decompose(w0, lora.build_factors(u, v, [1.0, 2.0], 4.0))
    assert b.scale == 2 * a.scale
    np.testing.assert_array_equal(a.A, b.A)
    np.testing.assert_array_equal(a.B, b.B)
    assert np.max(np.abs(b.recompose() - w0)) <= 1e-12


def test_adapted_forward_examples():
    rng = np.random.default_rng(4)
    w0 = rng.standard_normal((3, 4))
    init = lora.decompose(w0, lora.build_factors(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)),
                                                 [0.5, 1.5], 3.0))
    x = rng.standard_normal((4, 6))
    assert np.max(np.abs(lora.adapted_forward(init, x) - w0 @ x)) <= 1e-10
    np.testing.assert_array_equal(lora.adapted_forward(init, np.zeros((4, 2))), 0.0)
    delta_a = rng.standard_normal(init.A.shape)
    from dataclasses import replace
    moved = replace(init, A=init.A + delta_a)
    diff = lora.adapted_forward(moved, x) - lora.adapted_forward(init, x)
    np.testing.assert_allclose(diff, init.scale * init.B @ delta_a @ x, atol=1e-12)


def test_forward_equivalence_over_strategies():
    rng = np.random.default_rng(5)
    for trial in range(30):
        m, n = rng.integers(2, 9, size=2)
        w0 = rng.standard_normal((m, n))
        s_x, s_y = random_psd(rng, n), random_psd(rng, m)
        basis = subspace.surrogate_basis(w0)
        e = subspace.project_energies(basis, s_x, s_y)
        r = int(rng.integers(1, basis.live_count + 1))
        idx = subspace.select(e, r, subspace.SelectionStrategy(("min-energy", "max-energy", "random")[trial % 3],
                                                               rng_seed=trial))
        init = lora.decompose(w0, lora.build_factors(basis.U_hat[:, idx], basis.V_hat[:, idx],
                                                     e.energies[idx], float(rng.uniform(0.5, 8))))
        x = rng.standard_normal((n, 5))
        ref = w0 @ x
        assert np.max(np.abs(lora.adapted_forward(init, x) - ref)) <= 1e-9 * (1 + np.max(np.abs(ref)))
        assert dense.numerical_rank(init.B @ init.A) <= r


def test_direction_validation():
    with pytest.raises(ValueError):
        lora.Direction(np.array([1.0, 1.0]), np.array([1.0, 0.0]))


def test_sym_probe_quadratic_hand_example():
    x = np.array([[1.0], [0.0]])
    t = np.zeros((2, 1))

    def loss(w):
        r = w @ x - t
        return 0.5 * float(np.sum(r * r))

    w0 = np.array([[0.3, -0.2], [0.5, 0.1]])
    z = lora.Direction(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    assert abs(lora.sym_perturb_probe(loss, w0, z, 0.1) - 0.005) <= 1e-15
    ratios = [lora.sym_perturb_probe(loss, w0, z, g) / g ** 2 for g in (0.1, 0.01, 0.001)]
    assert max(ratios) - min(ratios) <= 1e-10


def test_sym_probe_linear_loss_zero():
    c = np.random.default_rng(6).standard_normal((3, 2))
    rng = np.random.default_rng(7)
    z = lora.Direction(unit(rng, 3), unit(rng, 2))
    out = lora.sym_perturb_probe(lambda w: float(np.sum(c * w)), np.zeros((3, 2)), z, 0.1)
    assert abs(out) <= 1e-15


def test_sym_probe_rejects_bad_gamma_and_nonfinite():
    z = lora.Direction(np.array([1.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        lora.sym_perturb_probe(lambda w: 0.0, np.eye(1), z, 0.0)
    with pytest.raises(lora.ProbeError):
        lora.sym_perturb_probe(lambda w: float("inf") if w[0, 0] > 1 else 0.0, np.eye(1), z, 0.5)


def test_kfac_quadratic_loss_matches_kron():
    rng = np.random.default_rng(8)
    s_x, s_y = random_psd(rng, 3), random_psd(rng, 2)
    w_star = rng.standard_normal((2, 3))
    loss = lora.kfac_quadratic_loss(s_x, s_y, w_star)
    w = rng.standard_normal((2, 3))
    d = dense.vec(w - w_star)
    assert abs(loss(w) - 0.5 * d @ dense.kron(s_x, s_y) @ d) <= 1e-12


def test_probe_energy_exact_on_constructed_quadratic():
    rng = np.random.default_rng(9)
    for _ in range(16):
        m, n = rng.integers(1, 5, size=2)
        s_x, s_y = random_psd(rng, n), random_psd(rng, m)
        w0 = rng.standard_normal((m, n))
        # small offset keeps L(W0) from swamping the gamma**2 term at gamma=1e-3
        loss = lora.kfac_quadratic_loss(s_x, s_y, w0 + 1e-2 * rng.standard_normal((m, n)))
        z = lora.Direction(unit(rng, m), unit(rng, n))
        half = 0.5 * (z.v @ s_x @ z.v) * (z.u @ s_y @ z.u)
        for g in (1e-1, 1e-2, 1e-3):
            probe = lora.sym_perturb_probe(loss, w0, z, g) / g ** 2
            assert abs(probe - half) / half <= 1e-8


def small_model(seed):
    rng = np.random.default_rng(seed)
    model = mg.build_mlp([4, 5, 3], "tanh", rng)
    batch = mg.Batch(rng.standard_normal((4, 12)), rng.integers(0, 3, 12))
    return model, batch


def test_taylor_report_quadratic_constant_ratio():
    rng = np.random.default_rng(10)
    s_x, s_y = random_psd(rng, 3), random_psd(rng, 2)
    w0 = rng.standard_normal((2, 3))
    model, batch = small_model(0)
    d = lora.Direction(unit(rng, 2), unit(rng, 3))
    rep = lora.taylor_report(model, batch, w0, [d], factors=(s_x, s_y),
                             loss_eval=lora.kfac_quadratic_loss(s_x, s_y, w0 + 0.1))
    curv = [r["probe_curvature"] for r in rep.rows]
    assert max(curv) - min(curv) <= 1e-10 * max(curv)


def test_taylor_report_zero_curvature_ranks_last():
    s_x = np.diag([1.0, 0.0])
    s_y = np.eye(1)
    w0 = np.zeros((1, 2))
    model = mg.Model((mg.LinearLayer(np.zeros((1, 2))),), "mean-squared-error")
    batch = mg.Batch(np.zeros((2, 1)), np.zeros((1, 1)))
    dirs = [lora.Direction(np.array([1.0]), np.array([1.0, 0.0])),
            lora.Direction(np.array([1.0]), np.array([0.0, 1.0]))]
    rep = lora.taylor_report(model, batch, w0, dirs, gammas=(0.1,), factors=(s_x, s_y),
                             loss_eval=lora.kfac_quadratic_loss(s_x, s_y, w0))
    curv = [r["probe_curvature"] for r in rep.rows]
    energy = [r["half_energy"] for r in rep.rows]
    assert np.argmin(curv) == np.argmin(energy) == 1


def test_taylor_report_rerun_identical_and_duplicates():
    model, batch = small_model(11)
    rng = np.random.default_rng(12)
    w0 = np.array(model.linear_layers[1].weight)
    dirs = [lora.Direction(unit(rng, 3), unit(rng, 5)) for _ in range(16)]
    dirs.append(dirs[0])
    a = lora.taylor_report(model, batch, w0, dirs, layer_id=1)
    b = lora.taylor_report(model, batch, w0, dirs, layer_id=1)
    assert a.rows == b.rows
    first = [r for r in a.rows if r["direction"] == 0]
    dup = [r for r in a.rows if r["direction"] == 16]
    for r0, r1 in zip(first, dup):
        assert {k: v for k, v in r0.items() if k != "direction"} == {k: v for k, v in r1.items() if k != "direction"}


def test_taylor_report_validates_gammas():
    model, batch = small_model(13)
    w0 = np.array(model.linear_layers[0].weight)
    d = [lora.Direction(np.eye(5)[0], np.eye(4)[0])]
    with pytest.raises(ValueError):
        lora.taylor_report(model, batch, w0, d, gammas=(0.01, 0.1))


def test_preliminary_init_slices():
    w = np.diag([4.0, 3.0, 2.0, 1.0])
    r = dense.svd(w)
    for i in range(4):
        init = lora.preliminary_init(r, i, 1, "min", 1.0, n_groups=4, w0=w)
        np.testing.assert_array_equal(init.sigma_sel, [1.0])
        assert init.indices.tolist() == [i]
        assert np.max(np.abs(init.recompose() - w)) <= 1e-12
    top = lora.preliminary_init(r, 0, 1, "max", 1.0, n_groups=4, w0=w)
    np.testing.assert_array_equal(top.sigma_sel, [4.0])
    np.testing.assert_allclose(np.abs(top.B @ top.A), 4.0 * np.outer(np.eye(4)[0], np.eye(4)[0]))


def test_preliminary_init_rank_and_bounds():
    rng = np.random.default_rng(14)
    w = rng.standard_normal((40, 36))
    r = dense.svd(w)
    init = lora.preliminary_init(r, 5, 1, "max", 2.0, w0=w)
    assert init.indices.tolist() == [(5 * 36) // 32]
    assert dense.numerical_rank(init.B @ init.A) <= 1
    with pytest.raises(ValueError):
        lora.preliminary_init(r, 0, 2, "min", 1.0, w0=w)  # 2 * 32 > 36
    with pytest.raises(ValueError):
        lora.preliminary_init(r, 32, 1, "min", 1.0, w0=w)


def test_lora_layer_gradients_match_finite_differences():
    rng = np.random.default_rng(15)
    model = mg.build_mlp([3, 4, 2], "tanh", rng)
    batch = mg.Batch(rng.standard_normal((3, 6)), rng.integers(0, 2, 6))
    w0 = np.array(model.linear_layers[0].weight)
    init = lora.decompose(w0, lora.build_factors(rng.standard_normal((4, 2)), rng.standard_normal((3, 2)),
                                                 [0.7, 1.3], 2.0))
    adapted = model.replace_linear(0, lora.LoraLayer(init))
    assert abs(mg.loss_value(adapted, batch) - mg.loss_value(model, batch)) <= 1e-12
    lr = 1e-6
    new, _ = mg.train_step(adapted, batch, [True, False], lr)
    grad_a = (init.A - new.linear_layers[0].init.A) / lr

    def loss_of_a(a):
        from dataclasses import replace
        return mg.loss_value(adapted.replace_linear(0, lora.LoraLayer(replace(init, A=a))), batch)

    eps = 1e-6
    fd = np.zeros_like(init.A)
    for i in range(init.A.shape[0]):
        for j in range(init.A.shape[1]):
            e = np.zeros_like(init.A)
            e[i, j] = eps
            fd[i, j] = (loss_of_a(init.A + e) - loss_of_a(init.A - e)) / (2 * eps)
    np.testing.assert_allclose(grad_a, fd, rtol=1e-5, atol=1e-8)
    np.testing.assert_array_equal(new.linear_layers[0].init.W_res, init.W_res)
