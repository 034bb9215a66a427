import numpy as np
import pytest

from breguq.errors import CheckpointFormatError
from breguq.linops import IdentityOp
from breguq.net import (NetArch, StageSpec, fit_strong, load_weights, net_backward,
                        net_forward, net_init, prior_loss_grads, save_weights)

SMALL = NetArch(latent_dim=8, base_rows=2, base_cols=2, base_channels=4,
                stages=(StageSpec(4),))
DEFAULT16 = NetArch(latent_dim=64, base_rows=4, base_cols=4, base_channels=8,
                    stages=(StageSpec(8), StageSpec(8)))

# frozen forward output of the first gradient-verified build
GOLDEN_SMALL = np.array([
    0.8148062634801734, 0.19244726390032527, -0.19200291114399654,
    0.17480514288505716, 0.8093385119375707, 0.7684362770529964,
    -0.07832157512372367, -0.19971362927453312, 0.11197417408385013,
    0.2378510787612326, 0.5666253742636823, 0.29725968788789253,
    0.38293617197919494, 0.05062136706180084, 0.1707998825666212,
    0.6880702060101623])


def finite_diff(fun, x0, h=1e-5):
    g = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        g[i] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def test_init_deterministic():
    np.testing.assert_array_equal(net_init(SMALL, seed=3), net_init(SMALL, seed=3))
    assert not np.array_equal(net_init(SMALL, seed=3), net_init(SMALL, seed=4))


def test_init_scale_limit_gives_zero_output():
    w = net_init(SMALL, seed=3, scale=1e-300)
    out = net_forward(SMALL, w, np.ones(8))
    assert np.max(np.abs(out)) < 1e-250


def test_init_per_layer_std():
    arch = NetArch(latent_dim=128, base_rows=4, base_cols=4, base_channels=8,
                   stages=(StageSpec(16),))
    w = net_init(arch, seed=5, scale=1.3)
    for p in arch.param_layout():
        if p.fan_in < 64 or p.size < 200:
            continue
        block = w[p.offset:p.offset + p.size]
        expected = 1.3 / np.sqrt(p.fan_in)
        assert abs(block.std() - expected) / expected < 0.10, p.name


def test_zero_weights_zero_output():
    out = net_forward(SMALL, np.zeros(SMALL.n_params), np.ones(8))
    np.testing.assert_array_equal(out, np.zeros((4, 4)))


def test_final_layer_linearity():
    rng = np.random.default_rng(6)
    w = net_init(SMALL, seed=7)
    layout = {p.name: p for p in SMALL.param_layout()}
    b = layout["final.b"]
    w[b.offset:b.offset + b.size] = 0.0
    z = rng.standard_normal(8)
    base = net_forward(SMALL, w, z)
    w2 = w.copy()
    fw = layout["final.W"]
    w2[fw.offset:fw.offset + fw.size] *= 2.0
    np.testing.assert_allclose(net_forward(SMALL, w2, z), 2.0 * base, rtol=1e-14)


def test_forward_regression_vector():
    w = net_init(SMALL, seed=2024, scale=1.0)
    z = np.random.default_rng(512).standard_normal(8)
    np.testing.assert_allclose(net_forward(SMALL, w, z).ravel(), GOLDEN_SMALL,
                               rtol=0, atol=1e-15)


def test_backward_zero_upstream():
    w = net_init(SMALL, seed=8)
    gz, gw = net_backward(SMALL, w, np.ones(8), np.zeros((4, 4)))
    assert not gz.any() and not gw.any()


def test_backward_dense_block_is_outer_product():
    # stages-free net with a pass-through final conv: dense weights see
    # exactly upstream (x) z
    arch = NetArch(latent_dim=5, base_rows=3, base_cols=2, base_channels=1,
                   stages=(), final_kernel_size=1)
    layout = {p.name: p for p in arch.param_layout()}
    w = np.zeros(arch.n_params)
    w[layout["dense.W"].offset:layout["dense.W"].offset + layout["dense.W"].size] = \
        np.random.default_rng(9).standard_normal(layout["dense.W"].size)
    w[layout["final.W"].offset] = 1.0
    z = np.random.default_rng(10).standard_normal(5)
    upstream = np.random.default_rng(11).standard_normal((3, 2))
    gz, gw = net_backward(arch, w, z, upstream)
    dW = layout["dense.W"]
    got = gw[dW.offset:dW.offset + dW.size].reshape(dW.shape)
    np.testing.assert_allclose(got, np.outer(upstream.ravel(), z), rtol=1e-14)
    W = w[dW.offset:dW.offset + dW.size].reshape(dW.shape)
    np.testing.assert_allclose(gz, W.T @ upstream.ravel(), rtol=1e-14)


def test_backward_matches_finite_differences_default_arch():
    rng = np.random.default_rng(12)
    arch = DEFAULT16
    w = net_init(arch, seed=13)
    z = rng.standard_normal(arch.latent_dim)
    upstream = rng.standard_normal(arch.out_shape)
    gz, gw = net_backward(arch, w, z, upstream)

    def f_z(zz):
        return float(np.sum(upstream * net_forward(arch, w, zz)))

    fd_z = finite_diff(f_z, z)
    for i in range(arch.latent_dim):
        assert rel_err(fd_z[i], gz[i]) <= 1e-5

    for i in rng.choice(arch.n_params, size=50, replace=False):
        wp = w.copy()
        wp[i] += 1e-5
        wm = w.copy()
        wm[i] -= 1e-5
        fd = (float(np.sum(upstream * net_forward(arch, wp, z)))
              - float(np.sum(upstream * net_forward(arch, wm, z)))) / 2e-5
        assert rel_err(fd, gw[i]) <= 1e-5


def test_backward_linear_activation_stage():
    arch = NetArch(latent_dim=6, base_rows=2, base_cols=2, base_channels=2,
                   stages=(StageSpec(3, activation="linear"),))
    rng = np.random.default_rng(14)
    w = net_init(arch, seed=15)
    z = rng.standard_normal(6)
    upstream = rng.standard_normal(arch.out_shape)
    gz, gw = net_backward(arch, w, z, upstream)
    fd_z = finite_diff(lambda zz: float(np.sum(upstream * net_forward(arch, w, zz))), z)
    np.testing.assert_allclose(gz, fd_z, rtol=1e-6, atol=1e-9)
    for i in rng.choice(arch.n_params, size=25, replace=False):
        wp = w.copy()
        wp[i] += 1e-5
        wm = w.copy()
        wm[i] -= 1e-5
        fd = (float(np.sum(upstream * net_forward(arch, wp, z)))
              - float(np.sum(upstream * net_forward(arch, wm, z)))) / 2e-5
        assert rel_err(fd, gw[i]) <= 1e-5


def test_forward_backward_pure():
    rng = np.random.default_rng(16)
    w = net_init(SMALL, seed=17)
    z = rng.standard_normal(8)
    up = rng.standard_normal((4, 4))
    np.testing.assert_array_equal(net_forward(SMALL, w, z), net_forward(SMALL, w, z))
    gz1, gw1 = net_backward(SMALL, w, z, up)
    gz2, gw2 = net_backward(SMALL, w, z, up)
    np.testing.assert_array_equal(gz1, gz2)
    np.testing.assert_array_equal(gw1, gw2)


def test_prior_loss_at_generator_output_is_zero():
    w = net_init(SMALL, seed=18)
    z = np.random.default_rng(19).standard_normal(8)
    x = net_forward(SMALL, w, z)
    loss, gz, gw = prior_loss_grads(x, z, w, 2.0, SMALL)
    assert loss == 0.0
    assert np.max(np.abs(gz)) < 1e-14 and np.max(np.abs(gw)) < 1e-14


def test_prior_loss_lambda_zero():
    w = net_init(SMALL, seed=20)
    loss, gz, gw = prior_loss_grads(np.ones((4, 4)), np.ones(8), w, 0.0, SMALL)
    assert loss == 0.0 and not gz.any() and not gw.any()


def test_prior_loss_finite_differences():
    rng = np.random.default_rng(21)
    w = net_init(SMALL, seed=22)
    z = rng.standard_normal(8)
    x = rng.standard_normal((4, 4))
    lam = 1.3
    _, gz, gw = prior_loss_grads(x, z, w, lam, SMALL)
    fd_z = finite_diff(
        lambda zz: prior_loss_grads(x, zz, w, lam, SMALL)[0], z)
    np.testing.assert_allclose(gz, fd_z, rtol=1e-5, atol=1e-9)
    for i in rng.choice(SMALL.n_params, size=20, replace=False):
        wp = w.copy()
        wp[i] += 1e-5
        wm = w.copy()
        wm[i] -= 1e-5
        fd = (prior_loss_grads(x, z, wp, lam, SMALL)[0]
              - prior_loss_grads(x, z, wm, lam, SMALL)[0]) / 2e-5
        assert rel_err(fd, gw[i]) <= 1e-5


def test_fit_strong_zero_iters_and_zero_eta():
    arch = SMALL
    y = np.zeros((4, 4))
    A = IdentityOp((4, 4))
    w0, trace0 = fit_strong(y, A, arch, seed=23, iters=0, eta=0.1)
    assert trace0 == []
    w1, trace1 = fit_strong(y, A, arch, seed=23, iters=5, eta=0.0)
    np.testing.assert_array_equal(w0, w1)
    assert len(set(trace1)) == 1


def test_fit_strong_converges_on_identity_instance():
    arch = NetArch(latent_dim=16, base_rows=2, base_cols=2, base_channels=8,
                   stages=(StageSpec(8), StageSpec(8)))
    target = net_forward(arch, net_init(arch, seed=99),
                         np.random.default_rng(3).standard_normal(16))
    w, trace = fit_strong(target, IdentityOp((8, 8)), arch, seed=7,
                          iters=2000, eta=1e-3)
    assert trace[-1] <= 1e-2 * trace[0]


def test_checkpoint_roundtrip(tmp_path):
    w = net_init(SMALL, seed=24)
    path = tmp_path / "w.dpnw"
    save_weights(path, SMALL, w)
    np.testing.assert_array_equal(load_weights(path, SMALL), w)
    assert path.stat().st_size == 24 + 8 * SMALL.n_params


def test_checkpoint_header_errors(tmp_path):
    w = net_init(SMALL, seed=25)
    path = tmp_path / "w.dpnw"
    save_weights(path, SMALL, w)
    raw = path.read_bytes()

    bad = tmp_path / "bad.dpnw"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointFormatError) as exc:
        load_weights(bad, SMALL)
    assert exc.value.offset == 0

    short = tmp_path / "short.dpnw"
    short.write_bytes(raw[:40])
    with pytest.raises(CheckpointFormatError) as exc:
        load_weights(short, SMALL)
    assert exc.value.offset == 40

    with pytest.raises(CheckpointFormatError):
        load_weights(path, DEFAULT16)  # architecture mismatch caught by header


def test_forward_rejects_bad_latent_and_upstream():
    w = net_init(SMALL, seed=26)
    with pytest.raises(ValueError):
        net_forward(SMALL, w, np.ones(9))
    with pytest.raises(ValueError):
        net_backward(SMALL, w, np.ones(8), np.ones((5, 5)))
    with pytest.raises(ValueError):
        net_forward(SMALL, w[:-1], np.ones(8))
