import numpy as np
import pytest

from knowe.embedding import (
    EmbeddingNet,
    OptimConfig,
    contrastive_loss,
    info_nce,
    nn_probe_accuracy,
    sgd_step,
)
from knowe.errors import ConfigError, ShapeError
from knowe.numerics import finite_diff_grad, rel_error
from knowe.protocol import PRESETS, RunFlags, run_base_session


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_info_nce_single_term():
    rng = np.random.default_rng(0)
    q, kp = _unit(rng.normal(size=4)), _unit(rng.normal(size=4))
    kn = _unit(rng.normal(size=(3, 4)))
    tau = 0.2
    num = np.exp(q @ kp / tau)
    expected = -np.log(num / (num + np.exp(kn @ q / tau).sum()))
    loss, dq = info_nce(q, kp, kn, tau)
    assert abs(loss - expected) < 1e-12
    assert rel_error(dq, finite_diff_grad(lambda v: info_nce(v, kp, kn, tau)[0], q)) < 1e-7


def test_batch_loss_sums_per_sample_terms():
    rng = np.random.default_rng(1)
    q = _unit(rng.normal(size=(6, 5)))
    k = _unit(rng.normal(size=(6, 5)))
    coarse = np.array([0, 0, 1, 1, 1, 2])
    total, dq = contrastive_loss(q, k, coarse, 0.2)
    ref, ref_dq = 0.0, []
    for n in range(6):
        negs = [k[m] for m in range(6) if m != n and coarse[m] == coarse[n]]
        l, g = info_nce(q[n], k[n], np.array(negs).reshape(-1, 5), 0.2)
        ref += l
        ref_dq.append(g)
    assert abs(total - ref) < 1e-10
    np.testing.assert_allclose(dq, np.array(ref_dq), atol=1e-12)


def test_lone_sample_contributes_zero():
    q = _unit(np.ones((1, 3)))
    loss, dq = contrastive_loss(q, q, [0], 0.2)
    assert loss == 0.0 and np.all(dq == 0)


def test_contrastive_rejects_bad_input():
    with pytest.raises(ConfigError):
        contrastive_loss(np.zeros((0, 3)), np.zeros((0, 3)), [], 0.2)
    with pytest.raises(ConfigError):
        contrastive_loss(np.ones((1, 3)), np.ones((1, 3)), [0], 0.0)


def _net(seed=0, d_in=5):
    rng = np.random.default_rng(seed)
    return EmbeddingNet.create(d_in, rng, hidden=(7,), feature_dim=6, proj_hidden=5, proj_dim=4, X_ref=rng.normal(size=(20, d_in)))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    net = _net()
    X = rng.normal(size=(6, 5))
    coarse = np.array([0, 0, 0, 1, 1, 1])
    A = rng.normal(size=(6, 6))
    k = _unit(rng.normal(size=(6, 4)))

    def loss_of(net):
        f, q = net.forward(X)
        return float(np.sum(A * f)) + contrastive_loss(q, k, coarse, 0.2)[0]

    f, q, cache = net.forward_cache(X)
    _, dQ = contrastive_loss(q, k, coarse, 0.2)
    grads = net.backward(cache, A, dQ)
    for p, g in zip(net.params(), grads):
        def f_p(v, p=p):
            old = p.copy()
            p[...] = v
            out = loss_of(net)
            p[...] = old
            return out

        assert rel_error(g, finite_diff_grad(f_p, p.copy())) < 1e-5


def test_forward_single_and_batch_agree():
    net = _net()
    x = np.random.default_rng(3).normal(size=5)
    f1, q1 = net.forward(x)
    fb, qb = net.forward(x[None])
    np.testing.assert_array_equal(f1, fb[0])
    assert abs(np.linalg.norm(q1) - 1) < 1e-12
    with pytest.raises(ShapeError):
        net.features(np.ones((1, 4)))


def test_sgd_momentum_recurrence():
    opt = OptimConfig(lr=0.1, momentum=0.9, weight_decay=0.01)
    p = np.array([1.0, -2.0])
    v = [np.zeros(2)]
    g = np.array([0.5, 0.5])
    vs, ps = np.zeros(2), p.copy()
    for _ in range(3):
        sgd_step([p], [g], v, opt)
        vs = 0.9 * vs + g + 0.01 * ps
        ps = ps - 0.1 * vs
    np.testing.assert_allclose(p, ps, rtol=1e-14)


def test_sgd_mask_and_clip():
    opt = OptimConfig(lr=1.0, momentum=0.0, weight_decay=0.0, clip_norm=1.0)
    p = np.zeros(3)
    sgd_step([p], [np.array([3.0, 4.0, 0.0])], [np.zeros(3)], opt, [np.array([True, False, True])])
    np.testing.assert_allclose(p, [-0.6, 0.0, 0.0])


def test_optim_config_validation():
    for bad in (dict(lr=0), dict(momentum=1.0), dict(tau=-1), dict(batch_size=0), dict(clip_norm=0.0)):
        with pytest.raises(ConfigError):
            OptimConfig(**bad)


@pytest.fixture(scope="module")
def base_models(desk_stream):
    pre = PRESETS["desk"]
    return {c: run_base_session(desk_stream, RunFlags(contrastive_base=c), pre, 0) for c in (True, False)}


def test_base_session_learns_coarse_classes(base_models):
    assert base_models[True].base_coarse_accuracy >= 0.95


def test_base_training_deterministic(desk_stream, base_models):
    again = run_base_session(desk_stream, RunFlags(), PRESETS["desk"], 0)
    assert again.net.checksum() == base_models[True].net.checksum()


def test_contrastive_features_separate_fine_classes(desk_stream, base_models):
    tr, te = desk_stream.base_train, desk_stream.base_test
    acc = {c: nn_probe_accuracy(m.net, tr.X, tr.fine, te.X, te.fine) for c, m in base_models.items()}
    assert acc[True] > acc[False]
