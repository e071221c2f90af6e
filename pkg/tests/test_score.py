"""Forward corruption kernel, score network, training loop, checkpoints."""

import math

import numpy as np
import pytest

from qudiff.rng import keyed_generator, normal_stream
from qudiff.score import (
    OuParams,
    ScoreNet,
    TrainConfig,
    conditional_score,
    gaussian_marginal_score,
    kde_score_oracle,
    load_checkpoint,
    loss_curve_csv,
    ou_kernel,
    sample_forward,
    save_checkpoint,
    silverman_bandwidth,
    train,
)


# ---------------------------------------------------------------------------
# transition kernel


def test_kernel_closed_form():
    p = OuParams(alpha=1.0, beta=1.0, t_end=1.0)
    m, var = ou_kernel(p, 0.5)
    assert abs(m - math.exp(-0.5)) < 1e-15
    assert abs(var - (1.0 - math.exp(-1.0))) < 1e-15
    m0, var0 = ou_kernel(p, 0.0)
    assert m0 == 1.0 and var0 == 0.0
    # stationary variance beta^2 / alpha
    p2 = OuParams(alpha=2.0, beta=0.5)
    assert abs(p2.stationary_variance - 0.125) < 1e-15
    _, var_inf = ou_kernel(p2, 50.0)
    assert abs(var_inf - 0.125) < 1e-12


def test_kernel_rejects_negative_time():
    with pytest.raises(ValueError):
        ou_kernel(OuParams(), -0.1)


def test_kernel_array_times():
    p = OuParams(alpha=1.3, beta=0.7)
    t = np.array([0.1, 0.4, 1.0])
    m, var = ou_kernel(p, t)
    assert np.allclose(m, np.exp(-1.3 * t))
    assert np.allclose(var, (0.49 / 1.3) * (1.0 - np.exp(-2.6 * t)))


def test_sample_forward_moments():
    p = OuParams(alpha=1.0, beta=1.0)
    x0 = np.full((60000, 1), 2.0)
    rng = keyed_generator(61, 0)
    x_t = sample_forward(x0, 0.7, p, rng)
    m, var = ou_kernel(p, 0.7)
    se_mean = math.sqrt(var / x0.shape[0])
    assert abs(x_t.mean() - 2.0 * m) < 3.0 * se_mean
    assert abs(x_t.var() - var) < 3.0 * var * math.sqrt(2.0 / x0.shape[0])


def test_sample_forward_exact_at_zero():
    p = OuParams()
    x0 = np.array([0.3, -1.2, 4.0])
    out = sample_forward(x0, 0.0, p, keyed_generator(62, 0))
    assert np.array_equal(out, x0)


def test_conditional_score_formula():
    p = OuParams(alpha=1.1, beta=0.9)
    x0 = np.array([0.5, -0.25])
    x_t = np.array([0.1, 0.4])
    m, var = ou_kernel(p, 0.3)
    assert np.allclose(conditional_score(x_t, x0, 0.3, p), -(x_t - m * x0) / var)
    with pytest.raises(ValueError):
        conditional_score(x_t, x0, 0.0, p)


# frozen from tests/oracles/gen_marginal_score.py (numerical quadrature of
# the corrupted marginal and its derivative; no Gaussian closed form used)
QUAD_CASES = [
    (-1.0, 2.190975250990531),
    (0.2, -0.10318826946174192),
    (1.5, -2.588532083285036),
]


def test_gaussian_marginal_score_vs_quadrature():
    p = OuParams(alpha=1.2, beta=0.8)
    for x, want in QUAD_CASES:
        got = gaussian_marginal_score(np.array([x]), 0.6, p, data_mean=0.3, data_var=0.49)
        assert abs(float(got[0]) - want) < 1e-9


def test_marginal_score_standard_normal_identity():
    # alpha = beta = 1 with N(0,1) data keeps the marginal N(0,1) at every t,
    # so the score is exactly -x
    p = OuParams(alpha=1.0, beta=1.0)
    x = np.linspace(-2, 2, 9)
    for t in (0.05, 0.3, 1.0):
        assert np.allclose(gaussian_marginal_score(x, t, p), -x, atol=1e-12)


# ---------------------------------------------------------------------------
# network


def test_fresh_network_is_zero_score():
    net = ScoreNet(dim=4, hidden=16, seed=0)
    out = net.forward(np.ones((5, 4)), 0.5)
    assert np.array_equal(out, np.zeros((5, 4)))


def test_forward_shapes():
    net = ScoreNet(dim=3, hidden=8, seed=1)
    assert net.forward(np.zeros(3), 0.2).shape == (3,)
    assert net.forward(np.zeros((7, 3)), np.full(7, 0.2)).shape == (7, 3)
    with pytest.raises(ValueError):
        net.forward(np.zeros((7, 4)), 0.2)
    with pytest.raises(ValueError):
        net.forward(np.zeros((7, 3)), np.full(6, 0.2))


# frozen from tests/oracles/gen_net_golden.py: dim=3, hidden=8, seed=123,
# output layer filled from stream (99, 0), input [0.4, -1.1, 0.25] at t=0.35
GOLDEN_FORWARD = [-0.9158365317383369, 0.40024688098068517, -1.1471629783248831]


def test_forward_golden_values():
    net = ScoreNet(dim=3, hidden=8, t_scale=1.0, seed=123)
    fill = normal_stream(99, 0, (net.w3.size + net.b3.size,))
    net.w3[...] = fill[: net.w3.size].reshape(net.w3.shape)
    net.b3[...] = fill[net.w3.size :]
    out = net.forward(np.array([0.4, -1.1, 0.25]), 0.35)
    assert np.allclose(out, GOLDEN_FORWARD, rtol=1e-12, atol=0)


def test_time_features_layout():
    net = ScoreNet(dim=2, hidden=4, t_scale=2.0, seed=0)
    f = net.time_features(np.array([1.0]))[0]
    u = 0.5
    assert np.allclose(
        f, [u, math.sin(2 * math.pi * u), math.cos(2 * math.pi * u), math.sin(4 * math.pi * u)]
    )


def test_gradients_match_finite_differences():
    # central differences over a spread of parameters in every layer
    net = ScoreNet(dim=3, hidden=8, seed=7)
    rng = keyed_generator(71, 0)
    # give the output layer nonzero weights so its gradients are generic
    net.w3[...] = 0.1 * rng.standard_normal(net.w3.shape)
    net.b3[...] = 0.1 * rng.standard_normal(net.b3.shape)
    x = rng.standard_normal((6, 3))
    t = rng.uniform(0.1, 1.0, 6)
    target = rng.standard_normal((6, 3))
    lam = rng.uniform(0.5, 1.5, 6)

    _, grads = net.loss_and_gradients(x, t, target, lam)
    eps = 1e-6
    checked = 0
    for name in net._PARAM_NAMES:
        p = getattr(net, name)
        flat = p.reshape(-1)
        for idx in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            keep = flat[idx]
            flat[idx] = keep + eps
            up, _ = net.loss_and_gradients(x, t, target, lam)
            flat[idx] = keep - eps
            dn, _ = net.loss_and_gradients(x, t, target, lam)
            flat[idx] = keep
            fd = (up - dn) / (2 * eps)
            an = grads[name].reshape(-1)[idx]
            assert abs(fd - an) <= 1e-5 * max(1.0, abs(fd))
            checked += 1
    assert checked >= 25


def test_loss_weighting():
    net = ScoreNet(dim=2, hidden=4, seed=3)
    x = np.ones((4, 2))
    t = np.full(4, 0.5)
    target = np.ones((4, 2))
    # zero network, unit targets: per-sample squared error is 2
    loss_unit, _ = net.loss_and_gradients(x, t, target, np.ones(4))
    assert abs(loss_unit - 2.0) < 1e-14
    loss_weighted, _ = net.loss_and_gradients(x, t, target, np.array([1.0, 2.0, 3.0, 4.0]))
    assert abs(loss_weighted - 5.0) < 1e-14


# ---------------------------------------------------------------------------
# training


def test_initial_loss_scale():
    # with sigma^2 weighting, the zero network's expected loss is
    # E[sigma_t^2 ||xi/sigma_t||^2] = d
    data = keyed_generator(81, 0).standard_normal((512, 4))
    net = ScoreNet(dim=4, hidden=16, seed=5)
    res = train(net, data, OuParams(), TrainConfig(steps=1, batch_size=4096, seed=11))
    assert abs(res.loss[0] - 4.0) < 0.5


def test_training_reduces_loss_and_learns_score():
    p = OuParams(alpha=1.0, beta=1.0)
    data = keyed_generator(82, 0).standard_normal((4096, 1))
    net = ScoreNet(dim=1, hidden=32, seed=9)
    cfg = TrainConfig(steps=800, batch_size=128, learning_rate=3e-3, seed=13)
    res = train(net, data, p, cfg)
    assert res.smoothed[-1] < res.smoothed[20] * 0.7
    # true marginal score for standard normal data is -x at every time
    x = np.linspace(-1.5, 1.5, 31)
    pred = net.forward(x[:, None], np.full(31, 0.5))[:, 0]
    rmse = float(np.sqrt(np.mean((pred + x) ** 2)))
    assert rmse < 0.25


def test_training_is_bit_deterministic():
    data = keyed_generator(83, 0).standard_normal((256, 2))
    runs = []
    for _ in range(2):
        net = ScoreNet(dim=2, hidden=8, seed=21)
        train(net, data, OuParams(), TrainConfig(steps=40, batch_size=32, seed=22))
        runs.append({k: v.copy() for k, v in net.parameters().items()})
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k])


def test_sgd_optimizer_runs():
    data = keyed_generator(84, 0).standard_normal((256, 1))
    net = ScoreNet(dim=1, hidden=8, seed=23)
    res = train(
        net, data, OuParams(), TrainConfig(steps=60, optimizer="sgd", learning_rate=1e-3, seed=24)
    )
    assert np.all(np.isfinite(res.loss))
    assert not np.array_equal(net.w3, np.zeros_like(net.w3))


def test_weighting_choices_agree_on_solvable_case():
    # both weightings share the same minimizer; after a short run the two
    # estimates of the score at mid-horizon should be close to each other
    p = OuParams()
    data = keyed_generator(85, 0).standard_normal((2048, 1))
    nets = {}
    for weighting in ("sigma2", "one"):
        net = ScoreNet(dim=1, hidden=32, seed=25)
        train(net, data, p, TrainConfig(steps=600, weighting=weighting,
                                        learning_rate=3e-3, seed=26))
        nets[weighting] = net
    x = np.linspace(-1.5, 1.5, 21)[:, None]
    a = nets["sigma2"].forward(x, np.full(21, 0.6))
    b = nets["one"].forward(x, np.full(21, 0.6))
    rmse_a = float(np.sqrt(np.mean((a[:, 0] + x[:, 0]) ** 2)))
    rmse_b = float(np.sqrt(np.mean((b[:, 0] + x[:, 0]) ** 2)))
    assert abs(rmse_a - rmse_b) < 0.15


def test_train_validates_inputs():
    net = ScoreNet(dim=2, hidden=4, seed=1)
    with pytest.raises(ValueError):
        train(net, np.zeros((0, 2)), OuParams(), TrainConfig(steps=1))
    with pytest.raises(ValueError):
        train(net, np.zeros((4, 3)), OuParams(), TrainConfig(steps=1))
    with pytest.raises(ValueError):
        train(net, np.array([[np.nan, 0.0]]), OuParams(), TrainConfig(steps=1))


# ---------------------------------------------------------------------------
# sample-cloud score oracle


def test_kde_score_matches_brute_force():
    rng = keyed_generator(91, 0)
    pts = rng.standard_normal((40, 3))
    x = rng.standard_normal(3)
    h = 0.6
    got = kde_score_oracle(pts, h, x)
    # direct density-ratio evaluation, no log-sum-exp tricks
    w = np.exp(-np.sum((x - pts) ** 2, axis=1) / (2 * h * h))
    want = (w[:, None] * (pts - x)).sum(axis=0) / (w.sum() * h * h)
    assert np.allclose(got, want, atol=1e-12)


def test_kde_score_approaches_gaussian_limit():
    # a large standard-normal cloud with bandwidth h approximates N(0, 1+h^2);
    # its score at x is -x / (1 + h^2)
    rng = keyed_generator(92, 0)
    pts = rng.standard_normal((20000, 1))
    h = 0.5
    x = np.array([[0.7], [-1.1]])
    got = kde_score_oracle(pts, h, x)
    want = -x / (1 + h * h)
    assert np.max(np.abs(got - want)) < 0.05


def test_silverman_bandwidth_formula():
    rng = keyed_generator(93, 0)
    pts = rng.standard_normal((500, 2))
    sigma = float(np.mean(pts.std(axis=0, ddof=1)))
    want = sigma * (4.0 / (4.0 * 500)) ** (1.0 / 6.0)
    assert abs(silverman_bandwidth(pts) - want) < 1e-12


# ---------------------------------------------------------------------------
# persistence


def test_checkpoint_round_trip(tmp_path):
    net = ScoreNet(dim=4, hidden=8, t_scale=0.7, seed=31)
    rng = keyed_generator(94, 0)
    for name in net._PARAM_NAMES:
        getattr(net, name)[...] = rng.standard_normal(getattr(net, name).shape)
    path = tmp_path / "net.qsck"
    save_checkpoint(net, path, metadata={"note": "round trip", "steps": 12})
    back, meta = load_checkpoint(path)
    assert meta == {"note": "round trip", "steps": 12}
    assert back.dim == 4 and back.hidden == 8 and back.t_scale == 0.7
    for name in net._PARAM_NAMES:
        assert np.array_equal(getattr(back, name), getattr(net, name))
    # behavioral identity, not just parameter identity
    x = rng.standard_normal((3, 4))
    assert np.array_equal(back.forward(x, 0.3), net.forward(x, 0.3))


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "bad.qsck"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_loss_curve_csv(tmp_path):
    data = keyed_generator(95, 0).standard_normal((128, 1))
    net = ScoreNet(dim=1, hidden=4, seed=35)
    res = train(net, data, OuParams(), TrainConfig(steps=10, seed=36))
    path = tmp_path / "loss.csv"
    loss_curve_csv(res, path)
    rows = path.read_text().strip().split("\n")
    assert rows[0] == "step,loss,smoothed_loss"
    assert len(rows) == 11
    first = rows[1].split(",")
    assert float(first[1]) == res.loss[0]
    assert float(first[2]) == res.smoothed[0]
