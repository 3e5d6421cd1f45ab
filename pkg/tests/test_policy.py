import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oodaug import data
from oodaug.envs import EnvSpec
from oodaug.numcore import TrainingDivergenceError, finite_difference_grads, max_relative_error
from oodaug.policy import (LOG_STD_MAX, LOG_STD_MIN, BCConfig, BoundaryError, GaussianPolicy,
                           bc_train, squashed_mode)
from oodaug.sampler import exploratory_choice


def tiny_policy(seed=0, obs_dim=3, hidden=(5,)):
    return GaussianPolicy(obs_dim, 2, hidden, rng=np.random.default_rng(seed))


def set_heads(p, mean_bias, log_std_bias):
    """Zero the output layer and set constant heads."""
    W, b = p.trunk.weights[-1], p.trunk.biases[-1]
    W[...] = 0.0
    b[:2] = mean_bias
    b[2:] = log_std_bias


def one_step_ds(s, a):
    t = data.Trajectory(states=s[None, :], actions=a[None, :], rewards=[1.0], dones=[True],
                        final_state=s, succeeded=True)
    return data.Dataset([t], "x").annotate(0.99)


def test_sample_near_mode_at_lower_clamp():
    # distance measured on the displacement the env applies (action * action_scale)
    scale = EnvSpec().action_scale
    p = tiny_policy()
    set_heads(p, [0.3, -0.4], -10.0)  # clamps to -5
    s = np.zeros((20_000, 3))
    a, _ = p.sample(s, np.random.default_rng(0))
    m = p.mean_action(s)
    assert np.mean(np.max(np.abs(a - m) * scale, axis=1) < 1e-2) > 0.999


def test_mirrored_net_gives_mirrored_mean():
    p = tiny_policy(seed=1, obs_dim=2, hidden=(4,))
    # odd function of the input: zero biases, tanh hidden layer
    for b in p.trunk.biases:
        b[...] = 0.0
    p.trunk.biases[-1][2:] = -1.0
    W = p.trunk.weights[-1]
    W[:, 2:] = 0.0
    x = np.array([0.3, -0.7])
    assert np.allclose(p.mean_action(x), -p.mean_action(-x), atol=1e-12)


def test_presquash_mean_monte_carlo():
    p = tiny_policy(seed=2)
    s = np.array([0.2, -0.1, 0.5])
    mu, log_std = p.dist_params(s)
    n = 100_000
    _, _, u = p.sample(np.repeat(s[None, :], n, axis=0), np.random.default_rng(3), return_presquash=True)
    assert np.all(np.abs(u.mean(axis=0) - mu) < 3 * np.exp(log_std) / np.sqrt(n))


def test_log_prob_consistent_with_sample():
    p = tiny_policy(seed=4)
    s = np.random.default_rng(0).normal(size=(50, 3))
    a, lp = p.sample(s, np.random.default_rng(1))
    keep = np.max(np.abs(a), axis=1) < 1 - 1e-9
    assert np.max(np.abs(p.log_prob(s[keep], a[keep]) - lp[keep])) < 1e-9


def test_log_prob_boundary_error():
    p = tiny_policy()
    with pytest.raises(BoundaryError):
        p.log_prob(np.zeros(3), np.array([1.0, 0.0]))


def test_mean_action_maximizes_density_on_grid():
    p = tiny_policy(seed=5)
    set_heads(p, [0.6, -0.3], np.log(0.8))  # wide enough that the squash moves the mode
    s = np.zeros(3)
    m = p.mean_action(s)
    g = np.linspace(-0.999, 0.999, 401)
    ax, ay = np.meshgrid(g, g, indexing="ij")
    grid = np.stack([ax.ravel(), ay.ravel()], axis=1)
    lp = p.log_prob(np.zeros((len(grid), 3)), grid)
    assert p.log_prob(s, m) >= lp.max() - 1e-12


def log_cosh(u):
    u = np.abs(u)
    return u + np.log1p(np.exp(-2 * u)) - np.log(2)


def test_squashed_mode_against_dense_search():
    rng = np.random.default_rng(6)
    mu = rng.normal(0, 1.5, size=200)
    sig = np.exp(rng.uniform(-3, 1, size=200))
    u = squashed_mode(mu, sig)
    for m, s, got in zip(mu, sig, u):
        grid = np.linspace(m - 2 * s * s - 1e-9, m + 2 * s * s + 1e-9, 20001)
        f = -(grid - m) ** 2 / (2 * s * s) + 2 * log_cosh(grid)
        best = grid[np.argmax(f)]
        fg = -(got - m) ** 2 / (2 * s * s) + 2 * log_cosh(got)
        assert fg >= f.max() - 1e-9 or abs(best - got) < 1e-3


def test_symmetric_actions_equal_log_prob():
    p = tiny_policy(seed=7)
    set_heads(p, [0.0, 0.0], np.log(0.5))
    s = np.zeros(3)
    a = np.tanh(np.array([0.4, -0.9]))
    assert p.log_prob(s, a) == pytest.approx(p.log_prob(s, -a), abs=1e-12)
    # away from zero the pre-squash Gaussian part is still symmetric
    set_heads(p, [0.5, -0.2], np.log(0.5))
    mu, log_std = p.dist_params(s)
    d = np.array([0.3, 0.7])
    lo, hi = np.tanh(mu - d), np.tanh(mu + d)
    jac = lambda a: np.sum(np.log1p(-a * a))  # noqa: E731
    assert p.log_prob(s, lo) + jac(lo) == pytest.approx(p.log_prob(s, hi) + jac(hi), abs=1e-12)


def test_density_integrates_to_one():
    p = tiny_policy(seed=8)
    set_heads(p, [0.3, -0.2], np.log(0.6))
    n = 200
    edges = np.linspace(-1, 1, n + 1)
    mids = 0.5 * (edges[1:] + edges[:-1])
    ax, ay = np.meshgrid(mids, mids, indexing="ij")
    grid = np.stack([ax.ravel(), ay.ravel()], axis=1)
    lp = p.log_prob(np.zeros((len(grid), 3)), grid)
    assert np.sum(np.exp(lp)) * (2 / n) ** 2 == pytest.approx(1.0, abs=0.01)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(-2 ** 20, 2 ** 20))
def test_selection_invariant_to_constant(seed, k, shift):
    # log-probs on a dyadic grid so that adding the shift is exact
    rng = np.random.default_rng(seed)
    p = GaussianPolicy(6, 2, (8,), rng=rng)
    s = rng.normal(size=6)
    a, _ = p.sample(np.repeat(s[None], k, axis=0), rng)
    lps = np.round(p.log_prob(np.repeat(s[None], k, axis=0), a) * 1024) / 1024
    q = rng.uniform(size=k)
    c = shift / 1024
    for tau in (np.inf, 0.5):
        assert exploratory_choice(lps, q, tau) == exploratory_choice(lps + c, q, tau)


def _bc_fd_instance(seed):
    rng = np.random.default_rng(seed)
    p = GaussianPolicy(3, 2, (4,), rng=rng)
    for w in p.trunk.params():
        w += rng.normal(0, 0.2, size=w.shape)
    s = rng.normal(size=(5, 3))
    a = np.tanh(rng.normal(size=(5, 2)))
    _, grads = p.nll_and_grads(s, a)
    num = finite_difference_grads(lambda: p.nll_and_grads(s, a)[0], p.trunk.params())
    return max_relative_error(grads, num)


def test_bc_loss_gradient_fd():
    assert max(_bc_fd_instance(s) for s in range(10)) < 1e-4


def test_nll_mean_gradient_is_scaled_l2():
    rng = np.random.default_rng(9)
    p = GaussianPolicy(3, 2, (6,), rng=rng)
    W, b = p.trunk.weights[-1], p.trunk.biases[-1]
    W[:, 2:] = 0.0
    b[2:] = np.log(0.4)
    s = rng.normal(size=(8, 3))
    a = np.tanh(rng.normal(size=(8, 2)))
    _, grads = p.nll_and_grads(s, a)
    u = np.arctanh(a)

    def l2():
        mu, _ = p.dist_params(s)
        return 0.5 * np.mean(np.sum((u - mu) ** 2, axis=1))

    num = finite_difference_grads(l2, [W, b])
    assert np.allclose(grads[-2][:, :2], num[0][:, :2] / 0.4 ** 2, rtol=1e-6, atol=1e-9)
    assert np.allclose(grads[-1][:2], num[1][:2] / 0.4 ** 2, rtol=1e-6, atol=1e-9)


def test_log_std_clamp_blocks_gradient():
    p = tiny_policy(seed=10)
    set_heads(p, [0.0, 0.0], LOG_STD_MAX + 3)
    _, grads = p.nll_and_grads(np.zeros((4, 3)), np.full((4, 2), 0.5))
    assert np.all(grads[-1][2:] == 0)
    _, ls = p.dist_params(np.zeros(3))
    assert np.all(ls == LOG_STD_MAX) and LOG_STD_MIN == -5.0


def test_bc_single_pair_interpolates():
    s, a = np.array([0.1, 0.2, -0.3]), np.array([0.35, -0.6])
    p = tiny_policy(seed=11)
    p, _ = bc_train(p, one_step_ds(s, a), BCConfig(epochs=3000, batch_size=None, lr=3e-3))
    assert np.max(np.abs(p.mean_action(s) - a)) < 1e-2


def test_bc_duplicated_dataset_same_curve():
    rng = np.random.default_rng(12)
    trajs = []
    for _ in range(4):
        n = 5
        trajs.append(data.Trajectory(states=rng.normal(size=(n, 3)), actions=np.tanh(rng.normal(size=(n, 2))),
                                     rewards=[0, 0, 0, 0, 1], dones=[0, 0, 0, 0, 1],
                                     final_state=np.zeros(3), succeeded=True))
    ds = data.Dataset(trajs, "x").annotate(0.99)
    dup = data.Dataset(trajs + trajs, "x").annotate(0.99)
    cfg = BCConfig(epochs=30, batch_size=None, lr=1e-2)
    _, l1 = bc_train(tiny_policy(seed=13), ds, cfg)
    _, l2 = bc_train(tiny_policy(seed=13), dup, cfg)
    assert np.allclose(l1, l2, rtol=1e-9, atol=1e-12)


def test_bc_does_not_mutate_dataset_and_is_deterministic():
    rng = np.random.default_rng(14)
    t = data.Trajectory(states=rng.normal(size=(7, 3)), actions=np.tanh(rng.normal(size=(7, 2))),
                        rewards=[0] * 6 + [1], dones=[0] * 6 + [1], final_state=np.zeros(3), succeeded=True)
    ds = data.Dataset([t], "x").annotate(0.99)
    before = data.to_bytes(ds)
    cfg = BCConfig(epochs=5, batch_size=3, seed=4)
    p1, c1 = bc_train(tiny_policy(seed=15), ds, cfg)
    p2, c2 = bc_train(tiny_policy(seed=15), ds, cfg)
    assert data.to_bytes(ds) == before
    assert c1 == c2 and np.array_equal(p1.trunk.get_flat(), p2.trunk.get_flat())


def test_bc_nan_raises_with_epoch():
    s, a = np.zeros(3), np.array([0.1, 0.1])
    p = tiny_policy()
    p.trunk.weights[0][0, 0] = np.nan
    with pytest.raises(TrainingDivergenceError) as ei:
        bc_train(p, one_step_ds(s + 1, a), BCConfig(epochs=2))
    assert ei.value.diagnostics["epoch"] == 0


def test_checkpoint_roundtrip_keeps_role():
    p = tiny_policy(seed=16)
    p.role = "proxy"
    q = GaussianPolicy.from_bytes(p.to_bytes())
    assert q.role == "proxy" and np.array_equal(q.trunk.get_flat(), p.trunk.get_flat())
    assert q.to_bytes() == p.to_bytes()
