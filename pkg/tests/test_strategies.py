"""Strategy math against hand values and brute-force oracles.

The projection oracles here are deliberately naive: exhaustive active-set
enumeration for the constrained projection and a dense grid scan for the
dual QP. Slow and obviously correct, so the fast implementations have
something independent to agree with.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import seqcl.autodiff as ad
import seqcl.strategies as cl
from seqcl.errors import (
    ConfigurationError,
    DataFormatError,
    QpNonConvergenceError,
    UsageError,
)
from seqcl.models import ArchitectureSpec, build_model


# ---------------------------------------------------------------------------
# oracles


def project_oracle(g, refs, margin):
    """Closest z to g with refs @ z >= margin, by trying every active set."""
    k = refs.shape[0]
    best, best_d = None, np.inf
    for mask in range(1 << k):
        active = [i for i in range(k) if mask >> i & 1]
        if not active:
            z = g.copy()
        else:
            sub = refs[active]
            gram = sub @ sub.T
            try:
                v = np.linalg.solve(gram, margin - sub @ g)
            except np.linalg.LinAlgError:
                continue
            if np.any(v < -1e-9):
                continue
            z = g + sub.T @ v
        if np.all(refs @ z >= margin - 1e-9):
            d = float(np.linalg.norm(z - g))
            if d < best_d:
                best, best_d = z, d
    return best


def qp_grid_oracle(h, b, hi=3.0, step=0.01):
    """argmin of (1/2)v'Hv + b'v over the grid [0, hi]^3."""
    ax = np.arange(0.0, hi + step / 2, step)
    x, y = np.meshgrid(ax, ax, indexing="ij")
    base = 0.5 * (h[0, 0] * x * x + h[1, 1] * y * y) + h[0, 1] * x * y
    base += b[0] * x + b[1] * y
    best_f, best_v = np.inf, None
    for z in ax:
        f = base + (h[0, 2] * x + h[1, 2] * y + b[2]) * z + 0.5 * h[2, 2] * z * z
        i, j = np.unravel_index(np.argmin(f), f.shape)
        if f[i, j] < best_f:
            best_f, best_v = f[i, j], np.array([ax[i], ax[j], z])
    return best_v


def kl_oracle(p, q):
    return float(np.sum(p * (np.log(p) - np.log(q))))


def softmax_oracle(logits):
    e = np.exp(logits - np.max(logits))
    return e / e.sum()


class _TinyModel:
    """Just enough of the model surface for compute_fisher."""

    def __init__(self, graph, params):
        self.graph = graph
        self.params = params

    def prepare_batch(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        return batch.reshape(batch.shape[0], -1)


def fd_gradient(fn, theta, eps=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += eps
        dn = theta.copy()
        dn[i] -= eps
        g[i] = (fn(up) - fn(dn)) / (2 * eps)
    return g


def small_model(seed=0):
    spec = ArchitectureSpec(kind="mlp", n_feature_layers=1, hidden_dim=4)
    return build_model(spec, input_dims=(3, 2), seed=seed)


def toy_task(n, seed, t=3, d=2):
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n, t, d))
    labels = (rng.random(n) < 0.5).astype(np.int64)
    return features, labels


# ---------------------------------------------------------------------------
# EWC


def test_ewc_penalty_hand_value():
    state = cl.EwcState(lam=2.0)
    state.anchors.append(np.array([0.0, 0.0]))
    state.fishers.append(np.array([1.0, 2.0]))
    theta = np.array([1.0, -1.0])
    assert cl.ewc_penalty(theta, state) == pytest.approx(3.0, abs=1e-15)


def test_ewc_penalty_zero_at_anchor_and_zero_lambda():
    theta = np.array([0.3, -0.7, 2.0])
    state = cl.EwcState(lam=5.0)
    state.anchors.append(theta.copy())
    state.fishers.append(np.array([1.0, 4.0, 0.5]))
    assert cl.ewc_penalty(theta, state) == 0.0
    state.lam = 0.0
    assert cl.ewc_penalty(theta + 1.0, state) == 0.0


def test_ewc_penalty_positive_off_anchor():
    state = cl.EwcState(lam=1.0)
    state.anchors.append(np.zeros(3))
    state.fishers.append(np.array([0.0, 1.0, 0.0]))
    assert cl.ewc_penalty(np.array([5.0, 0.0, 5.0]), state) == 0.0
    assert cl.ewc_penalty(np.array([0.0, 0.1, 0.0]), state) > 0.0


def test_ewc_gradient_matches_fd_over_multiple_anchors():
    rng = np.random.default_rng(3)
    state = cl.EwcState(lam=1.7)
    for _ in range(3):
        state.anchors.append(rng.normal(size=6))
        state.fishers.append(rng.random(6))
    theta = rng.normal(size=6)
    analytic = cl.ewc_penalty_gradient(theta, state)
    fd = fd_gradient(lambda t: cl.ewc_penalty(t, state), theta)
    assert np.max(np.abs(analytic - fd)) < 1e-6


def test_ewc_layout_mismatch_is_usage_error():
    state = cl.EwcState(lam=1.0)
    state.anchors.append(np.zeros(4))
    state.fishers.append(np.ones(4))
    with pytest.raises(UsageError):
        cl.ewc_penalty(np.zeros(5), state)


def test_fisher_hand_logistic_case():
    # Dense 1 -> 2 at zero weights, one sample x=1 with label 1: the
    # per-logit gradient is (0.5, -0.5), so every Fisher entry is 0.25.
    graph = ad.Graph([ad.Dense(1, 2)], ("flat", 1))
    params = ad.ParameterVector.zeros(graph.param_shapes())
    model = _TinyModel(graph, params)
    fisher = cl.compute_fisher(model, np.array([[1.0]]), np.array([1]))
    assert np.allclose(fisher, 0.25, atol=1e-15)


def test_fisher_nonnegative_and_duplication_invariant():
    model = small_model(seed=1)
    features, labels = toy_task(13, seed=2)
    fisher = cl.compute_fisher(model, features, labels, batch_size=5)
    assert np.all(fisher >= 0.0)
    doubled = cl.compute_fisher(
        model,
        np.concatenate([features, features]),
        np.concatenate([labels, labels]),
        batch_size=5,
    )
    assert np.allclose(doubled, fisher, rtol=1e-12, atol=1e-15)


def test_fisher_rejects_empty_data():
    model = small_model()
    with pytest.raises(UsageError):
        cl.compute_fisher(model, np.zeros((0, 3, 2)), np.zeros(0, dtype=int))


# ---------------------------------------------------------------------------
# Online EWC


def test_online_merge_cases():
    fresh = np.array([4.0])
    assert np.array_equal(cl.online_ewc_merge(None, fresh, 0.9), fresh)
    assert np.array_equal(cl.online_ewc_merge(np.array([7.0]), fresh, 0.0), fresh)
    assert np.array_equal(
        cl.online_ewc_merge(np.array([2.0]), fresh, 0.5), np.array([5.0])
    )


def test_online_penalty_zero_at_anchor_gradient_matches_fd():
    rng = np.random.default_rng(4)
    state = cl.OnlineEwcState(lam=2.2, decay=0.8)
    state.anchor = rng.normal(size=5)
    state.running_fisher = rng.random(5)
    assert cl.online_ewc_penalty(state.anchor, state) == 0.0
    theta = rng.normal(size=5)
    analytic = cl.online_ewc_penalty_gradient(theta, state)
    fd = fd_gradient(lambda t: cl.online_ewc_penalty(t, state), theta)
    assert np.max(np.abs(analytic - fd)) < 1e-6


# ---------------------------------------------------------------------------
# SI


def test_si_observe_hand_values():
    state = cl.SiState(strength=1.0)
    state.omega = np.zeros(1)
    cl.si_observe(state, np.array([2.0]), np.array([0.0]))
    assert state.omega[0] == 0.0
    cl.si_observe(state, np.array([2.0]), np.array([-0.1]))
    assert state.omega[0] == pytest.approx(0.2, abs=1e-15)


def test_si_observe_descent_contribution_is_nonnegative():
    state = cl.SiState(strength=1.0)
    state.omega = np.zeros(8)
    rng = np.random.default_rng(0)
    g = rng.normal(size=8)
    cl.si_observe(state, g, -0.05 * g)
    assert np.all(state.omega >= 0.0)


def test_si_consolidate_hand_value_and_reset():
    state = cl.SiState(strength=1.0, damping=1e-3)
    state.task_start = np.array([0.1])
    state.omega = np.array([0.2])
    cl.si_consolidate(state, np.array([0.0]))
    assert state.consolidated[0] == pytest.approx(0.2 / 0.011, rel=1e-12)
    assert state.omega[0] == 0.0
    assert state.anchor[0] == 0.0
    # fold in a zero omega: consolidated importance unchanged
    state.task_start = state.anchor.copy()
    before = state.consolidated.copy()
    cl.si_consolidate(state, np.array([0.0]))
    assert np.array_equal(state.consolidated, before)


def test_si_consolidate_survives_zero_drift():
    state = cl.SiState(strength=1.0, damping=1e-3)
    state.task_start = np.zeros(3)
    state.omega = np.ones(3)
    cl.si_consolidate(state, np.zeros(3))
    assert np.all(np.isfinite(state.consolidated))


def test_si_penalty_no_half_and_gradient_matches_fd():
    rng = np.random.default_rng(5)
    state = cl.SiState(strength=0.7)
    state.anchor = rng.normal(size=4)
    state.consolidated = rng.random(4)
    theta = rng.normal(size=4)
    diff = theta - state.anchor
    expected = 0.7 * float(np.sum(state.consolidated * diff * diff))
    assert cl.si_penalty(theta, state) == pytest.approx(expected, rel=1e-14)
    assert cl.si_penalty(state.anchor, state) == 0.0
    analytic = cl.si_penalty_gradient(theta, state)
    fd = fd_gradient(lambda t: cl.si_penalty(t, state), theta)
    assert np.max(np.abs(analytic - fd)) < 1e-6


# ---------------------------------------------------------------------------
# LwF


def test_lwf_identical_teacher_gives_plain_ce():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(5, 2))
    labels = np.array([0, 1, 0, 1, 1])
    ce = ad.weighted_cross_entropy(logits, labels, (1.0, 1.0))
    value = cl.lwf_loss(logits, logits.copy(), labels, alpha=3.0, temperature=2.0)
    assert value == pytest.approx(ce, rel=1e-12)


def test_lwf_alpha_zero_is_plain_ce():
    rng = np.random.default_rng(7)
    student = rng.normal(size=(4, 2))
    teacher = rng.normal(size=(4, 2))
    labels = np.array([0, 0, 1, 1])
    ce = ad.weighted_cross_entropy(student, labels, (1.0, 1.0))
    assert cl.lwf_loss(student, teacher, labels, 0.0, 1.0) == pytest.approx(ce)


def test_lwf_distillation_matches_in_test_kl_oracle():
    # One sample, T=1: teacher logits (1, 0) against student logits (0, 1).
    # The softmax gap makes the KL exactly sigma(1) - sigma(-1) = (e-1)/(e+1).
    teacher = np.array([[1.0, 0.0]])
    student = np.array([[0.0, 1.0]])
    labels = np.array([1])
    pt = softmax_oracle(teacher[0])
    ps = softmax_oracle(student[0])
    kl = kl_oracle(pt, ps)
    assert kl == pytest.approx((np.e - 1) / (np.e + 1), rel=1e-12)
    ce = ad.weighted_cross_entropy(student, labels, (1.0, 1.0))
    alpha = 0.9
    value = cl.lwf_loss(student, teacher, labels, alpha=alpha, temperature=1.0)
    assert value == pytest.approx(ce + alpha * kl, rel=1e-12)


def test_lwf_temperature_scales_squared():
    rng = np.random.default_rng(8)
    student = rng.normal(size=(3, 2))
    teacher = rng.normal(size=(3, 2))
    labels = np.array([1, 0, 1])
    t = 2.5
    ce = ad.weighted_cross_entropy(student, labels, (1.0, 1.0))
    manual = 0.0
    for s_row, t_row in zip(student, teacher):
        manual += kl_oracle(softmax_oracle(t_row / t), softmax_oracle(s_row / t))
    manual /= 3.0
    value = cl.lwf_loss(student, teacher, labels, alpha=1.3, temperature=t)
    assert value == pytest.approx(ce + 1.3 * t * t * manual, rel=1e-12)


def test_lwf_gradient_matches_fd():
    rng = np.random.default_rng(9)
    student = rng.normal(size=(4, 2))
    teacher = rng.normal(size=(4, 2))
    labels = np.array([0, 1, 1, 0])
    weights = (0.7, 1.6)
    _, dlogits = cl.lwf_loss_with_grad(student, teacher, labels, 1.1, 2.0, weights)
    eps = 1e-6
    for n in (0, 3):
        for j in (0, 1):
            up = student.copy()
            up[n, j] += eps
            dn = student.copy()
            dn[n, j] -= eps
            fd = (
                cl.lwf_loss(up, teacher, labels, 1.1, 2.0, weights)
                - cl.lwf_loss(dn, teacher, labels, 1.1, 2.0, weights)
            ) / (2 * eps)
            assert abs(dlogits[n, j] - fd) < 1e-8


def test_lwf_rejects_bad_temperature_and_shape():
    logits = np.zeros((2, 2))
    with pytest.raises(UsageError):
        cl.lwf_loss(logits, logits, np.array([0, 1]), 1.0, 0.0)
    with pytest.raises(UsageError):
        cl.lwf_loss(logits, np.zeros((3, 2)), np.array([0, 1]), 1.0, 1.0)


# ---------------------------------------------------------------------------
# replay buffer and GDumb policy


def test_replay_store_under_budget_keeps_everything():
    buffer = cl.ReplayBuffer()
    features, labels = toy_task(100, seed=10)
    cl.replay_store(buffer, features, labels, np.random.default_rng(0), budget=256)
    assert buffer.counts() == [100]
    stored_f, stored_y = buffer.tasks[0]
    assert np.array_equal(stored_f, features)
    assert np.array_equal(stored_y, labels)


def test_replay_store_draws_exact_budget_without_replacement():
    buffer = cl.ReplayBuffer()
    features = np.arange(1000, dtype=np.float64).reshape(1000, 1, 1)
    labels = np.zeros(1000, dtype=np.int64)
    cl.replay_store(buffer, features, labels, np.random.default_rng(1), budget=256)
    stored = buffer.tasks[0][0].ravel()
    assert stored.shape == (256,)
    assert len(np.unique(stored)) == 256
    # original stream order is preserved
    assert np.all(np.diff(stored) > 0)


def test_replay_store_same_seed_same_selection():
    picks = []
    for _ in range(2):
        buffer = cl.ReplayBuffer()
        features, labels = toy_task(500, seed=11)
        cl.replay_store(buffer, features, labels, np.random.default_rng(7), budget=64)
        picks.append(buffer.tasks[0][0])
    assert np.array_equal(picks[0], picks[1])


def test_replay_store_unlimited_is_rng_silent():
    buffer = cl.ReplayBuffer()
    features, labels = toy_task(50, seed=12)
    rng = np.random.default_rng(3)
    before = rng.bit_generator.state
    cl.replay_store(buffer, features, labels, rng, budget=None)
    assert rng.bit_generator.state == before
    assert buffer.counts() == [50]


def test_gdumb_quota_cases():
    assert cl.gdumb_quotas(256, 4) == [64, 64, 64, 64]
    assert cl.gdumb_quotas(6, 4) == [1, 1, 2, 2]
    assert cl.gdumb_quotas(6, 1) == [6]
    assert cl.gdumb_quotas(6, 7) == [0, 1, 1, 1, 1, 1, 1]
    with pytest.raises(UsageError):
        cl.gdumb_quotas(6, 0)


def test_gdumb_rebalance_keeps_most_recent_samples():
    # five tasks arriving one by one under budget 6; identities encode
    # (task, position) so sample-for-sample checks are direct
    budget = 6
    buffer = cl.ReplayBuffer()
    stream = []
    expected_quotas = {
        1: [6],
        2: [3, 3],
        3: [2, 2, 2],
        4: [1, 1, 2, 2],
        5: [1, 1, 1, 1, 2],
    }
    for t in range(1, 6):
        n = 10 + t
        features = (100.0 * t + np.arange(n, dtype=np.float64)).reshape(n, 1, 1)
        labels = np.full(n, t, dtype=np.int64)
        stream = list(buffer.tasks) + [(features, labels)]
        cl.gdumb_rebalance(buffer, stream, budget)
        assert buffer.counts() == expected_quotas[t]
        assert buffer.total() <= budget
        for k, (stored_f, _) in enumerate(buffer.tasks):
            task_id = k + 1
            n_k = 10 + task_id
            quota = expected_quotas[t][k]
            want = 100.0 * task_id + np.arange(n_k - quota, n_k)
            assert np.array_equal(stored_f.ravel(), want)


def test_gdumb_quota_shrinks_monotonically():
    for budget in (5, 6, 7, 11, 13, 256):
        previous = None
        for n in range(1, 12):
            quotas = cl.gdumb_quotas(budget, n)
            assert sum(quotas) == min(budget, sum(quotas)) <= budget
            if previous is not None:
                for k in range(n - 1):
                    assert quotas[k] <= previous[k]
            previous = quotas


# ---------------------------------------------------------------------------
# projections


def test_gem_project_feasible_returns_verbatim():
    g = np.array([1.0, 2.0])
    refs = np.array([[1.0, 0.0]])
    out = cl.gem_project(g, refs, margin=0.5)
    assert out is g


def test_gem_project_hand_halfspaces():
    z = cl.gem_project(np.array([0.0, -1.0]), np.array([[0.0, 1.0]]), 0.0)
    assert np.allclose(z, [0.0, 0.0], atol=1e-9)
    z = cl.gem_project(np.array([1.0, -1.0]), np.array([[0.0, 1.0]]), 0.0)
    assert np.allclose(z, [1.0, 0.0], atol=1e-9)


def test_gem_project_against_active_set_oracle():
    rng = np.random.default_rng(20)
    for _ in range(50):
        dim = int(rng.integers(2, 11))
        k = int(rng.integers(1, min(4, dim) + 1))
        g = rng.normal(size=dim)
        refs = rng.normal(size=(k, dim))
        margin = float(rng.random())
        z = cl.gem_project(g, refs, margin)
        assert np.all(refs @ z >= margin - 1e-6)
        oracle = project_oracle(g, refs, margin)
        assert oracle is not None
        assert abs(np.linalg.norm(z - g) - np.linalg.norm(oracle - g)) < 1e-5


def test_agem_hand_cases():
    g = np.array([1.0, 0.0])
    assert cl.agem_project(g, np.array([1.0, 0.0])) is g
    assert np.allclose(cl.agem_project(g, np.array([-1.0, 0.0])), [0.0, 0.0])
    assert np.allclose(
        cl.agem_project(np.array([1.0, -1.0]), np.array([0.0, 1.0])), [1.0, 0.0]
    )


def test_agem_zero_reference_is_identity():
    g = np.array([1.0, 2.0])
    assert cl.agem_project(g, np.zeros(2)) is g


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_agem_output_never_opposes_reference(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=6)
    ref = rng.normal(size=6)
    out = cl.agem_project(g, ref)
    assert float(out @ ref) >= -1e-12


def test_dual_qp_trivial_and_closed_form():
    v = cl.solve_dual_qp(np.eye(2), np.array([0.5, 1.0]))
    assert np.array_equal(v, [0.0, 0.0])
    v = cl.solve_dual_qp(np.eye(1), np.array([-1.0]))
    assert np.allclose(v, [1.0], atol=1e-9)


def test_dual_qp_matches_grid_oracle():
    rng = np.random.default_rng(21)
    for _ in range(3):
        a = rng.normal(scale=0.5, size=(3, 3))
        h = a @ a.T + np.eye(3)
        v_true = np.where(rng.random(3) < 0.4, 0.0, rng.random(3) * 2.5)
        slack = np.where(v_true == 0.0, rng.random(3), 0.0)
        b = -h @ v_true + slack
        v = cl.solve_dual_qp(h, b)
        assert np.max(np.abs(v - v_true)) < 1e-8
        v_grid = qp_grid_oracle(h, b)
        assert np.max(np.abs(v - v_grid)) < 0.02


def test_dual_qp_nonconvergence_carries_residual():
    # zero diagonal with a negative linear term: unbounded below, the
    # coordinate can never move, so the KKT residual stays at 1
    with pytest.raises(QpNonConvergenceError) as err:
        cl.solve_dual_qp(np.zeros((1, 1)), np.array([-1.0]), iters=10)
    assert err.value.residual == pytest.approx(1.0)
    assert err.value.iterations == 10


def test_dual_qp_shape_validation():
    with pytest.raises(UsageError):
        cl.solve_dual_qp(np.eye(3), np.array([1.0, 2.0]))


# ---------------------------------------------------------------------------
# strategy plugins driven directly


def test_naive_hooks_are_inert():
    s = cl.Naive()
    theta = np.ones(4)
    g = np.ones(4)
    assert s.loss_penalty(theta) == 0.0
    assert s.penalty_gradient(theta) is None
    assert s.transform_gradient(g, None, (1.0, 1.0), None) is g
    f, y = toy_task(5, seed=0)
    assert s.training_data(f, y, 0) == (f, y)


def test_replay_strategy_concatenates_oldest_first():
    s = cl.Replay(budget=4)
    model = small_model()
    rng = np.random.default_rng(0)
    f0, y0 = toy_task(4, seed=1)
    f1, y1 = toy_task(3, seed=2)
    s.after_task(model, 0, f0, y0, rng)
    merged_f, merged_y = s.training_data(f1, y1, 1)
    assert merged_f.shape[0] == 7
    assert np.array_equal(merged_f[:4], f0)
    assert np.array_equal(merged_f[4:], f1)
    assert np.array_equal(merged_y, np.concatenate([y0, y1]))


def test_cumulative_stores_everything_without_rng():
    s = cl.Cumulative()
    model = small_model()
    rng = np.random.default_rng(0)
    state_before = rng.bit_generator.state
    for t in range(3):
        f, y = toy_task(20 + t, seed=t)
        s.after_task(model, t, f, y, rng)
    assert s.buffer.counts() == [20, 21, 22]
    assert rng.bit_generator.state == state_before


def test_replay_budget_respected_across_tasks():
    s = cl.Replay(budget=16)
    model = small_model()
    rng = np.random.default_rng(0)
    for t in range(4):
        f, y = toy_task(100, seed=t)
        s.after_task(model, t, f, y, rng)
        assert max(s.buffer.counts()) <= 16
    assert s.buffer.total() == 64


def test_gdumb_strategy_rebalances_before_training():
    s = cl.Gdumb(budget=6)
    model = small_model()
    rng = np.random.default_rng(0)
    for t in range(4):
        f, y = toy_task(10, seed=t)
        s.before_task(model, t, f, y, rng)
    assert s.buffer.counts() == [1, 1, 2, 2]
    assert s.wants_scratch_model(3)
    f, y = toy_task(10, seed=9)
    merged_f, merged_y = s.training_data(f, y, 3)
    assert merged_y.shape[0] == 6


def test_gdumb_zero_budget_is_inert():
    s = cl.Gdumb(budget=0)
    model = small_model()
    rng = np.random.default_rng(0)
    f, y = toy_task(10, seed=0)
    s.before_task(model, 0, f, y, rng)
    assert s.buffer.tasks == []
    assert not s.wants_scratch_model(0)
    assert s.training_data(f, y, 0) == (f, y)


def test_gem_strategy_without_memories_is_identity():
    s = cl.Gem()
    g = np.ones(3)
    assert s.transform_gradient(g, None, (1.0, 1.0), None) is g


def test_gem_strategy_projects_against_stored_tasks():
    model = small_model(seed=3)
    s = cl.Gem(memory_strength=0.0, patterns_per_exp=8)
    rng = np.random.default_rng(0)
    f0, y0 = toy_task(8, seed=4)
    s.after_task(model, 0, f0, y0, rng)
    weights = (1.0, 1.0)
    ref = cl._memory_gradient(model, *s.buffer.tasks[0], weights)
    g = -ref  # maximally violating direction
    out = s.transform_gradient(g, model, weights, rng)
    assert float(out @ ref) >= -1e-6


def test_agem_strategy_samples_only_when_needed():
    model = small_model(seed=5)
    s = cl.Agem(patterns_per_exp=8, sample_size=16)
    rng = np.random.default_rng(0)
    f0, y0 = toy_task(8, seed=6)
    s.after_task(model, 0, f0, y0, rng)
    state_before = rng.bit_generator.state
    s.transform_gradient(np.zeros(model.params.size), model, (1.0, 1.0), rng)
    # 8 stored <= sample_size: no draw happened
    assert rng.bit_generator.state == state_before


def test_lwf_strategy_no_teacher_on_first_task():
    s = cl.Lwf(alpha=1.0, temperature=2.0)
    model = small_model(seed=7)
    f, y = toy_task(4, seed=8)
    s.before_task(model, 0, f, y, None)
    assert s.teacher_params is None
    value, dlogits = s.batch_loss(model, None, np.zeros((2, 2)), np.array([0, 1]), (1.0, 1.0))
    assert value == 0.0 and dlogits is None


def test_lwf_strategy_distills_from_task_start_copy():
    s = cl.Lwf(alpha=0.5, temperature=1.0)
    model = small_model(seed=9)
    f, y = toy_task(6, seed=10)
    s.before_task(model, 1, f, y, None)
    x = model.prepare_batch(f)
    logits = ad.forward(model.graph, model.params, x)
    value, dlogits = s.batch_loss(model, x, logits, y, (1.0, 1.0))
    # teacher is the task-start copy of an unmoved model: zero distillation
    assert value == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(dlogits, 0.0, atol=1e-15)
    # once the student moves, the pull is back toward the teacher
    model.params.values += 0.05
    logits = ad.forward(model.graph, model.params, x)
    value, dlogits = s.batch_loss(model, x, logits, y, (1.0, 1.0))
    assert value > 0.0


def test_si_strategy_full_task_cycle():
    s = cl.Si(si_lambda=0.3)
    model = small_model(seed=11)
    f, y = toy_task(4, seed=12)
    s.before_task(model, 0, f, y, None)
    g = np.ones(model.params.size)
    s.per_step_observe(g, -0.01 * g)
    model.params.values -= 0.01
    s.after_task(model, 0, f, y, None)
    assert s.loss_penalty(model.params.values) == 0.0  # at the new anchor
    assert s.loss_penalty(model.params.values + 0.1) > 0.0


# ---------------------------------------------------------------------------
# factory and checkpointing


def test_build_strategy_all_kinds():
    for kind in cl.STRATEGY_KINDS:
        s = cl.build_strategy(kind)
        assert s.kind == kind


def test_build_strategy_rejects_unknown_name_and_keys():
    with pytest.raises(ConfigurationError):
        cl.build_strategy("pnn")
    with pytest.raises(ConfigurationError):
        cl.build_strategy("naive", {"ewc_lambda": 1.0})
    with pytest.raises(ConfigurationError):
        cl.build_strategy("ewc", {"mem_size": 256})


def test_build_strategy_lambda_e_alias():
    s = cl.build_strategy("lwf", {"lambda_e": 0.25, "temperature": 2.0})
    assert s.alpha == 0.25
    with pytest.raises(ConfigurationError):
        cl.build_strategy("lwf", {"lambda_e": 0.25, "alpha": 0.5})


def test_build_strategy_grid_vocabulary():
    s = cl.build_strategy("gem", {"memory_strength": 0.4, "patterns_per_exp": 128})
    assert s.margin == 0.4
    s = cl.build_strategy("agem", {"sample_size": 512})
    assert s.sample_size == 512
    s = cl.build_strategy("gdumb", {"mem_size": 64})
    assert s.budget == 64


def test_replay_state_roundtrip(tmp_path):
    s = cl.Replay(budget=8)
    model = small_model()
    rng = np.random.default_rng(0)
    for t in range(2):
        f, y = toy_task(12, seed=t)
        s.after_task(model, t, f, y, rng)
    path = tmp_path / "replay_state"
    cl.save_strategy_state(s, path)
    fresh = cl.Replay(budget=1)
    cl.load_strategy_state(fresh, path)
    assert fresh.budget == 8
    assert fresh.buffer.counts() == s.buffer.counts()
    for (f_a, y_a), (f_b, y_b) in zip(s.buffer.tasks, fresh.buffer.tasks):
        assert np.array_equal(f_a, f_b)
        assert np.array_equal(y_a, y_b)


def test_ewc_state_roundtrip(tmp_path):
    s = cl.Ewc(ewc_lambda=3.0)
    model = small_model(seed=13)
    f, y = toy_task(9, seed=14)
    s.after_task(model, 0, f, y, None)
    path = tmp_path / "ewc_state"
    cl.save_strategy_state(s, path)
    fresh = cl.Ewc(ewc_lambda=0.0)
    cl.load_strategy_state(fresh, path)
    assert fresh.state.lam == 3.0
    assert np.array_equal(fresh.state.anchors[0], s.state.anchors[0])
    assert np.array_equal(fresh.state.fishers[0], s.state.fishers[0])
    theta = model.params.values + 0.3
    assert cl.ewc_penalty(theta, fresh.state) == cl.ewc_penalty(theta, s.state)


def test_lwf_state_roundtrip_rebinds_teacher(tmp_path):
    s = cl.Lwf(alpha=0.7, temperature=1.5)
    model = small_model(seed=15)
    f, y = toy_task(5, seed=16)
    s.before_task(model, 1, f, y, None)
    path = tmp_path / "lwf_state"
    cl.save_strategy_state(s, path)
    fresh = cl.Lwf()
    cl.load_strategy_state(fresh, path)
    model.params.values += 0.1
    x = model.prepare_batch(f)
    logits = ad.forward(model.graph, model.params, x)
    want, _ = s.batch_loss(model, x, logits, y, (1.0, 1.0))
    got, _ = fresh.batch_loss(model, x, logits, y, (1.0, 1.0))
    assert got == pytest.approx(want, rel=1e-12)


def test_state_kind_tag_mismatch_rejected(tmp_path):
    s = cl.Replay(budget=4)
    path = tmp_path / "state"
    cl.save_strategy_state(s, path)
    with pytest.raises(DataFormatError):
        cl.load_strategy_state(cl.Gdumb(), path)
