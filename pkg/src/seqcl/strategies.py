"""Continual-learning strategy plugins.

Each strategy is a bundle of hooks consumed by the training loop: a loss
penalty, a gradient transform applied before the optimizer step, and
task-boundary callbacks that snapshot anchors or refill rehearsal buffers.
Unimplemented hooks are no-ops, so ``Naive`` is literally the base class.

The math lives in module-level functions (``ewc_penalty``, ``gem_project``,
``solve_dual_qp``, ...) so it can be checked against hand values and
brute-force oracles without building a model.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import blobio
from .autodiff import forward, log_softmax, softmax, weighted_ce_with_grad
from .errors import (
    ConfigurationError,
    DataFormatError,
    QpNonConvergenceError,
    UsageError,
)

log = logging.getLogger(__name__)

STRATEGY_KINDS = (
    "naive",
    "cumulative",
    "ewc",
    "online_ewc",
    "si",
    "lwf",
    "replay",
    "gdumb",
    "gem",
    "agem",
)


# ---------------------------------------------------------------------------
# regularization state and math


@dataclass
class EwcState:
    """One (anchor, Fisher) pair per finished task, shared strength."""

    lam: float
    anchors: list = field(default_factory=list)
    fishers: list = field(default_factory=list)


@dataclass
class OnlineEwcState:
    lam: float
    decay: float
    running_fisher: np.ndarray | None = None
    anchor: np.ndarray | None = None


@dataclass
class SiState:
    strength: float
    damping: float = 1e-3
    omega: np.ndarray | None = None
    consolidated: np.ndarray | None = None
    anchor: np.ndarray | None = None
    task_start: np.ndarray | None = None


def _aligned(theta, other, what):
    other = np.asarray(other, dtype=np.float64)
    if other.shape != theta.shape:
        raise UsageError(
            f"{what} has shape {other.shape}, parameters have {theta.shape}"
        )
    return other


def ewc_penalty(theta, state: EwcState) -> float:
    """sum over past tasks of (lam/2) * sum_i F_i (theta_i - anchor_i)^2."""
    theta = np.asarray(theta, dtype=np.float64)
    if len(state.anchors) != len(state.fishers):
        raise UsageError("anchor/fisher lists differ in length")
    total = 0.0
    for anchor, fisher in zip(state.anchors, state.fishers):
        anchor = _aligned(theta, anchor, "anchor")
        fisher = _aligned(theta, fisher, "fisher")
        diff = theta - anchor
        total += 0.5 * state.lam * float(np.dot(fisher, diff * diff))
    return total


def ewc_penalty_gradient(theta, state: EwcState) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for anchor, fisher in zip(state.anchors, state.fishers):
        anchor = _aligned(theta, anchor, "anchor")
        fisher = _aligned(theta, fisher, "fisher")
        grad += state.lam * fisher * (theta - anchor)
    return grad


def online_ewc_penalty(theta, state: OnlineEwcState) -> float:
    if state.anchor is None:
        return 0.0
    theta = np.asarray(theta, dtype=np.float64)
    diff = theta - _aligned(theta, state.anchor, "anchor")
    fisher = _aligned(theta, state.running_fisher, "running fisher")
    return 0.5 * state.lam * float(np.dot(fisher, diff * diff))


def online_ewc_penalty_gradient(theta, state: OnlineEwcState) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if state.anchor is None:
        return np.zeros_like(theta)
    fisher = _aligned(theta, state.running_fisher, "running fisher")
    return state.lam * fisher * (theta - _aligned(theta, state.anchor, "anchor"))


def online_ewc_merge(running, fresh, decay) -> np.ndarray:
    """Running importance update: decay * running + fresh."""
    fresh = np.asarray(fresh, dtype=np.float64)
    if running is None:
        return fresh.copy()
    running = np.asarray(running, dtype=np.float64)
    if running.shape != fresh.shape:
        raise UsageError("running and fresh importance vectors differ in shape")
    return decay * running + fresh


def si_observe(state: SiState, grad, delta) -> None:
    """Per-step path integral: omega += (-g) * delta_theta, elementwise."""
    grad = np.asarray(grad, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if state.omega is None:
        state.omega = np.zeros_like(grad)
    state.omega += (-grad) * delta


def si_consolidate(state: SiState, theta_end) -> None:
    """Fold this task's omega into the consolidated importance and re-anchor."""
    theta_end = np.asarray(theta_end, dtype=np.float64)
    if state.task_start is None:
        raise UsageError("si_consolidate before any task start")
    drift = theta_end - state.task_start
    contribution = state.omega / (drift * drift + state.damping)
    if state.consolidated is None:
        state.consolidated = np.zeros_like(theta_end)
    state.consolidated += contribution
    state.omega = np.zeros_like(theta_end)
    state.anchor = theta_end.copy()


def si_penalty(theta, state: SiState) -> float:
    """strength * sum_i Omega_i (theta_i - anchor_i)^2 (no 1/2)."""
    if state.consolidated is None or state.anchor is None:
        return 0.0
    theta = np.asarray(theta, dtype=np.float64)
    diff = theta - _aligned(theta, state.anchor, "anchor")
    omega = _aligned(theta, state.consolidated, "consolidated importance")
    return state.strength * float(np.dot(omega, diff * diff))


def si_penalty_gradient(theta, state: SiState) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if state.consolidated is None or state.anchor is None:
        return np.zeros_like(theta)
    omega = _aligned(theta, state.consolidated, "consolidated importance")
    return 2.0 * state.strength * omega * (theta - _aligned(theta, state.anchor, "anchor"))


def compute_fisher(model, features, labels, batch_size=64) -> np.ndarray:
    """Empirical Fisher diagonal at the model's current parameters.

    Mean over samples of the squared gradient of log p(y_n | x_n), with y_n
    the true label. Per-sample gradients come from one shared forward per
    chunk followed by single-row backward passes, which is exact because no
    layer mixes rows.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n == 0:
        raise UsageError("empirical Fisher needs at least one sample")
    x = model.prepare_batch(np.asarray(features, dtype=np.float64))
    acc = model.params.zeros_like()
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        logits = forward(model.graph, model.params, x[start:stop])
        probs = softmax(logits)
        for row in range(stop - start):
            dlogits = np.zeros_like(logits)
            y = int(labels[start + row])
            dlogits[row] = probs[row]
            dlogits[row, y] -= 1.0
            g = model.graph.backward_from_dlogits(dlogits)
            acc += g * g
    return acc / float(n)


# ---------------------------------------------------------------------------
# distillation


def lwf_loss_with_grad(student_logits, teacher_logits, labels, alpha, temperature,
                       class_weights=(1.0, 1.0)):
    """Weighted CE plus temperature-scaled distillation, with d/dlogits.

    value = CE(labels) + alpha * T^2 * KL(softmax(teacher/T) || softmax(student/T)),
    both terms averaged over the batch. The KL gradient w.r.t. the student
    logits is alpha * T * (p_student - p_teacher) / N.
    """
    if temperature <= 0:
        raise UsageError("temperature must be positive")
    student_logits = np.asarray(student_logits, dtype=np.float64)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if teacher_logits.shape != student_logits.shape:
        raise UsageError("teacher and student logits differ in shape")
    value, dlogits = weighted_ce_with_grad(student_logits, labels, class_weights)
    if alpha == 0.0:
        return value, dlogits
    n = student_logits.shape[0]
    log_ps = log_softmax(student_logits / temperature)
    log_pt = log_softmax(teacher_logits / temperature)
    pt = np.exp(log_pt)
    kl = float(np.sum(pt * (log_pt - log_ps))) / n
    value += alpha * temperature * temperature * kl
    dlogits = dlogits + alpha * temperature * (np.exp(log_ps) - pt) / n
    return value, dlogits


def lwf_loss(student_logits, teacher_logits, labels, alpha, temperature,
             class_weights=(1.0, 1.0)) -> float:
    value, _ = lwf_loss_with_grad(
        student_logits, teacher_logits, labels, alpha, temperature, class_weights
    )
    return value


# ---------------------------------------------------------------------------
# rehearsal buffers


@dataclass
class ReplayBuffer:
    """Per-task verbatim sample stores, in task-encounter order."""

    tasks: list = field(default_factory=list)  # [(features, labels), ...]

    def counts(self):
        return [int(labels.shape[0]) for _, labels in self.tasks]

    def total(self) -> int:
        return int(sum(self.counts()))

    def concat(self):
        """All stored samples, oldest task first; None when empty."""
        kept = [(f, y) for f, y in self.tasks if y.shape[0]]
        if not kept:
            return None
        features = np.concatenate([f for f, _ in kept], axis=0)
        labels = np.concatenate([y for _, y in kept], axis=0)
        return features, labels


def replay_store(buffer: ReplayBuffer, features, labels, rng, budget=256) -> None:
    """Append one task's sample: min(budget, N) drawn uniformly without
    replacement, kept in original stream order. budget=None stores everything
    (and draws nothing, so the unlimited case is RNG-silent)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = labels.shape[0]
    if budget is None or budget >= n:
        idx = np.arange(n)
    elif budget <= 0:
        idx = np.arange(0)
    else:
        idx = np.sort(rng.choice(n, size=int(budget), replace=False))
    buffer.tasks.append((features[idx].copy(), labels[idx].copy()))


def gdumb_quotas(budget: int, n_seen: int):
    """Per-task slot counts, oldest to newest: floor split plus one extra
    slot for each of the remainder-many most recent tasks."""
    if n_seen < 1:
        raise UsageError("quota split needs at least one task")
    base = budget // n_seen
    remainder = budget - base * n_seen
    quotas = [base] * n_seen
    for k in range(n_seen - remainder, n_seen):
        quotas[k] += 1
    return quotas


def gdumb_rebalance(buffer: ReplayBuffer, stream_tasks, budget: int) -> None:
    """Rebuild the buffer from the per-task stream: each task keeps its
    quota-many most recently encountered samples.

    Quotas only shrink as tasks accumulate, so passing the current buffer
    contents as the stream for already-stored tasks is exact.
    """
    quotas = gdumb_quotas(budget, len(stream_tasks))
    rebuilt = []
    for (features, labels), quota in zip(stream_tasks, quotas):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        keep = min(quota, labels.shape[0])
        start = labels.shape[0] - keep
        rebuilt.append((features[start:].copy(), labels[start:].copy()))
    buffer.tasks = rebuilt


# ---------------------------------------------------------------------------
# gradient projections


def solve_dual_qp(h, b, iters=5000, tol=1e-10) -> np.ndarray:
    """Minimize (1/2) v'Hv + b'v over v >= 0 by projected coordinate descent.

    H must be symmetric PSD. Convergence is declared when the KKT residual
    max(|r_i| for v_i > 0, max(0, -r_i) for v_i = 0), r = Hv + b, drops to
    tol; otherwise QpNonConvergenceError carries the last residual.
    """
    h = np.asarray(h, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k = b.shape[0]
    if h.shape != (k, k):
        raise UsageError(f"H must be {k}x{k}, got {h.shape}")
    v = np.zeros(k)
    diag = np.diag(h)
    residual = np.inf
    for sweep in range(iters):
        for i in range(k):
            if diag[i] <= 0.0:
                continue  # zero row of a PSD matrix; multiplier stays put
            r_i = h[i] @ v + b[i]
            v[i] = max(0.0, v[i] - r_i / diag[i])
        r = h @ v + b
        residual = float(np.max(np.where(v > 0.0, np.abs(r), np.maximum(0.0, -r))))
        if residual <= tol:
            return v
    raise QpNonConvergenceError(residual=residual, iterations=iters)


def gem_project(grad, references, margin, iters=5000, tol=1e-10) -> np.ndarray:
    """Project a gradient so every reference-gradient inner product clears
    the margin.

    If all constraints already hold the gradient is returned verbatim.
    Otherwise the result is the closest point z = g + G'v with
    <z, g_k> >= margin for every row g_k, found through the dual QP over
    multipliers v >= 0 with H = GG' and b = Gg - margin.
    """
    grad = np.asarray(grad, dtype=np.float64)
    refs = np.asarray(references, dtype=np.float64)
    if refs.ndim != 2 or refs.shape[1] != grad.shape[0]:
        raise UsageError(
            f"reference matrix must be [k, {grad.shape[0]}], got {refs.shape}"
        )
    dots = refs @ grad
    if np.all(dots >= margin):
        return grad
    h = refs @ refs.T
    b = dots - margin
    v = solve_dual_qp(h, b, iters=iters, tol=tol)
    return grad + refs.T @ v


def agem_project(grad, ref_grad) -> np.ndarray:
    """Single-constraint projection: remove the component opposing the
    reference gradient, if any."""
    grad = np.asarray(grad, dtype=np.float64)
    ref_grad = np.asarray(ref_grad, dtype=np.float64)
    if ref_grad.shape != grad.shape:
        raise UsageError("reference gradient shape mismatch")
    dot = float(grad @ ref_grad)
    if dot >= 0.0:
        return grad
    denom = float(ref_grad @ ref_grad)
    if denom == 0.0:
        log.warning("zero reference gradient; projection skipped")
        return grad
    return grad - (dot / denom) * ref_grad


# ---------------------------------------------------------------------------
# strategy plugins


class Strategy:
    """No-op hook bundle; subclasses override what they need.

    Hook order per task, as driven by the trainer: before_task, optional
    scratch reinit, training_data, then per batch (batch_loss, loss_penalty
    and penalty_gradient, transform_gradient, optimizer step, per_step_observe),
    and after_task once the epoch budget is spent.
    """

    kind = "naive"

    def before_task(self, model, task_idx, features, labels, rng) -> None:
        pass

    def wants_scratch_model(self, task_idx) -> bool:
        return False

    def training_data(self, features, labels, task_idx):
        return features, labels

    def batch_loss(self, model, batch, logits, labels, class_weights):
        """Extra loss on top of the weighted CE; returns (value, dlogits or None)."""
        return 0.0, None

    def loss_penalty(self, theta) -> float:
        return 0.0

    def penalty_gradient(self, theta):
        """Gradient of loss_penalty, or None when there is nothing to add."""
        return None

    def transform_gradient(self, grad, model, class_weights, rng):
        return grad

    def per_step_observe(self, grad, delta) -> None:
        pass

    def after_task(self, model, task_idx, features, labels, rng) -> None:
        pass

    def state_payload(self):
        """(meta, arrays) snapshot for checkpointing."""
        return {}, {}

    def restore_state(self, meta, arrays) -> None:
        pass


class Naive(Strategy):
    kind = "naive"


def _buffer_payload(buffer: ReplayBuffer):
    meta = {"n_tasks": len(buffer.tasks)}
    arrays = {}
    for k, (features, labels) in enumerate(buffer.tasks):
        arrays[f"task{k}.features"] = features
        arrays[f"task{k}.labels"] = np.asarray(labels, dtype=np.int64)
    return meta, arrays


def _restore_buffer(meta, arrays) -> ReplayBuffer:
    buffer = ReplayBuffer()
    for k in range(int(meta["n_tasks"])):
        buffer.tasks.append((arrays[f"task{k}.features"], arrays[f"task{k}.labels"]))
    return buffer


class Replay(Strategy):
    """Uniform per-task reservoirs concatenated into each new task's data."""

    kind = "replay"

    def __init__(self, budget=256):
        self.budget = budget  # per task; None = unlimited
        self.buffer = ReplayBuffer()

    def training_data(self, features, labels, task_idx):
        stored = self.buffer.concat()
        if stored is None:
            return features, labels
        old_f, old_y = stored
        return (
            np.concatenate([old_f, features], axis=0),
            np.concatenate([old_y, labels], axis=0),
        )

    def after_task(self, model, task_idx, features, labels, rng) -> None:
        replay_store(self.buffer, features, labels, rng, budget=self.budget)

    def state_payload(self):
        meta, arrays = _buffer_payload(self.buffer)
        meta["budget"] = self.budget
        return meta, arrays

    def restore_state(self, meta, arrays) -> None:
        self.budget = meta["budget"]
        self.buffer = _restore_buffer(meta, arrays)


class Cumulative(Replay):
    """Joint training on everything seen so far: replay without a budget."""

    kind = "cumulative"

    def __init__(self):
        super().__init__(budget=None)


class Gdumb(Strategy):
    """Quota-balanced buffer of most recent samples; the model is retrained
    from scratch on the buffer alone at every task boundary."""

    kind = "gdumb"

    def __init__(self, budget=256, scratch_retrain=True):
        self.budget = int(budget)
        self.scratch_retrain = bool(scratch_retrain)
        self.buffer = ReplayBuffer()

    @property
    def _inert(self) -> bool:
        return self.budget <= 0

    def before_task(self, model, task_idx, features, labels, rng) -> None:
        if self._inert:
            return
        stream = list(self.buffer.tasks) + [
            (np.asarray(features, dtype=np.float64), np.asarray(labels))
        ]
        gdumb_rebalance(self.buffer, stream, self.budget)

    def wants_scratch_model(self, task_idx) -> bool:
        return self.scratch_retrain and not self._inert

    def training_data(self, features, labels, task_idx):
        if self._inert:
            return features, labels
        stored = self.buffer.concat()
        if stored is None:
            return features, labels
        return stored

    def state_payload(self):
        meta, arrays = _buffer_payload(self.buffer)
        meta["budget"] = self.budget
        meta["scratch_retrain"] = self.scratch_retrain
        return meta, arrays

    def restore_state(self, meta, arrays) -> None:
        self.budget = int(meta["budget"])
        self.scratch_retrain = bool(meta["scratch_retrain"])
        self.buffer = _restore_buffer(meta, arrays)


class Ewc(Strategy):
    """Quadratic pull toward every past task's parameters, Fisher-weighted."""

    kind = "ewc"

    def __init__(self, ewc_lambda=1.0, fisher_batch_size=64):
        self.state = EwcState(lam=float(ewc_lambda))
        self.fisher_batch_size = int(fisher_batch_size)

    def loss_penalty(self, theta) -> float:
        if self.state.lam == 0.0 or not self.state.anchors:
            return 0.0
        return ewc_penalty(theta, self.state)

    def penalty_gradient(self, theta):
        if self.state.lam == 0.0 or not self.state.anchors:
            return None
        return ewc_penalty_gradient(theta, self.state)

    def after_task(self, model, task_idx, features, labels, rng) -> None:
        fisher = compute_fisher(model, features, labels, self.fisher_batch_size)
        self.state.anchors.append(model.params.values.copy())
        self.state.fishers.append(fisher)

    def state_payload(self):
        meta = {"lambda": self.state.lam, "n_tasks": len(self.state.anchors)}
        arrays = {}
        for k, (anchor, fisher) in enumerate(zip(self.state.anchors, self.state.fishers)):
            arrays[f"anchor{k}"] = anchor
            arrays[f"fisher{k}"] = fisher
        return meta, arrays

    def restore_state(self, meta, arrays) -> None:
        self.state = EwcState(lam=float(meta["lambda"]))
        for k in range(int(meta["n_tasks"])):
            self.state.anchors.append(arrays[f"anchor{k}"])
            self.state.fishers.append(arrays[f"fisher{k}"])


class OnlineEwc(Strategy):
    """Single decayed importance accumulator anchored at the latest task end."""

    kind = "online_ewc"

    def __init__(self, ewc_lambda=1.0, decay_factor=0.9, fisher_batch_size=64):
        if not 0.0 <= decay_factor <= 1.0:
            raise ConfigurationError("decay_factor must lie in [0, 1]")
        self.state = OnlineEwcState(lam=float(ewc_lambda), decay=float(decay_factor))
        self.fisher_batch_size = int(fisher_batch_size)

    def loss_penalty(self, theta) -> float:
        if self.state.lam == 0.0:
            return 0.0
        return online_ewc_penalty(theta, self.state)

    def penalty_gradient(self, theta):
        if self.state.lam == 0.0 or self.state.anchor is None:
            return None
        return online_ewc_penalty_gradient(theta, self.state)

    def after_task(self, model, task_idx, features, labels, rng) -> None:
        fresh = compute_fisher(model, features, labels, self.fisher_batch_size)
        self.state.running_fisher = online_ewc_merge(
            self.state.running_fisher, fresh, self.state.decay
        )
        self.state.anchor = model.params.values.copy()

    def state_payload(self):
        meta = {"lambda": self.state.lam, "decay": self.state.decay,
                "anchored": self.state.anchor is not None}
        arrays = {}
        if self.state.anchor is not None:
            arrays["running_fisher"] = self.state.running_fisher
            arrays["anchor"] = self.state.anchor
        return meta, arrays

    def restore_state(self, meta, arrays) -> None:
        self.state = OnlineEwcState(lam=float(meta["lambda"]), decay=float(meta["decay"]))
        if meta["anchored"]:
            self.state.running_fisher = arrays["running_fisher"]
            self.state.anchor = arrays["anchor"]


class Si(Strategy):
    """Path-integral importance accumulated during training itself."""

    kind = "si"

    def __init__(self, si_lambda=1.0, damping=1e-3):
        self.state = SiState(strength=float(si_lambda), damping=float(damping))

    def before_task(self, model, task_idx, features, labels, rng) -> None:
        self.state.task_start = model.params.values.copy()
        self.state.omega = model.params.zeros_like()

    def loss_penalty(self, theta) -> float:
        if self.state.strength == 0.0:
            return 0.0
        return si_penalty(theta, self.state)

    def penalty_gradient(self, theta):
        if self.state.strength == 0.0 or self.state.anchor is None:
            return None
        return si_penalty_gradient(theta, self.state)

    def per_step_observe(self, grad, delta) -> None:
        si_observe(self.state, grad, delta)

    def after_task(self, model, task_idx, features, labels, rng) -> None:
        si_consolidate(self.state, model.params.values)

    def state_payload(self):
        meta = {"strength": self.state.strength, "damping": self.state.damping}
        arrays = {}
        for name in ("omega", "consolidated", "anchor", "task_start"):
            value = getattr(self.state, name)
            if value is not None:
                arrays[name] = value
        return meta, arrays

    def restore_state(self, meta, arrays) -> None:
        self.state = SiState(strength=float(meta["strength"]), damping=float(meta["damping"]))
        for name in ("omega", "consolidated", "anchor", "task_start"):
            if name in arrays:
                setattr(self.state, name, arrays[name])


class Lwf(Strategy):
    """Logit distillation against a frozen copy taken at each task start."""

    kind = "lwf"

    def __init__(self, alpha=1.0, temperature=2.0):
        if temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        self.alpha = float(alpha)
        self.temperature = float(temperature)
        self.teacher_params = None
        self._teacher_graph = None

    def before_task(self, model, task_idx, features, labels, rng) -> None:
        if task_idx == 0 or self.alpha == 0.0:
            self.teacher_params = None
            return
        self.teacher_params = model.params.copy()

    def batch_loss(self, model, batch, logits, labels, class_weights):
        self.adopt_pending_teacher(model)
        if self.teacher_params is None:
            return 0.0, None
        if self._teacher_graph is None:
            self._teacher_graph = model.clone_graph()
        teacher_logits = forward(self._teacher_graph, self.teacher_params, batch)
        n = logits.shape[0]
        log_ps = log_softmax(logits / self.temperature)
        log_pt = log_softmax(teacher_logits / self.temperature)
        pt = np.exp(log_pt)
        kl = float(np.sum(pt * (log_pt - log_ps))) / n
        value = self.alpha * self.temperature * self.temperature * kl
        dlogits = self.alpha * self.temperature * (np.exp(log_ps) - pt) / n
        return value, dlogits

    def state_payload(self):
        meta = {"alpha": self.alpha, "temperature": self.temperature,
                "has_teacher": self.teacher_params is not None}
        arrays = {}
        if self.teacher_params is not None:
            arrays["teacher"] = self.teacher_params.values
        return meta, arrays

    def restore_state(self, meta, arrays) -> None:
        self.alpha = float(meta["alpha"])
        self.temperature = float(meta["temperature"])
        self.teacher_params = None
        if meta["has_teacher"]:
            self._pending_teacher = arrays["teacher"]

    def adopt_pending_teacher(self, model) -> None:
        """Rebind a checkpointed teacher vector to a model's layout."""
        pending = getattr(self, "_pending_teacher", None)
        if pending is not None:
            restored = model.params.copy()
            restored.values[:] = pending
            self.teacher_params = restored
            del self._pending_teacher


def _memory_gradient(model, features, labels, class_weights):
    x = model.prepare_batch(features)
    logits = forward(model.graph, model.params, x)
    _, dlogits = weighted_ce_with_grad(logits, labels, class_weights)
    return model.graph.backward_from_dlogits(dlogits)


class Gem(Strategy):
    """Hard per-task constraints: the step must not increase any stored
    task's loss, enforced through the dual QP projection."""

    kind = "gem"

    def __init__(self, memory_strength=0.5, patterns_per_exp=256,
                 qp_iters=5000, qp_tol=1e-10):
        if memory_strength < 0:
            raise ConfigurationError("memory_strength must be nonnegative")
        self.margin = float(memory_strength)
        self.patterns_per_exp = patterns_per_exp
        self.qp_iters = int(qp_iters)
        self.qp_tol = float(qp_tol)
        self.buffer = ReplayBuffer()

    def transform_gradient(self, grad, model, class_weights, rng):
        active = [(f, y) for f, y in self.buffer.tasks if y.shape[0]]
        if not active:
            return grad
        refs = np.stack(
            [_memory_gradient(model, f, y, class_weights) for f, y in active]
        )
        return gem_project(grad, refs, self.margin, iters=self.qp_iters, tol=self.qp_tol)

    def after_task(self, model, task_idx, features, labels, rng) -> None:
        replay_store(self.buffer, features, labels, rng, budget=self.patterns_per_exp)

    def state_payload(self):
        meta, arrays = _buffer_payload(self.buffer)
        meta.update(margin=self.margin, patterns_per_exp=self.patterns_per_exp)
        return meta, arrays

    def restore_state(self, meta, arrays) -> None:
        self.margin = float(meta["margin"])
        self.patterns_per_exp = meta["patterns_per_exp"]
        self.buffer = _restore_buffer(meta, arrays)


class Agem(Strategy):
    """Averaged single-constraint variant: one reference gradient from a
    random draw over the union of stored memories."""

    kind = "agem"

    def __init__(self, patterns_per_exp=256, sample_size=256):
        self.patterns_per_exp = patterns_per_exp
        self.sample_size = int(sample_size)
        self.buffer = ReplayBuffer()

    def transform_gradient(self, grad, model, class_weights, rng):
        stored = self.buffer.concat()
        if stored is None:
            return grad
        features, labels = stored
        total = labels.shape[0]
        if total > self.sample_size:
            idx = rng.choice(total, size=self.sample_size, replace=False)
            features, labels = features[idx], labels[idx]
        ref = _memory_gradient(model, features, labels, class_weights)
        return agem_project(grad, ref)

    def after_task(self, model, task_idx, features, labels, rng) -> None:
        replay_store(self.buffer, features, labels, rng, budget=self.patterns_per_exp)

    def state_payload(self):
        meta, arrays = _buffer_payload(self.buffer)
        meta.update(patterns_per_exp=self.patterns_per_exp, sample_size=self.sample_size)
        return meta, arrays

    def restore_state(self, meta, arrays) -> None:
        self.patterns_per_exp = meta["patterns_per_exp"]
        self.sample_size = int(meta["sample_size"])
        self.buffer = _restore_buffer(meta, arrays)


# ---------------------------------------------------------------------------
# construction and checkpointing

_ACCEPTED_KEYS = {
    "naive": set(),
    "cumulative": set(),
    "ewc": {"ewc_lambda", "fisher_batch_size"},
    "online_ewc": {"ewc_lambda", "decay_factor", "fisher_batch_size"},
    "si": {"si_lambda", "damping"},
    "lwf": {"alpha", "lambda_e", "temperature"},
    "replay": {"patterns_per_exp"},
    "gdumb": {"mem_size", "gdumb_scratch_retrain"},
    "gem": {"memory_strength", "patterns_per_exp", "qp_iters", "qp_tol"},
    "agem": {"patterns_per_exp", "sample_size"},
}


def build_strategy(name: str, hyperparams=None) -> Strategy:
    """Instantiate a strategy by name with its grid-vocabulary hyperparameters.

    ``lambda_e`` is accepted as an alias for the distillation weight
    ``alpha``; passing both with different values is an error.
    """
    hp = dict(hyperparams or {})
    if name not in _ACCEPTED_KEYS:
        raise ConfigurationError(
            f"unknown strategy {name!r}; expected one of {', '.join(STRATEGY_KINDS)}"
        )
    unknown = set(hp) - _ACCEPTED_KEYS[name]
    if unknown:
        raise ConfigurationError(
            f"strategy {name!r} does not accept {sorted(unknown)}"
        )
    if name == "lwf" and "lambda_e" in hp:
        lam_e = hp.pop("lambda_e")
        if "alpha" in hp and hp["alpha"] != lam_e:
            raise ConfigurationError("alpha and lambda_e disagree; set only one")
        hp["alpha"] = lam_e
    if name == "naive":
        return Naive()
    if name == "cumulative":
        return Cumulative()
    if name == "ewc":
        return Ewc(**hp)
    if name == "online_ewc":
        return OnlineEwc(**hp)
    if name == "si":
        return Si(**hp)
    if name == "lwf":
        return Lwf(**hp)
    if name == "replay":
        return Replay(budget=hp.get("patterns_per_exp", 256))
    if name == "gdumb":
        return Gdumb(
            budget=hp.get("mem_size", 256),
            scratch_retrain=hp.get("gdumb_scratch_retrain", True),
        )
    if name == "gem":
        return Gem(**hp)
    return Agem(**hp)


_STATE_PAYLOAD = "strategy-state"


def save_strategy_state(strategy: Strategy, path) -> None:
    meta, arrays = strategy.state_payload()
    header = {"payload": _STATE_PAYLOAD, "strategy": strategy.kind, "meta": meta}
    blobio.write_bundle(path, header, arrays)


def load_strategy_state(strategy: Strategy, path) -> None:
    """Restore checkpointed state into a strategy of the matching kind."""
    header, arrays = blobio.read_bundle(path)
    if header.get("payload") != _STATE_PAYLOAD:
        raise DataFormatError(f"not a strategy state bundle: {header.get('payload')!r}")
    if header.get("strategy") != strategy.kind:
        raise DataFormatError(
            f"state written by strategy {header.get('strategy')!r}, "
            f"loading into {strategy.kind!r}"
        )
    strategy.restore_state(header["meta"], arrays)
