"""Single-run training loop: SGD over tasks with strategy hooks.

The run owns all of its randomness through named substreams derived from
(master_seed, run_idx, site), so every stochastic site (weight init, epoch
shuffling, buffer sampling, memory subsampling, scratch reinit) reproduces
independently of the others. Strategies that never draw leave their streams
untouched, which is what makes the zeroed-strength and unlimited-buffer
equivalences bitwise.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, forward
from .errors import ConfigurationError, DataError
from .metrics import METRIC_NAMES, AccuracyMatrix, summarize_classification
from .models import predict
from .strategies import Strategy

# fixed per-site tags folded into the seed tuple
RNG_SITES = {
    "init": 0x11A7,
    "shuffle": 0x5F1E,
    "buffer": 0xB0FF,
    "memory": 0xA6E3,
    "reinit": 0x4E17,
}


def stream_rng(master_seed: int, run_idx: int, site: str) -> np.random.Generator:
    """The named substream for one stochastic site of one run."""
    if site not in RNG_SITES:
        raise ConfigurationError(f"unknown rng site {site!r}")
    seq = np.random.SeedSequence((int(master_seed), int(run_idx), RNG_SITES[site]))
    return np.random.default_rng(seq)


def stream_seed(master_seed: int, run_idx: int, site: str) -> int:
    """A plain integer seed drawn from the named substream."""
    return int(stream_rng(master_seed, run_idx, site).integers(0, 2**31 - 1))


def compute_class_weights(labels) -> tuple:
    """Inverse-proportion class weights, normalized to mean 1 over samples."""
    labels = np.asarray(labels)
    n = labels.size
    counts = np.array([np.sum(labels == 0), np.sum(labels == 1)], dtype=np.float64)
    if np.any(counts == 0):
        raise DataError("class weights need both classes present")
    return (n / (2.0 * counts[0]), n / (2.0 * counts[1]))


class TaskStream:
    """Ordered task partitions behind an access-counting facade.

    Every data read during tuning and training goes through ``get``, so the
    counter doubles as the protocol audit: tuning must leave every task
    index >= 2 at zero accesses.
    """

    def __init__(self, partitions, merge_val_into_train=False):
        self.partitions = list(partitions)
        self.merge_val_into_train = bool(merge_val_into_train)
        self.access_counts = {}

    def __len__(self):
        return len(self.partitions)

    def task_name(self, task_idx: int) -> str:
        return self.partitions[task_idx].task_name

    def get(self, task_idx: int, split: str):
        """(features, labels, patient_ids) for one partition of one task."""
        part = self.partitions[task_idx]
        key = (task_idx, split)
        self.access_counts[key] = self.access_counts.get(key, 0) + 1
        if split == "train":
            data = part.train
            if self.merge_val_into_train and part.val is not None:
                return (
                    np.concatenate([part.train.features(), part.val.features()]),
                    np.concatenate([part.train.labels, part.val.labels]),
                    np.concatenate([part.train.patient_ids, part.val.patient_ids]),
                )
        elif split == "val":
            data = part.val
            if data is None:
                raise DataError(f"task {task_idx} has no validation partition")
        elif split == "test":
            data = part.test
        else:
            raise ConfigurationError(f"unknown split {split!r}")
        return data.features(), data.labels, data.patient_ids

    def accesses_at_or_beyond(self, task_idx: int) -> int:
        return sum(
            count for (idx, _), count in self.access_counts.items() if idx >= task_idx
        )


@dataclass
class TrainerSettings:
    epochs_per_task: int = 40
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.0

    def validate(self):
        if self.epochs_per_task < 1:
            raise ConfigurationError("epochs_per_task must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")


@dataclass
class RunOutput:
    run_idx: int
    records: list = field(default_factory=list)
    acc_test: AccuracyMatrix | None = None
    acc_train: AccuracyMatrix | None = None
    epochs_run: dict = field(default_factory=dict)  # task_idx -> epoch count
    consumed_patients: list = field(default_factory=list)
    final_params: np.ndarray | None = None


def evaluate_seen_tasks(model, stream, upto_task, class_weights, splits=("test", "train")):
    """Metric rows for every seen task on the requested splits, plus one
    running-mean row per split (eval_task None, averaged where defined)."""
    rows = []
    for split in splits:
        per_task = []
        for j in range(upto_task + 1):
            features, labels, _ = stream.get(j, split)
            probs = predict(model, features)
            values = summarize_classification(probs, labels, class_weights)
            per_task.append(values)
            rows.append(
                {
                    "eval_task": j,
                    "eval_task_name": stream.task_name(j),
                    "split": split,
                    "metrics": values,
                }
            )
        means = {}
        for name in METRIC_NAMES:
            defined = [v[name] for v in per_task if v[name] is not None]
            means[name] = float(np.mean(defined)) if defined else None
        rows.append(
            {"eval_task": None, "eval_task_name": None, "split": split, "metrics": means}
        )
    return rows


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def run_single(
    build_model_fn,
    stream: TaskStream,
    strategy: Strategy,
    class_weights,
    settings: TrainerSettings,
    master_seed: int,
    run_idx: int,
    eval_splits=("test", "train"),
    n_train_tasks=None,
) -> RunOutput:
    """Train one model over the task stream under one strategy.

    build_model_fn(seed) must return a fresh Model; the trainer draws the
    init seed itself. Evaluation runs after every epoch on every seen task,
    on ``eval_splits``. Exactly settings.epochs_per_task epochs are spent on
    each task no matter what the strategy does. ``n_train_tasks`` caps how
    far into the stream training goes (the tuning loop stops after two).
    """
    settings.validate()
    n_tasks = len(stream) if n_train_tasks is None else min(n_train_tasks, len(stream))
    if n_tasks < 1:
        raise ConfigurationError("task stream is empty")

    model = build_model_fn(stream_seed(master_seed, run_idx, "init"))
    shuffle_rng = stream_rng(master_seed, run_idx, "shuffle")
    buffer_rng = stream_rng(master_seed, run_idx, "buffer")
    memory_rng = stream_rng(master_seed, run_idx, "memory")
    reinit_rng = stream_rng(master_seed, run_idx, "reinit")

    out = RunOutput(run_idx=run_idx)
    out.acc_test = AccuracyMatrix(n_tasks)
    out.acc_train = AccuracyMatrix(n_tasks)
    needs_observe = type(strategy).per_step_observe is not Strategy.per_step_observe

    for task_idx in range(n_tasks):
        task_x, task_y, task_pids = stream.get(task_idx, "train")
        strategy.before_task(model, task_idx, task_x, task_y, buffer_rng)
        if strategy.wants_scratch_model(task_idx):
            fresh_seed = int(reinit_rng.integers(0, 2**31 - 1))
            model = build_model_fn(fresh_seed)
        train_x, train_y = strategy.training_data(task_x, task_y, task_idx)
        n = train_y.shape[0]
        velocity = None
        for epoch in range(settings.epochs_per_task):
            order = shuffle_rng.permutation(n)
            for batch_idx in _batches(n, settings.batch_size, order):
                x = model.prepare_batch(train_x[batch_idx])
                yb = train_y[batch_idx]
                logits = forward(model.graph, model.params, x)
                loss = model.graph.loss(yb, class_weights)
                _, extra_dlogits = strategy.batch_loss(
                    model, x, logits, yb, class_weights
                )
                if extra_dlogits is not None:
                    loss.dlogits = loss.dlogits + extra_dlogits
                grad = backward(model.graph, loss)
                penalty_grad = strategy.penalty_gradient(model.params.values)
                if penalty_grad is not None:
                    grad = grad + penalty_grad
                grad = strategy.transform_gradient(
                    grad, model, class_weights, memory_rng
                )
                if settings.momentum > 0.0:
                    if velocity is None:
                        velocity = np.zeros_like(grad)
                    velocity = settings.momentum * velocity + grad
                    step = settings.learning_rate * velocity
                else:
                    step = settings.learning_rate * grad
                model.params.values -= step
                if needs_observe:
                    strategy.per_step_observe(grad, -step)
            last_epoch_rows = evaluate_seen_tasks(
                model, stream, task_idx, class_weights, splits=eval_splits
            )
            for row in last_epoch_rows:
                row.update(run=run_idx, trained_task=task_idx,
                           trained_task_name=stream.task_name(task_idx), epoch=epoch)
                out.records.append(row)
            out.epochs_run[task_idx] = out.epochs_run.get(task_idx, 0) + 1
        strategy.after_task(model, task_idx, task_x, task_y, buffer_rng)
        for row in last_epoch_rows:
            if row["eval_task"] is None or row["split"] not in ("test", "train"):
                continue
            value = row["metrics"]["balanced_accuracy"]
            if value is None:
                continue
            matrix = out.acc_test if row["split"] == "test" else out.acc_train
            matrix.set(task_idx, row["eval_task"], value)
        if "test" in eval_splits:
            _, _, test_pids = stream.get(task_idx, "test")
            test_set = set(test_pids.tolist())
        else:
            test_set = set()
        out.consumed_patients.append(
            {"task": task_idx, "train": set(task_pids.tolist()), "test": test_set}
        )
    out.final_params = model.params.values.copy()
    return out
