"""
Training loop for the multi-task frameworks.

- `sgd_step`: plain SGD, p <- p - lr * g, refusing non-finite gradients.
- `lr_update`: x0.99 every epoch, /5 when the mean dev accuracy drops, stop once
  lr falls below 1e-5. The rate is kept as initial_lr * decay^epoch / divisor^drops
  so that E drop-free epochs give exactly 0.1 * 0.99^E.
- `train_multitask`: round-robin cycles (one batch per task, losses summed, one
  SGD step per cycle), dev accuracy per task per epoch, `metrics.csv`, and a
  `model.ckpt` of the best mean-dev parameters.
- `grad_check`: central finite differences of the total loss against the
  analytic gradients, worst relative error per parameter.
"""

import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from modules import ndgrad as nd
from modules.app_logger import AppLogger, get_logger
from modules.checkpoint import save_checkpoint
from modules.config import ConfigError, TrainConfig
from modules.mtl import LossBreakdown, MTLModel, build_model, cycle_loss, discriminator_logits, forward_batch
from modules.ndgrad import Graph, NumericalError, ShapeError, Tensor
from modules.textdata import (DataFormatError, Dataset, EmbeddingTable, TaskSpec, Vocabulary, batch_iter,
                              build_vocab, load_embeddings, load_pair_dataset, merge_datasets, parse_synthetic_spec,
                              random_embeddings, read_pair_lines, read_task_manifest, synth_generate,
                              synthetic_embeddings, synthetic_vocabulary)

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "model.ckpt"
METRICS_COLUMNS = ["epoch", "lr", "task", "train_loss", "dev_acc", "adv_loss", "diff_loss"]


# --- Schedule ---
@dataclass
class TrainState:
    initial_lr: float = 0.1
    lr_decay: float = 0.99
    dev_drop_divisor: float = 5.0
    stop_threshold: float = 1e-5
    epoch: int = 0
    drops: int = 0
    best_mean_dev: float = -1.0
    best_epoch: int = 0
    best_dev: dict = field(default_factory=dict)
    dev_history: list = field(default_factory=list)
    stopped: bool = False
    rng: np.random.Generator | None = None

    @classmethod
    def from_config(cls, config: TrainConfig) -> "TrainState":
        return cls(config.initial_lr, config.lr_decay, config.dev_drop_divisor, config.stop_threshold,
                   rng=np.random.default_rng(config.seed))

    @property
    def lr(self) -> float:
        return self.initial_lr * self.lr_decay ** self.epoch / self.dev_drop_divisor ** self.drops


def lr_update(state: TrainState, mean_dev_acc: float) -> TrainState:
    """End-of-epoch schedule step; compares against the previous epoch's mean dev accuracy."""
    previous = state.dev_history[-1] if state.dev_history else None
    state.dev_history.append(float(mean_dev_acc))
    state.epoch += 1
    if previous is not None and mean_dev_acc < previous:
        state.drops += 1
    if state.lr < state.stop_threshold:
        state.stopped = True
    return state


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
    """p <- p - lr * g in place. Every gradient is checked before any parameter moves."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    updates = []
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != tensor.shape:
            raise ShapeError(f"gradient for '{name}' has shape {grad.shape}, parameter has {tensor.shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
        updates.append((tensor, grad))
    for tensor, grad in updates:
        tensor.data = tensor.data - lr * grad


def _grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: tensor.grad for name, tensor in params.items()}


# --- Data assembly ---
@dataclass
class TaskData:
    vocab: Vocabulary
    embeddings: EmbeddingTable
    specs: dict
    train: dict
    dev: dict
    test: dict = field(default_factory=dict)

    @property
    def task_classes(self) -> dict[str, int]:
        return {name: spec.num_classes for name, spec in self.specs.items()}


def synthetic_task_name(spec: str, position: int) -> str:
    kind, _ = parse_synthetic_spec(spec)
    return f"overlap{position}" if kind == "SHARED-OVERLAP" else f"marker{position}"


def _synthetic_tasks(config: TrainConfig) -> tuple[Vocabulary, dict, dict, dict]:
    vocab = synthetic_vocabulary()
    specs, train, dev = {}, {}, {}
    for position, spec in enumerate(config.synthetic_tasks):
        try:
            name = synthetic_task_name(spec, position)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        train_seed, dev_seed = np.random.SeedSequence([config.seed, position]).generate_state(2)
        train[name] = synth_generate(spec, config.synthetic_train_size, int(train_seed), vocab, name)
        dev[name] = synth_generate(spec, config.synthetic_dev_size, int(dev_seed), vocab, name)
        specs[name] = train[name].task
    return vocab, specs, train, dev


def _manifest_tasks(config: TrainConfig) -> tuple[Vocabulary, dict, dict, dict, dict]:
    grouped: dict[str, list[TaskSpec]] = {}
    for path in config.task_manifests:
        spec = read_task_manifest(path)
        if not spec.train or not spec.dev:
            raise DataFormatError("task manifest needs both 'train' and 'dev'", path)
        grouped.setdefault(spec.name, []).append(spec)
    for name, group in grouped.items():
        if len({s.num_classes for s in group}) != 1:
            raise DataFormatError(f"manifests for task '{name}' disagree on the number of classes")

    corpus = []
    for group in grouped.values():
        for spec in group:
            for _, _, tokens1, tokens2 in read_pair_lines(spec.train):
                corpus.append(tokens1)
                corpus.append(tokens2)
    vocab = build_vocab(corpus, config.min_count)

    specs, train, dev, test = {}, {}, {}, {}
    for name, group in grouped.items():
        def load(split):
            datasets = [load_pair_dataset(getattr(s, split), s, vocab) for s in group if getattr(s, split)]
            if not datasets:
                return None
            return datasets[0] if len(datasets) == 1 else merge_datasets(name, datasets)
        train[name], dev[name] = load("train"), load("dev")
        if not len(train[name]) or not len(dev[name]):
            raise DataFormatError(f"task '{name}' has an empty train or dev split")
        specs[name] = train[name].task
        test_set = load("test")
        if test_set is not None:
            test[name] = test_set
    return vocab, specs, train, dev, test


def build_tasks(config: TrainConfig, logger: AppLogger | None = None) -> TaskData:
    """Vocabulary, embedding table and datasets for every declared task; fails before any training."""
    logger = get_logger(logger)
    if bool(config.synthetic_tasks) == bool(config.task_manifests):
        raise ConfigError("declare tasks with exactly one of 'synthetic_tasks' or 'task_manifests'")
    test = {}
    if config.synthetic_tasks:
        vocab, specs, train, dev = _synthetic_tasks(config)
    else:
        vocab, specs, train, dev, test = _manifest_tasks(config)
    if config.embeddings:
        embeddings = load_embeddings(config.embeddings, vocab, config.oov_policy, config.seed)
        if embeddings.dim != config.embed_dim:
            logger.warn(f"   ...embedding file has d_w={embeddings.dim}, overriding embed_dim={config.embed_dim}")
    elif config.synthetic_tasks:
        embeddings = synthetic_embeddings(vocab, config.embed_dim, config.seed)
    else:
        embeddings = random_embeddings(vocab, config.embed_dim, config.seed)
    for name in specs:
        logger.log(f"   ...task '{name}': {len(train[name])} train / {len(dev[name])} dev"
                   + (f" / {len(test[name])} test" if name in test else ""))
    return TaskData(vocab, embeddings, specs, train, dev, test)


def model_for(config: TrainConfig, data: TaskData) -> MTLModel:
    return build_model(config.framework, data.task_classes, data.embeddings, config.hidden_dim, config.mlp_dim,
                       config.seed, private_dim=config.private_dim, pooling=config.pooling, beta=config.beta,
                       gamma=config.gamma, reversal_strength=config.reversal_strength,
                       diff_normalize=config.diff_normalize, vocab=data.vocab)


# --- Evaluation ---
def predict(model: MTLModel, dataset: Dataset, batch_size: int = 128) -> np.ndarray:
    predictions = [np.argmax(forward_batch(batch, model).logits.data, axis=-1)
                   for batch in batch_iter(dataset, batch_size)]
    return np.concatenate(predictions)


def evaluate_accuracy(model: MTLModel, dataset: Dataset, batch_size: int = 128) -> float:
    if len(dataset) == 0:
        raise ValueError(f"cannot evaluate on an empty '{dataset.task.name}' split")
    return float(np.mean(predict(model, dataset, batch_size) == dataset.labels))


# --- Steps ---
def train_step(model: MTLModel, batches: list, lr: float, adversarial_mode: str = "reversal") -> LossBreakdown:
    """One round-robin cycle: forward every task batch, backward the summed loss, one SGD update."""
    params = model.parameters()
    model.zero_grad()
    with Graph() as graph:
        breakdown, results = cycle_loss(batches, model)
        graph.backward(breakdown.total)
    if adversarial_mode == "alternating" and model.discriminator is not None:
        encoder_side = {name: t for name, t in params.items() if not name.startswith("disc.")}
        sgd_step(encoder_side, _grads(encoder_side), lr)
        discriminator_step(model, results, lr)
    else:
        sgd_step(params, _grads(params), lr)
    return breakdown


def discriminator_step(model: MTLModel, results: dict, lr: float) -> float:
    """Separate discriminator update on frozen shared vectors (alternating mode); beta weights only the encoder side."""
    disc = model.discriminator
    params = disc.parameters("disc.")
    for tensor in params.values():
        tensor.zero_grad()
    vectors, ids = [], []
    for task, result in results.items():
        for side in result.shared_vectors:
            vectors.append(side.data)
            ids.append(np.full(side.shape[0], model.task_index(task), dtype=np.int64))
    with Graph() as graph:
        loss = nd.cross_entropy(discriminator_logits(Tensor(np.concatenate(vectors)), disc), np.concatenate(ids))
        graph.backward(loss)
    sgd_step(params, _grads(params), lr)
    return loss.item()


# --- Training ---
@dataclass
class TrainResult:
    model: MTLModel
    metrics: pd.DataFrame
    state: TrainState
    data: TaskData
    test_accuracy: dict = field(default_factory=dict)


def _epoch_batches(data: TaskData, batch_size: int, rng: np.random.Generator) -> dict[str, list]:
    return {name: batch_iter(dataset, batch_size, shuffle_seed=int(rng.integers(2**31 - 1)))
            for name, dataset in data.train.items()}


def run_epoch(model: MTLModel, task_batches: dict, lr: float, adversarial_mode: str) -> dict:
    """Round-robin over tasks; a task whose batches run out sits out the remaining cycles."""
    loss_sums = {name: 0.0 for name in task_batches}
    loss_counts = {name: 0 for name in task_batches}
    adv_total = diff_total = 0.0
    cycles = max(len(batches) for batches in task_batches.values())
    for cycle in range(cycles):
        batches = [b[cycle] for b in task_batches.values() if cycle < len(b)]
        breakdown = train_step(model, batches, lr, adversarial_mode)
        values = breakdown.as_floats()
        for name, value in values["task"].items():
            loss_sums[name] += value
            loss_counts[name] += 1
        adv_total += values["adv"]
        diff_total += values["diff"]
    return {"train_loss": {n: loss_sums[n] / max(loss_counts[n], 1) for n in task_batches},
            "adv_loss": adv_total / cycles, "diff_loss": diff_total / cycles}


def _append_metrics(path: str | None, rows: list[dict], first: bool) -> None:
    if path is None:
        return
    pd.DataFrame(rows, columns=METRICS_COLUMNS).to_csv(path, mode="w" if first else "a", header=first,
                                                        index=False, lineterminator="\n")


def train_multitask(config: TrainConfig, out_dir: str | None = None, logger: AppLogger | None = None,
                    data: TaskData | None = None) -> TrainResult:
    logger = get_logger(logger)
    logger.log(f"--- Training {config.framework} ({config.pooling} pooling) seed={config.seed} ---")
    logger.log("1. Loading tasks...")
    data = data or build_tasks(config, logger)
    logger.log("2. Building model...")
    model = model_for(config, data)
    params = model.parameters()
    logger.log(f"   ...{len(params)} parameter tensors, {sum(t.size for t in params.values())} weights.")

    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, METRICS_FILE)

    logger.log("3. Training...")
    state = TrainState.from_config(config)
    rows: list[dict] = []
    best_params = {name: t.data.copy() for name, t in params.items()}
    while state.epoch < config.max_epochs and not state.stopped:
        lr = state.lr
        summary = run_epoch(model, _epoch_batches(data, config.batch_size, state.rng), lr, config.adversarial_mode)
        dev_acc = {name: evaluate_accuracy(model, dataset, config.batch_size) for name, dataset in data.dev.items()}
        mean_dev = float(np.mean(list(dev_acc.values())))
        epoch_rows = [{"epoch": state.epoch + 1, "lr": lr, "task": name,
                       "train_loss": summary["train_loss"][name], "dev_acc": dev_acc[name],
                       "adv_loss": summary["adv_loss"], "diff_loss": summary["diff_loss"]} for name in data.dev]
        _append_metrics(metrics_path, epoch_rows, first=not rows)
        rows.extend(epoch_rows)
        if mean_dev > state.best_mean_dev:
            state.best_mean_dev, state.best_epoch, state.best_dev = mean_dev, state.epoch + 1, dict(dev_acc)
            best_params = {name: t.data.copy() for name, t in params.items()}
        logger.log(f"   Epoch {state.epoch + 1} | lr {lr:.6g} | mean dev {mean_dev:.4f} | "
                   + " | ".join(f"{n} loss {summary['train_loss'][n]:.4f} acc {dev_acc[n]:.4f}" for n in dev_acc))
        lr_update(state, mean_dev)
    if state.stopped:
        logger.log(f"   ...learning rate {state.lr:.3g} below {config.stop_threshold:g}, stopping.")

    for name, tensor in params.items():
        tensor.data = best_params[name]
    logger.log(f"4. Best mean dev accuracy {state.best_mean_dev:.4f} at epoch {state.best_epoch}.")
    test_accuracy = {name: evaluate_accuracy(model, dataset, config.batch_size) for name, dataset in data.test.items()}
    for name, acc in test_accuracy.items():
        logger.log(f"   ...test accuracy '{name}': {acc:.4f}")
    if out_dir is not None:
        save_checkpoint(model, os.path.join(out_dir, CHECKPOINT_FILE))
        logger.log(f"   ...saved {CHECKPOINT_FILE} and {METRICS_FILE} to {out_dir}")
    return TrainResult(model, pd.DataFrame(rows, columns=METRICS_COLUMNS), state, data, test_accuracy)


# --- Gradient check ---
GRAD_FLOOR = 1e-6  # below this the relative error degrades to an absolute one (float64 central differences)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


@dataclass
class GradCheckReport:
    errors: dict
    checked: dict

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_error < tolerance


def _sample_indices(size: int, max_checks: int, rng: np.random.Generator) -> np.ndarray:
    """`max_checks` distinct flat positions drawn uniformly (all of them for small tensors)."""
    if size <= max_checks:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_checks, replace=False))


def _central_difference(tensor: Tensor, index: int, loss_fn: Callable[[], Tensor], eps: float) -> float:
    flat = tensor.data.reshape(-1)
    original = flat[index]
    flat[index] = original + eps
    plus = loss_fn().item()
    flat[index] = original - eps
    minus = loss_fn().item()
    flat[index] = original
    return (plus - minus) / (2.0 * eps)


def check_gradients(params: dict[str, Tensor], loss_fn: Callable[[], Tensor], eps: float = 1e-5,
                    perturb: Callable[[dict], None] | None = None, max_checks: int = 20,
                    seed: int = 0) -> GradCheckReport:
    """Analytic gradients of `loss_fn()` against central differences, per parameter tensor.

    Each tensor contributes `max_checks` seeded random entries, each measured once.
    `perturb`, when given, receives the analytic gradients (name -> array) and may
    modify them in place before the comparison.
    """
    for tensor in params.values():
        tensor.zero_grad()
    with Graph() as graph:
        graph.backward(loss_fn())
    analytic = {name: tensor.grad.copy() for name, tensor in params.items()}
    if perturb is not None:
        perturb(analytic)
    rng = np.random.default_rng(seed)
    errors, checked = {}, {}
    for name, tensor in params.items():
        tensor.data = np.ascontiguousarray(tensor.data)
        flat_grad = analytic[name].reshape(-1)
        indices = _sample_indices(flat_grad.size, max_checks, rng)
        errors[name] = max((relative_error(flat_grad[i], _central_difference(tensor, i, loss_fn, eps))
                            for i in indices), default=0.0)
        checked[name] = len(indices)
    return GradCheckReport(errors, checked)


def grad_check(model: MTLModel, batches: list, eps: float = 1e-5, perturb: Callable[[dict], None] | None = None,
               max_checks: int = 20, seed: int = 0) -> GradCheckReport:
    """Checks d(total loss)/d(theta) for every model parameter on one round-robin cycle.

    The reversal boundary is switched to a plain identity for the check so the
    analytic gradient is the true gradient of the total loss.
    """
    saved = model.reversal_strength
    model.reversal_strength = -1.0
    try:
        return check_gradients(model.parameters(), lambda: cycle_loss(batches, model)[0].total,
                               eps, perturb, max_checks, seed)
    finally:
        model.reversal_strength = saved
