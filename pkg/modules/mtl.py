"""
Multi-task frameworks over BiLSTM-Max encoders.

- FS: one shared encoder, one classifier head per task.
- SP: shared encoder plus one private encoder per task; a sentence is
  [s_shared ; s_private].
- ASP: SP plus a task discriminator on the shared vectors (trained through a
  gradient-reversal boundary) and the diff penalty ||H_s^T H_p||_F^2.

The step objective is L = sum_k L_task^k + beta * L_adv + gamma * L_diff, with the
adversarial term's encoder gradient flipped by the reversal boundary.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from modules import ndgrad as nd
from modules.biatt import BiattentiveParams, biatt_classify, init_biattentive
from modules.encoder import EncoderParams, HiddenStates, encode_batch, init_encoder, max_pool, pair_features
from modules.ndgrad import ShapeError, Tensor
from modules.textdata import Batch, EmbeddingTable, Vocabulary

FRAMEWORKS = ("FS", "SP", "ASP")


class FrameworkError(ValueError):
    """An operation was asked of a model whose framework does not support it."""


def _glorot(rng: np.random.Generator, shape: tuple) -> Tensor:
    """Glorot-uniform weights, bound sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# --- Heads ---
@dataclass
class ClassifierHead:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.W2.shape[1]

    def forward(self, features: Tensor) -> Tensor:
        """Logits W2 sigmoid(W1 v + b1) + b2; softmax is applied by the loss."""
        if features.shape[-1] != self.input_dim:
            raise ShapeError(f"head expects {self.input_dim} features, got {features.shape[-1]}")
        squeeze = features.ndim == 1
        if squeeze:
            features = features.reshape(1, -1)
        hidden = nd.sigmoid(features @ self.W1 + self.b1)
        logits = hidden @ self.W2 + self.b2
        return logits[0] if squeeze else logits

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}W1": self.W1, f"{prefix}b1": self.b1, f"{prefix}W2": self.W2, f"{prefix}b2": self.b2}


def init_head(input_dim: int, hidden_dim: int, num_classes: int, rng: np.random.Generator) -> ClassifierHead:
    return ClassifierHead(_glorot(rng, (input_dim, hidden_dim)), Tensor(np.zeros(hidden_dim), requires_grad=True),
                          _glorot(rng, (hidden_dim, num_classes)), Tensor(np.zeros(num_classes), requires_grad=True))


@dataclass
class DiscriminatorParams:
    W: Tensor  # d_s x K
    b: Tensor  # K

    @property
    def num_tasks(self) -> int:
        return self.W.shape[1]

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}W": self.W, f"{prefix}b": self.b}


def init_discriminator(input_dim: int, num_tasks: int, rng: np.random.Generator) -> DiscriminatorParams:
    return DiscriminatorParams(_glorot(rng, (input_dim, num_tasks)), Tensor(np.zeros(num_tasks), requires_grad=True))


# --- Model ---
@dataclass
class MTLModel:
    framework: str
    tasks: list
    shared: EncoderParams
    heads: dict
    embeddings: EmbeddingTable | None = None
    vocab: Vocabulary | None = None
    private: dict = field(default_factory=dict)
    discriminator: DiscriminatorParams | None = None
    biatt: dict = field(default_factory=dict)
    beta: float = 0.0
    gamma: float = 0.0
    reversal_strength: float = 1.0
    diff_normalize: bool = True

    def __post_init__(self):
        if self.framework not in FRAMEWORKS:
            raise FrameworkError(f"unknown framework {self.framework!r}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError("task names must be unique")
        if set(self.heads) != set(self.tasks):
            raise ValueError("every task needs exactly one classifier head")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")
        if self.framework == "FS" and (self.private or self.discriminator or self.biatt):
            raise FrameworkError("FS models have no private encoders, discriminator or biattentive pooling")
        if self.framework in ("SP", "ASP") and set(self.private) != set(self.tasks):
            raise FrameworkError(f"{self.framework} needs one private encoder per task")
        if self.framework == "SP" and (self.discriminator is not None or self.beta or self.gamma):
            raise FrameworkError("SP models have no discriminator and use beta = gamma = 0")
        if self.framework == "ASP":
            if self.discriminator is None:
                raise FrameworkError("ASP models need a discriminator")
            if len(self.tasks) < 2 or self.discriminator.num_tasks != len(self.tasks):
                raise FrameworkError("adversarial training needs a discriminator over at least 2 tasks")

    @property
    def pooling(self) -> str:
        return "biatt" if self.biatt else "max"

    @property
    def hidden_dim(self) -> int:
        return self.shared.hidden_dim

    @property
    def input_dim(self) -> int:
        return self.shared.input_dim

    @property
    def mlp_dim(self) -> int:
        return self.heads[self.tasks[0]].hidden_dim

    @property
    def task_classes(self) -> dict[str, int]:
        return {task: self.heads[task].num_classes for task in self.tasks}

    def task_index(self, task: str) -> int:
        if task not in self.tasks:
            raise ValueError(f"unknown task '{task}' (model tasks: {', '.join(self.tasks)})")
        return self.tasks.index(task)

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors under stable names, in checkpoint order."""
        params = dict(self.shared.parameters("shared."))
        for task in self.tasks:
            if task in self.private:
                params.update(self.private[task].parameters(f"private.{task}."))
        for task in self.tasks:
            params.update(self.heads[task].parameters(f"head.{task}."))
        for task in self.tasks:
            if task in self.biatt:
                params.update(self.biatt[task].parameters(f"biatt.{task}."))
        if self.discriminator is not None:
            params.update(self.discriminator.parameters("disc."))
        return params

    def zero_grad(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()


def build_model(framework: str, task_classes: dict, embeddings: EmbeddingTable, hidden_dim: int,
                mlp_dim: int, seed: int, private_dim: int | None = None, pooling: str = "max",
                beta: float = 0.0, gamma: float = 0.0, reversal_strength: float = 1.0,
                diff_normalize: bool = True, vocab: Vocabulary | None = None) -> MTLModel:
    """Seeded initialisation; the discriminator is drawn last so SP and ASP share all other weights."""
    rng = np.random.default_rng(seed)
    tasks = list(task_classes)
    input_dim = embeddings.dim
    private_dim = private_dim or hidden_dim
    shared = init_encoder(input_dim, hidden_dim, rng)
    private = {}
    if framework in ("SP", "ASP"):
        private = {task: init_encoder(input_dim, private_dim, rng) for task in tasks}
    sentence_dim = 2 * hidden_dim + (2 * private_dim if private else 0)
    if pooling == "biatt":
        if not private:
            raise FrameworkError("biattentive pooling needs shared and private encoders")
        head_input = 2 * 12 * sentence_dim
        biatt = {task: init_biattentive(sentence_dim) for task in tasks}
    else:
        head_input = 4 * sentence_dim
        biatt = {}
    heads = {task: init_head(head_input, mlp_dim, task_classes[task], rng) for task in tasks}
    discriminator = init_discriminator(2 * hidden_dim, len(tasks), rng) if framework == "ASP" else None
    return MTLModel(framework, tasks, shared, heads, embeddings=embeddings, vocab=vocab, private=private,
                    discriminator=discriminator, biatt=biatt, beta=beta, gamma=gamma,
                    reversal_strength=reversal_strength, diff_normalize=diff_normalize)


# --- Forward passes ---
class ForwardResult(NamedTuple):
    logits: Tensor
    loss: Tensor
    shared_vectors: tuple          # (s1_shared, s2_shared), each B x 2d_s
    hidden_pairs: tuple            # ((H_s, H_p) for sentence 1, (H_s, H_p) for sentence 2); empty for FS


def _check_batch(batch: Batch, model: MTLModel) -> None:
    model.task_index(batch.task)
    if len(batch) == 0:
        raise ValueError("empty batch")


def fs_forward(batch: Batch, model: MTLModel) -> tuple[Tensor, Tensor]:
    """Shared encoder -> pair features -> task head; returns (logits, mean cross-entropy)."""
    if model.framework != "FS":
        raise FrameworkError(f"fs_forward called on a {model.framework} model")
    result = forward_batch(batch, model)
    return result.logits, result.loss


def sp_forward(batch: Batch, model: MTLModel) -> ForwardResult:
    """Shared and task-private encoders, concatenated per sentence; keeps H for L_diff."""
    if model.framework not in ("SP", "ASP"):
        raise FrameworkError(f"sp_forward called on a {model.framework} model")
    return forward_batch(batch, model)


def forward_batch(batch: Batch, model: MTLModel) -> ForwardResult:
    _check_batch(batch, model)
    table = model.embeddings
    s1, H1 = encode_batch(batch.tokens1, batch.mask1, table, model.shared)
    s2, H2 = encode_batch(batch.tokens2, batch.mask2, table, model.shared)
    head = model.heads[batch.task]
    if model.framework == "FS":
        logits = head.forward(pair_features(s1, s2))
        return ForwardResult(logits, nd.cross_entropy(logits, batch.labels), (s1, s2), ())

    private = model.private[batch.task]
    p1, P1 = encode_batch(batch.tokens1, batch.mask1, table, private)
    p2, P2 = encode_batch(batch.tokens2, batch.mask2, table, private)
    if model.pooling == "biatt":
        X = nd.concat([H1.H, P1.H], axis=-1)
        Y = nd.concat([H2.H, P2.H], axis=-1)
        logits = biatt_classify(X, Y, model.biatt[batch.task], head, batch.mask1, batch.mask2)
    else:
        logits = head.forward(pair_features(nd.concat([s1, p1], axis=-1), nd.concat([s2, p2], axis=-1)))
    return ForwardResult(logits, nd.cross_entropy(logits, batch.labels), (s1, s2), ((H1, P1), (H2, P2)))


def discriminator_logits(s_shared: Tensor, disc: DiscriminatorParams) -> Tensor:
    if s_shared.shape[-1] != disc.W.shape[0]:
        raise ShapeError(f"discriminator expects {disc.W.shape[0]} inputs, got {s_shared.shape[-1]}")
    squeeze = s_shared.ndim == 1
    if squeeze:
        s_shared = s_shared.reshape(1, -1)
    logits = s_shared @ disc.W + disc.b
    return logits[0] if squeeze else logits


def discriminator_forward(s_shared: Tensor, disc: DiscriminatorParams) -> Tensor:
    """Task probabilities softmax(W s + b) for a shared sentence vector (or a batch of them)."""
    return nd.softmax(discriminator_logits(s_shared, disc), axis=-1)


def adv_loss(model: MTLModel, s_shared: Tensor, task_ids) -> Tensor:
    """Mean cross-entropy of the discriminator on the true task ids.

    The shared vectors pass through a gradient-reversal boundary: the
    discriminator gets the plain gradient, the shared encoder gets it scaled by
    -reversal_strength.
    """
    if model.framework != "ASP" or model.discriminator is None:
        raise FrameworkError(f"adversarial loss needs an ASP model, got {model.framework}")
    reversed_vectors = nd.reverse_gradient(s_shared, model.reversal_strength)
    return nd.cross_entropy(discriminator_logits(reversed_vectors, model.discriminator), task_ids)


def diff_loss(H_s: HiddenStates, H_p: HiddenStates, normalize: bool = True) -> Tensor:
    """Mean over sentences of ||H_s^T H_p||_F^2 over unmasked rows."""
    if H_s.mask.shape != H_p.mask.shape or not np.array_equal(H_s.mask, H_p.mask):
        raise ShapeError("diff_loss: shared and private states have different masks")
    row_mask = H_s.mask[..., None]
    shared = nd.where(row_mask, H_s.H, 0.0)
    private = nd.where(row_mask, H_p.H, 0.0)
    if normalize:
        shared = nd.normalize_rows(shared)
        private = nd.normalize_rows(private)
    per_sentence = nd.squared_frobenius(nd.transpose(shared) @ private)
    return nd.reduce_mean(per_sentence)


# --- Losses ---
@dataclass
class LossBreakdown:
    task: dict
    adv: Tensor | None
    diff: Tensor | None
    total: Tensor

    def as_floats(self) -> dict:
        return {"task": {k: v.item() for k, v in self.task.items()},
                "adv": self.adv.item() if self.adv is not None else 0.0,
                "diff": self.diff.item() if self.diff is not None else 0.0,
                "total": self.total.item()}


def total_loss(task_losses: dict, adv: Tensor | None, diff: Tensor | None, beta: float, gamma: float) -> LossBreakdown:
    """L = sum_k L_task^k + beta * L_adv + gamma * L_diff."""
    if beta < 0 or gamma < 0:
        raise ValueError("beta and gamma must be non-negative")
    if not task_losses:
        raise ValueError("no task losses to combine")
    total = None
    for loss in task_losses.values():
        total = loss if total is None else total + loss
    if adv is not None:
        total = total + beta * adv
    if diff is not None:
        total = total + gamma * diff
    return LossBreakdown(dict(task_losses), adv, diff, total)


def cycle_loss(batches: list[Batch], model: MTLModel) -> tuple[LossBreakdown, dict]:
    """Forward every task batch of one round-robin cycle and combine the losses.

    Returns the breakdown and the ForwardResult per task.
    """
    task_losses, results = {}, {}
    adv_terms, diff_terms = [], []
    for batch in batches:
        if batch.task in task_losses:
            raise ValueError(f"task '{batch.task}' appears twice in one cycle")
        result = forward_batch(batch, model)
        task_losses[batch.task] = result.loss
        results[batch.task] = result
        if model.framework == "ASP":
            both = nd.concat(list(result.shared_vectors), axis=0)
            ids = np.full(both.shape[0], model.task_index(batch.task), dtype=np.int64)
            adv_terms.append(adv_loss(model, both, ids))
            (H1, P1), (H2, P2) = result.hidden_pairs
            diff_terms.append((diff_loss(H1, P1, model.diff_normalize) + diff_loss(H2, P2, model.diff_normalize)) * 0.5)
    adv = _sum(adv_terms)
    diff = _sum(diff_terms)
    return total_loss(task_losses, adv, diff, model.beta, model.gamma), results


def _sum(terms: list) -> Tensor | None:
    total = None
    for term in terms:
        total = term if total is None else total + term
    return total
