"""
Probing harness for frozen sentence representations.

- `extract_features` / `sentence_features`: forward passes only, through the
  encoder(s) named by an encoder tag (`shared`, `private:<task>`, `concat[:<task>]`).
- `train_probe`: logistic or 2-layer MLP (512 hidden) classifier on standardized
  features, 80/20 train/held-out split, reports held-out accuracy.
- Auxiliary tasks: `aux_length` (8 fixed length bins), `aux_word_content`
  (frequency-decile matched negatives), `aux_word_order` (first-occurrence order).
- Baselines: `bag_of_embeddings_features` (position blind) and `random_features`.
- `cosine_eval`: cosine similarity per pair against gold scores, Spearman (average
  ranks) and Pearson via scipy.

Nothing here touches encoder parameters.
"""

import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from modules import ndgrad as nd
from modules.encoder import EncoderParams, encode_batch
from modules.mtl import FrameworkError, MTLModel, init_head
from modules.ndgrad import Graph, NumericalError, ShapeError, Tensor
from modules.textdata import Dataset, EmbeddingTable, SentenceSet, pad_sequences
from modules.trainer import sgd_step

PROBE_KINDS = ("logistic", "mlp-512")
LENGTH_BOUNDARIES = (5, 8, 12, 16, 20, 25, 30)
NUM_LENGTH_BINS = len(LENGTH_BOUNDARIES) + 1
REPORT_COLUMNS = ["probe", "encoder_tag", "metric", "value", "seed"]


# --- Features ---
@dataclass
class FeatureMatrix:
    ids: np.ndarray
    values: np.ndarray
    tag: str

    def __post_init__(self):
        if self.values.ndim != 2 or len(self.ids) != self.values.shape[0]:
            raise ShapeError(f"{len(self.ids)} ids for a feature matrix of shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("feature matrix holds non-finite values")

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def encoders_for_tag(model: MTLModel, tag: str, default_task: str | None = None) -> list[EncoderParams]:
    kind, _, task = tag.partition(":")
    if kind == "shared" and not task:
        return [model.shared]
    if kind not in ("private", "concat"):
        raise FrameworkError(f"unknown encoder tag '{tag}' (use shared, private:<task> or concat[:<task>])")
    if model.framework == "FS":
        raise FrameworkError(f"encoder tag '{tag}' needs private encoders; this is an FS model")
    task = task or (default_task if kind == "concat" else "")
    if not task:
        raise FrameworkError(f"encoder tag '{tag}' needs a task name")
    if task not in model.private:
        raise FrameworkError(f"no private encoder for task '{task}' (model tasks: {', '.join(model.tasks)})")
    return [model.private[task]] if kind == "private" else [model.shared, model.private[task]]


def sentence_features(sentences, model: MTLModel, tag: str = "shared", default_task: str | None = None,
                      batch_size: int = 128) -> np.ndarray:
    """N x D sentence vectors for a list of index sequences (or a SentenceSet)."""
    if isinstance(sentences, SentenceSet):
        default_task = default_task or sentences.task
        sentences = sentences.sentences
    if not len(sentences):
        raise ValueError("no sentences to encode")
    encoders = encoders_for_tag(model, tag, default_task)
    blocks = []
    for start in range(0, len(sentences), batch_size):
        ids, mask = pad_sequences(list(sentences[start:start + batch_size]))
        vectors = [encode_batch(ids, mask, model.embeddings, encoder)[0].data for encoder in encoders]
        blocks.append(np.concatenate(vectors, axis=-1))
    return np.concatenate(blocks, axis=0)


def pair_feature_values(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    return np.concatenate([s1, s2, s1 - s2, s1 * s2], axis=-1)


def extract_features(data: Dataset | SentenceSet, model: MTLModel, tag: str = "shared") -> FeatureMatrix:
    """Pair features for a pair dataset, sentence vectors for a sentence set."""
    if isinstance(data, SentenceSet):
        return FeatureMatrix(np.arange(len(data)), sentence_features(data, model, tag), tag)
    default_task = data.task.name
    s1 = sentence_features([e.tokens1 for e in data], model, tag, default_task)
    s2 = sentence_features([e.tokens2 for e in data], model, tag, default_task)
    return FeatureMatrix(np.array([e.id for e in data], dtype=np.int64), pair_feature_values(s1, s2), tag)


def write_feature_file(features: FeatureMatrix, path: str) -> None:
    """CSV: `id` column then D float columns named `<tag>|<D>|<j>`."""
    columns = [f"{features.tag}|{features.dim}|{j}" for j in range(features.dim)]
    frame = pd.DataFrame(features.values, columns=columns)
    frame.insert(0, "id", features.ids)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_feature_file(path: str) -> FeatureMatrix:
    frame = pd.read_csv(path, float_precision="round_trip")
    if frame.columns[0] != "id" or len(frame.columns) < 2:
        raise ValueError(f"{path}: not a feature file")
    tag, dim, _ = frame.columns[1].rsplit("|", 2)
    if int(dim) != len(frame.columns) - 1:
        raise ValueError(f"{path}: header declares D={dim}, found {len(frame.columns) - 1} columns")
    return FeatureMatrix(frame["id"].to_numpy(), frame.iloc[:, 1:].to_numpy(dtype=np.float64), tag)


# --- Probe classifiers ---
@dataclass
class ProbeConfig:
    kind: str = "logistic"
    epochs: int = 30
    lr: float = 0.1
    seed: int = 0
    batch_size: int = 64
    hidden_dim: int = 512
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise ValueError(f"probe kind must be one of {PROBE_KINDS}, got {self.kind!r}")
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1 or self.hidden_dim < 1:
            raise ValueError("probe hyperparameters must be positive")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")


@dataclass
class Probe:
    kind: str
    mean: np.ndarray
    scale: np.ndarray
    params: dict = field(default_factory=dict)
    head: object = None

    def logits(self, standardized: Tensor) -> Tensor:
        if self.kind == "logistic":
            return standardized @ self.params["W"] + self.params["b"]
        return self.head.forward(standardized)

    def predict(self, features: np.ndarray) -> np.ndarray:
        standardized = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return np.argmax(self.logits(Tensor(standardized)).data, axis=-1)


def train_probe(features, labels, cfg: ProbeConfig | None = None) -> tuple[Probe, float]:
    """Trains a probe on the training part of a seeded 80/20 split; returns (probe, held-out accuracy)."""
    cfg = cfg or ProbeConfig()
    X = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"{len(y)} labels for features of shape {X.shape}")
    if len(np.unique(y)) < 2:
        raise ValueError("probe labels contain a single class")
    if np.any(y < 0):
        raise ValueError("probe labels must be non-negative class indices")

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(y))
    n_test = min(max(1, int(round(len(y) * cfg.test_fraction))), len(y) - 1)
    test_idx, train_idx = order[:n_test], order[n_test:]

    mean = X[train_idx].mean(axis=0)
    scale = X[train_idx].std(axis=0)
    scale[scale < 1e-12] = 1.0
    standardized = (X - mean) / scale
    num_classes = int(y.max()) + 1
    dim = X.shape[1]

    if cfg.kind == "logistic":
        probe = Probe(cfg.kind, mean, scale, {"W": Tensor(np.zeros((dim, num_classes)), requires_grad=True),
                                              "b": Tensor(np.zeros(num_classes), requires_grad=True)})
    else:
        head = init_head(dim, cfg.hidden_dim, num_classes, rng)
        probe = Probe(cfg.kind, mean, scale, head.parameters(), head)

    for _ in range(cfg.epochs):
        shuffled = rng.permutation(train_idx)
        for start in range(0, len(shuffled), cfg.batch_size):
            batch = shuffled[start:start + cfg.batch_size]
            for tensor in probe.params.values():
                tensor.zero_grad()
            with Graph() as graph:
                loss = nd.cross_entropy(probe.logits(Tensor(standardized[batch])), y[batch])
                graph.backward(loss)
            sgd_step(probe.params, {name: t.grad for name, t in probe.params.items()}, cfg.lr)

    accuracy = float(np.mean(probe.predict(X[test_idx]) == y[test_idx]))
    return probe, accuracy


# --- Auxiliary tasks ---
def length_bin(length: int) -> int:
    """<=5, 6-8, 9-12, 13-16, 17-20, 21-25, 26-30, >30 tokens -> 0..7."""
    if length < 1:
        raise ValueError("sentence length must be positive")
    return int(np.searchsorted(LENGTH_BOUNDARIES, length, side="left"))


def _sentence_list(sentences) -> list:
    return list(sentences.sentences if isinstance(sentences, SentenceSet) else sentences)


def _vectors(sentences: list, model: MTLModel | None, tag: str, vectors: np.ndarray | None) -> np.ndarray:
    if vectors is not None:
        if len(vectors) != len(sentences):
            raise ShapeError(f"{len(vectors)} vectors for {len(sentences)} sentences")
        return np.asarray(vectors, dtype=np.float64)
    if model is None:
        raise ValueError("either a model or precomputed sentence vectors are needed")
    return sentence_features(sentences, model, tag)


def aux_length(sentences, model: MTLModel | None, tag: str = "shared", cfg: ProbeConfig | None = None,
               vectors: np.ndarray | None = None) -> float:
    sentences = _sentence_list(sentences)
    bins = np.array([length_bin(len(s)) for s in sentences], dtype=np.int64)
    if len(np.unique(bins)) < 2:
        raise ValueError("sentence lengths fall into a single bin")
    features = _vectors(sentences, model, tag, vectors)
    return train_probe(features, bins, cfg or ProbeConfig(kind="mlp-512"))[1]


def frequency_deciles(sentences: list) -> dict[int, int]:
    """Token -> decile (0 = most frequent) by corpus frequency."""
    counts = Counter(token for sentence in sentences for token in sentence)
    ranked = sorted(counts, key=lambda token: (-counts[token], token))
    return {int(token): decile for decile, group in enumerate(np.array_split(np.array(ranked), 10)) for token in group}


def word_content_items(sentences: list, seed: int) -> list[tuple[int, int, int]]:
    """(sentence index, word, label); labels alternate so positives = negatives +- 1."""
    rng = np.random.default_rng(seed)
    deciles = frequency_deciles(sentences)
    by_decile: dict[int, list] = {}
    for token, decile in sorted(deciles.items()):
        by_decile.setdefault(decile, []).append(token)
    inventory = sorted(deciles)
    items = []
    for index, sentence in enumerate(sentences):
        label = len(items) % 2
        anchor = int(sentence[int(rng.integers(len(sentence)))])
        if label:
            items.append((index, anchor, 1))
            continue
        present = set(sentence)
        pool = [t for t in by_decile[deciles[anchor]] if t not in present]
        if not pool:
            pool = [t for t in inventory if t not in present]
        if not pool:
            continue  # sentence covers the whole vocabulary
        items.append((index, pool[int(rng.integers(len(pool)))], 0))
    return items


def order_label(tokens, first: int, second: int) -> int:
    """1 iff `first` occurs before `second` (first occurrences)."""
    tokens = list(tokens)
    return int(tokens.index(first) < tokens.index(second))


def word_order_items(sentences: list, seed: int) -> list[tuple[int, int, int, int]]:
    """(sentence index, w_a, w_b, label); balanced by swapping the sampled pair."""
    rng = np.random.default_rng(seed)
    items = []
    for index, sentence in enumerate(sentences):
        types = list(dict.fromkeys(int(t) for t in sentence))
        if len(types) < 2:
            continue
        i, j = rng.choice(len(types), size=2, replace=False)
        a, b = types[int(i)], types[int(j)]
        wanted = len(items) % 2
        if order_label(sentence, a, b) != wanted:
            a, b = b, a
        items.append((index, a, b, wanted))
    return items


def _embeddings(model: MTLModel | None, table: EmbeddingTable | None) -> np.ndarray:
    table = table or (model.embeddings if model is not None else None)
    if table is None:
        raise ValueError("word probes need an embedding table")
    return table.matrix


def aux_word_content(sentences, model: MTLModel | None, tag: str = "shared", seed: int = 0,
                     cfg: ProbeConfig | None = None, vectors: np.ndarray | None = None,
                     table: EmbeddingTable | None = None) -> float:
    sentences = _sentence_list(sentences)
    items = word_content_items(sentences, seed)
    if not items:
        raise ValueError("no word-content examples could be built")
    sentence_vectors = _vectors(sentences, model, tag, vectors)
    matrix = _embeddings(model, table)
    features = np.stack([np.concatenate([sentence_vectors[i], matrix[w]]) for i, w, _ in items])
    labels = np.array([label for _, _, label in items], dtype=np.int64)
    return train_probe(features, labels, cfg or ProbeConfig(kind="mlp-512", seed=seed))[1]


def aux_word_order(sentences, model: MTLModel | None, tag: str = "shared", seed: int = 0,
                   cfg: ProbeConfig | None = None, vectors: np.ndarray | None = None,
                   table: EmbeddingTable | None = None) -> float:
    sentences = _sentence_list(sentences)
    items = word_order_items(sentences, seed)
    if not items:
        raise ValueError("no sentence has two distinct tokens")
    sentence_vectors = _vectors(sentences, model, tag, vectors)
    matrix = _embeddings(model, table)
    features = np.stack([np.concatenate([sentence_vectors[i], matrix[a], matrix[b]]) for i, a, b, _ in items])
    labels = np.array([label for *_, label in items], dtype=np.int64)
    return train_probe(features, labels, cfg or ProbeConfig(kind="mlp-512", seed=seed))[1]


# --- Baselines ---
def bag_of_embeddings_features(sentences, table: EmbeddingTable) -> np.ndarray:
    """Mean word embedding per sentence; blind to word order."""
    return np.stack([table.matrix[np.asarray(s, dtype=np.int64)].mean(axis=0) for s in _sentence_list(sentences)])


def random_features(count: int, dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((count, dim))


def task_identity_accuracy(model: MTLModel, datasets: dict, tag: str = "shared",
                           cfg: ProbeConfig | None = None) -> float:
    """Held-out accuracy of a fresh logistic task discriminator on frozen sentence vectors.

    Every task contributes the same number of sentences (both sides of its pairs).
    """
    if len(datasets) < 2:
        raise ValueError("task identity needs at least 2 tasks")
    per_task = {name: [s for e in dataset for s in (e.tokens1, e.tokens2)] for name, dataset in datasets.items()}
    size = min(len(sentences) for sentences in per_task.values())
    features, labels = [], []
    for name, sentences in per_task.items():
        features.append(sentence_features(sentences[:size], model, tag, default_task=name))
        labels.append(np.full(size, model.task_index(name), dtype=np.int64))
    return train_probe(np.concatenate(features), np.concatenate(labels), cfg or ProbeConfig())[1]


# --- Similarity ---
@dataclass
class StsResult:
    spearman: float
    pearson: float
    cosines: np.ndarray


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    norm_u, norm_v = np.linalg.norm(u), np.linalg.norm(v)
    if norm_u == 0 or norm_v == 0:
        raise ValueError("cosine of a zero vector")
    return float(np.clip(np.dot(u, v) / (norm_u * norm_v), -1.0, 1.0))


def rank_correlation(gold, predicted) -> float:
    """Spearman rho with average ranks for ties."""
    rho = stats.spearmanr(gold, predicted)[0]
    if not np.isfinite(rho):
        raise ValueError("rank correlation undefined for constant scores")
    return float(rho)


def cosine_eval(pairs: list, gold, model: MTLModel, tag: str = "shared") -> StsResult:
    """Cosine per sentence pair, correlated with gold scores."""
    gold = np.asarray(gold, dtype=np.float64)
    if len(pairs) < 3:
        raise ValueError("cosine evaluation needs at least 3 pairs")
    if len(gold) != len(pairs):
        raise ShapeError(f"{len(gold)} gold scores for {len(pairs)} pairs")
    v1 = sentence_features([p[0] for p in pairs], model, tag)
    v2 = sentence_features([p[1] for p in pairs], model, tag)
    cosines = np.empty(len(pairs))
    for i in range(len(pairs)):
        try:
            cosines[i] = cosine(v1[i], v2[i])
        except ValueError:
            raise ValueError(f"pair {i + 1} has a zero sentence vector") from None
    spearman = rank_correlation(gold, cosines)
    return StsResult(spearman, float(stats.pearsonr(gold, cosines)[0]), cosines)


def write_probe_report(rows: list[dict], path: str) -> None:
    """Appends `probe,encoder_tag,metric,value,seed` rows, writing the header on first use."""
    exists = os.path.exists(path)
    pd.DataFrame(rows, columns=REPORT_COLUMNS).to_csv(path, mode="a" if exists else "w", header=not exists,
                                                      index=False, lineterminator="\n")
