"""
Text data for the workbench: vocabulary, embeddings, pair datasets and batching.

- `build_vocab` / `Vocabulary`: index 0 is padding, index 1 is unknown, the rest
  follow first occurrence in the corpus.
- `load_embeddings`: GloVe-style text vectors into a frozen `EmbeddingTable`.
- `load_pair_dataset`: `label<TAB>sentence1<TAB>sentence2` files for one task.
- `synth_generate`: synthetic pair tasks with planted shared and private signal
  (SHARED-OVERLAP, PRIVATE-MARKER(k)), plus `synth_sentences` for the probes and
  `synthetic_embeddings`, the table synthetic runs use when no vector file is given.
- `batch_iter`: padded mini-batches with masks.

Tokenization is lowercase + whitespace split and lives in `tokenize` only.
"""

import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from modules.config import read_key_value_file, split_list
from modules.ndgrad import Tensor

PAD_INDEX = 0
UNK_INDEX = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class DataFormatError(ValueError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message: str, path: str | None = None, line_number: int | None = None):
        location = ""
        if path is not None:
            location = f"{path}:{line_number}: " if line_number is not None else f"{path}: "
        super().__init__(location + message)
        self.path = path
        self.line_number = line_number


def tokenize(text: str) -> list[str]:
    return text.lower().split()


# --- Vocabulary ---
class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.index_to_token: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.token_to_index: dict[str, int] = {PAD_TOKEN: PAD_INDEX, UNK_TOKEN: UNK_INDEX}
        for token in tokens:
            if token not in self.token_to_index:
                self.token_to_index[token] = len(self.index_to_token)
                self.index_to_token.append(token)

    def __len__(self):
        return len(self.index_to_token)

    def __contains__(self, token: str):
        return token in self.token_to_index

    def index(self, token: str) -> int:
        return self.token_to_index.get(token, UNK_INDEX)

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.index(t) for t in tokens)

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self.index_to_token[i] for i in indices]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for token in self.index_to_token[2:]:
                handle.write(token + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        if not os.path.exists(path):
            raise DataFormatError("vocabulary file not found", path)
        with open(path, encoding="utf-8") as handle:
            return cls(line.rstrip("\n") for line in handle if line.rstrip("\n"))


def build_vocab(corpus: Iterable[Iterable[str]], min_count: int = 1) -> Vocabulary:
    """Keeps every token seen at least `min_count` times, in first-occurrence order."""
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    counts: Counter = Counter()
    seen_any = False
    for sentence in corpus:
        seen_any = True
        counts.update(sentence)
    if not seen_any or not counts:
        raise DataFormatError("cannot build a vocabulary from an empty corpus")
    # Counter keeps insertion order, i.e. first occurrence
    return Vocabulary(token for token, count in counts.items() if count >= min_count)


# --- Embeddings ---
@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    frozen: bool = True

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def lookup(self, indices: np.ndarray) -> Tensor:
        """Returns the embedded indices as a constant tensor (no gradient reaches the table)."""
        return Tensor(self.matrix[np.asarray(indices, dtype=np.int64)])


def _fill_oov(shape: tuple, policy: str, seed: int) -> np.ndarray:
    if policy == "zeros":
        return np.zeros(shape)
    if policy == "uniform":
        return np.random.default_rng(seed).uniform(-0.1, 0.1, size=shape)
    raise ValueError(f"unknown OOV policy {policy!r}")


def load_embeddings(path: str, vocab: Vocabulary, oov_policy: str = "zeros", seed: int = 0) -> EmbeddingTable:
    """Reads `token v1 ... v_d` lines; tokens missing from the file are filled per `oov_policy`."""
    if not os.path.exists(path):
        raise DataFormatError("embedding file not found", path)
    found: dict[int, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2 or not parts[0]:
                raise DataFormatError(f"expected a token followed by floats, got {line.strip()!r}", path, line_number)
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise DataFormatError(f"expected {dim} values, found {len(parts) - 1}", path, line_number)
            try:
                vector = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise DataFormatError("unreadable float", path, line_number) from None
            if not np.all(np.isfinite(vector)):
                raise DataFormatError("non-finite value", path, line_number)
            index = vocab.token_to_index.get(parts[0])
            if index is not None and index != PAD_INDEX and index not in found:
                found[index] = vector
    if dim is None:
        raise DataFormatError("embedding file is empty", path)
    matrix = _fill_oov((len(vocab), dim), oov_policy, seed)
    for index, vector in found.items():
        matrix[index] = vector
    matrix[PAD_INDEX] = 0.0
    return EmbeddingTable(matrix)


def random_embeddings(vocab: Vocabulary, dim: int, seed: int, scale: float = 1.0) -> EmbeddingTable:
    """Seeded uniform(-scale, scale) table for runs without a pretrained file."""
    matrix = np.random.default_rng(seed).uniform(-scale, scale, size=(len(vocab), dim))
    matrix[PAD_INDEX] = 0.0
    return EmbeddingTable(matrix)


# --- Tasks and pair datasets ---
@dataclass(frozen=True)
class TaskSpec:
    name: str
    num_classes: int
    labels: tuple = ()
    train: str = ""
    dev: str = ""
    test: str = ""

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"task '{self.name}' needs at least 2 classes")
        if self.labels and len(self.labels) != self.num_classes:
            raise ValueError(f"task '{self.name}' declares {len(self.labels)} labels for {self.num_classes} classes")

    def label_index(self, raw: str) -> int:
        if raw in self.labels:
            return self.labels.index(raw)
        try:
            value = int(raw)
        except ValueError:
            raise ValueError(f"unknown label {raw!r} for task '{self.name}'") from None
        if not 0 <= value < self.num_classes:
            raise ValueError(f"label {value} out of range for task '{self.name}'")
        return value


TASK_MANIFEST_KEYS = ("name", "labels", "num_classes", "train", "dev", "test")


def read_task_manifest(path: str) -> TaskSpec:
    values = read_key_value_file(path, TASK_MANIFEST_KEYS)
    if "name" not in values:
        raise DataFormatError("task manifest needs a 'name'", path)
    labels = tuple(split_list(values.get("labels", "")))
    num_classes = int(values.get("num_classes", len(labels)))
    base = os.path.dirname(os.path.abspath(path))

    def resolve(key):
        value = values.get(key, "")
        return value if not value or os.path.isabs(value) else os.path.join(base, value)
    return TaskSpec(values["name"], num_classes, labels, resolve("train"), resolve("dev"), resolve("test"))


@dataclass(frozen=True)
class Example:
    id: int
    task: str
    tokens1: tuple
    tokens2: tuple
    label: int


@dataclass
class Dataset:
    task: TaskSpec
    examples: list = field(default_factory=list)

    def __len__(self):
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)


def read_pair_lines(path: str) -> Iterator[tuple[int, str, list[str], list[str]]]:
    """Yields (line number, raw label, tokens1, tokens2) for each line of a pair file."""
    if not os.path.exists(path):
        raise DataFormatError("dataset file not found", path)
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields_ = line.split("\t")
            if len(fields_) != 3:
                raise DataFormatError(f"expected 3 tab-separated fields, found {len(fields_)}", path, line_number)
            tokens1, tokens2 = tokenize(fields_[1]), tokenize(fields_[2])
            if not tokens1 or not tokens2:
                raise DataFormatError("empty sentence field", path, line_number)
            yield line_number, fields_[0].strip(), tokens1, tokens2


def load_pair_dataset(path: str, task: TaskSpec, vocab: Vocabulary) -> Dataset:
    examples = []
    for line_number, raw_label, tokens1, tokens2 in read_pair_lines(path):
        try:
            label = task.label_index(raw_label)
        except ValueError as e:
            raise DataFormatError(str(e), path, line_number) from None
        examples.append(Example(len(examples), task.name, vocab.encode(tokens1), vocab.encode(tokens2), label))
    return Dataset(task, examples)


def load_scored_pairs(path: str, vocab: Vocabulary) -> tuple[list[tuple], np.ndarray]:
    """`score<TAB>sentence1<TAB>sentence2` lines (STS-style) -> (index pairs, gold scores)."""
    pairs, scores = [], []
    for line_number, raw_score, tokens1, tokens2 in read_pair_lines(path):
        try:
            score = float(raw_score)
        except ValueError:
            raise DataFormatError(f"unreadable score {raw_score!r}", path, line_number) from None
        if not np.isfinite(score):
            raise DataFormatError("non-finite score", path, line_number)
        pairs.append((vocab.encode(tokens1), vocab.encode(tokens2)))
        scores.append(score)
    return pairs, np.array(scores, dtype=np.float64)


def write_pair_dataset(dataset: Dataset, path: str, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for example in dataset:
            sentence1 = " ".join(vocab.decode(example.tokens1))
            sentence2 = " ".join(vocab.decode(example.tokens2))
            handle.write(f"{example.label}\t{sentence1}\t{sentence2}\n")


def merge_datasets(name: str, datasets: list[Dataset]) -> Dataset:
    """Concatenates datasets that share one label space into a single task (AllNLI-style)."""
    if not datasets:
        raise ValueError("nothing to merge")
    num_classes = datasets[0].task.num_classes
    if any(d.task.num_classes != num_classes for d in datasets):
        raise DataFormatError(f"cannot merge tasks with different class counts into '{name}'")
    task = TaskSpec(name, num_classes, datasets[0].task.labels)
    examples = []
    for dataset in datasets:
        for e in dataset:
            examples.append(Example(len(examples), name, e.tokens1, e.tokens2, e.label))
    return Dataset(task, examples)


# --- Single-sentence sets (probes) ---
@dataclass
class SentenceSet:
    sentences: list
    task: str | None = None

    def __len__(self):
        return len(self.sentences)


def load_sentences(path: str, vocab: Vocabulary, task: str | None = None) -> SentenceSet:
    if not os.path.exists(path):
        raise DataFormatError("sentence file not found", path)
    sentences = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            tokens = tokenize(line)
            if tokens:
                sentences.append(vocab.encode(tokens))
    if not sentences:
        raise DataFormatError("no sentences found", path)
    return SentenceSet(sentences, task)


def write_sentences(sentences: SentenceSet, path: str, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for sentence in sentences.sentences:
            handle.write(" ".join(vocab.decode(sentence)) + "\n")


# --- Synthetic tasks ---
NUM_FILLERS = 40
NUM_CONTENT = 10
NUM_MARKERS = 4
NUM_PLAIN = 60
MIN_PAIR_LENGTH = 4
MAX_PAIR_LENGTH = 10
MARKER_SPAN = 2  # markers sit in the first MARKER_SPAN positions, content tokens after them
LENGTH_BIN_RANGES = ((2, 5), (6, 8), (9, 12), (13, 16), (17, 20), (21, 25), (26, 30), (31, 34))

# synthetic embedding scales
FILLER_CENTER = 2.0
FILLER_SPREAD = 0.5
SALIENT_SCALE = 4.0

_MARKER_SPEC = re.compile(r"^PRIVATE-MARKER\((\d+)\)$")


def filler_tokens() -> list[str]:
    return [f"w{i}" for i in range(NUM_FILLERS)]


def content_tokens() -> list[str]:
    return [f"x{i}" for i in range(NUM_CONTENT)]


def marker_token(k: int) -> str:
    return f"m{k}"


def plain_tokens() -> list[str]:
    return [f"y{i}" for i in range(NUM_PLAIN)]


def synthetic_vocabulary() -> Vocabulary:
    """The one vocabulary every synthetic generator draws from."""
    inventory = filler_tokens() + content_tokens() + [marker_token(k) for k in range(NUM_MARKERS)] + plain_tokens()
    return build_vocab([inventory])


def synthetic_embeddings(vocab: Vocabulary, dim: int, seed: int) -> EmbeddingTable:
    """
    Seeded table for the synthetic vocabulary.

    Fillers scatter by FILLER_SPREAD around one shared centre, so swapping fillers barely
    moves a sentence; content and marker tokens are drawn at SALIENT_SCALE; plain words and
    anything else are uniform(-1, 1).
    """
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-1.0, 1.0, size=(len(vocab), dim))
    center = rng.uniform(-FILLER_CENTER, FILLER_CENTER, size=dim)
    for token in filler_tokens():
        if token in vocab:
            matrix[vocab.index(token)] = center + rng.uniform(-FILLER_SPREAD, FILLER_SPREAD, size=dim)
    for token in content_tokens() + [marker_token(k) for k in range(NUM_MARKERS)]:
        if token in vocab:
            matrix[vocab.index(token)] = rng.uniform(-SALIENT_SCALE, SALIENT_SCALE, size=dim)
    matrix[PAD_INDEX] = 0.0
    return EmbeddingTable(matrix)


def parse_synthetic_spec(name: str) -> tuple[str, int | None]:
    spec = name.strip().upper()
    if spec == "SHARED-OVERLAP":
        return "SHARED-OVERLAP", None
    match = _MARKER_SPEC.match(spec)
    if match:
        k = int(match.group(1))
        if k >= NUM_MARKERS:
            raise ValueError(f"marker index {k} out of range (max {NUM_MARKERS - 1})")
        return "PRIVATE-MARKER", k
    raise ValueError(f"unknown synthetic task spec {name!r}")


def overlap_label(tokens1: Iterable[str], tokens2: Iterable[str], content: Iterable[str]) -> int:
    """1 when the two sentences share any token of the content set."""
    content = set(content)
    return int(bool(set(tokens1) & set(tokens2) & content))


def marker_label(tokens: list[str], marker: str) -> int:
    """Parity of the (first) position of `marker` in the sentence."""
    return tokens.index(marker) % 2


def _fillers(rng: np.random.Generator, length: int) -> list[str]:
    return [f"w{i}" for i in rng.integers(0, NUM_FILLERS, size=length)]


def _balanced_labels(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.permutation(np.arange(size) % 2)


def _pair_frame(rng: np.random.Generator) -> tuple[list[str], list[str], int]:
    """Two filler sentences of one length and the content slot they share."""
    length = int(rng.integers(MIN_PAIR_LENGTH, MAX_PAIR_LENGTH + 1))
    return _fillers(rng, length), _fillers(rng, length), int(rng.integers(MARKER_SPAN, length))


def _overlap_pair(rng: np.random.Generator, label: int) -> tuple[list[str], list[str]]:
    # sentence2 rewords sentence1's fillers; the content token is kept (1) or swapped (0)
    tokens1, tokens2, slot = _pair_frame(rng)
    first, second = rng.choice(NUM_CONTENT, size=2, replace=False)
    tokens1[slot] = f"x{first}"
    tokens2[slot] = f"x{first}" if label else f"x{second}"
    return tokens1, tokens2


def _marker_pair(rng: np.random.Generator, label: int, k: int) -> tuple[list[str], list[str]]:
    tokens1, tokens2, slot = _pair_frame(rng)
    content = f"x{int(rng.integers(NUM_CONTENT))}"
    position = int(rng.choice([p for p in range(MARKER_SPAN) if p % 2 == label]))
    for tokens in (tokens1, tokens2):
        tokens[slot] = content
        tokens[position] = marker_token(k)
    return tokens1, tokens2


def synth_generate(spec: str, size: int, seed: int, vocab: Vocabulary | None = None,
                   task_name: str | None = None) -> Dataset:
    """Generates `size` examples of a synthetic task; labels are exactly balanced."""
    kind, k = parse_synthetic_spec(spec)
    vocab = vocab or synthetic_vocabulary()
    rng = np.random.default_rng(seed)
    name = task_name or ("overlap" if kind == "SHARED-OVERLAP" else f"marker{k}")
    task = TaskSpec(name, 2, ("0", "1"))
    examples = []
    for label in _balanced_labels(rng, size):
        if kind == "SHARED-OVERLAP":
            tokens1, tokens2 = _overlap_pair(rng, int(label))
        else:
            tokens1, tokens2 = _marker_pair(rng, int(label), k)
        examples.append(Example(len(examples), name, vocab.encode(tokens1), vocab.encode(tokens2), int(label)))
    return Dataset(task, examples)


def synth_sentences(size: int, seed: int, vocab: Vocabulary | None = None,
                    bins: Iterable[int] | None = None) -> SentenceSet:
    """Single sentences of plain words, lengths spread evenly over the chosen length bins (default: all)."""
    vocab = vocab or synthetic_vocabulary()
    ranges = [LENGTH_BIN_RANGES[b] for b in bins] if bins is not None else list(LENGTH_BIN_RANGES)
    if not ranges:
        raise ValueError("no length bins selected")
    rng = np.random.default_rng(seed)
    inventory = plain_tokens()
    sentences = []
    for i in range(size):
        low, high = ranges[i % len(ranges)]
        length = int(rng.integers(low, high + 1))
        tokens = [inventory[j] for j in rng.integers(0, len(inventory), size=length)]
        sentences.append(vocab.encode(tokens))
    order = rng.permutation(size)
    return SentenceSet([sentences[i] for i in order])


# --- Batching ---
@dataclass
class Batch:
    task: str
    ids: np.ndarray
    tokens1: np.ndarray
    mask1: np.ndarray
    tokens2: np.ndarray
    mask2: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)


def pad_sequences(sequences: list) -> tuple[np.ndarray, np.ndarray]:
    """Right-pads with PAD_INDEX; the mask is True on real tokens."""
    if any(len(s) == 0 for s in sequences):
        raise ValueError("cannot pad an empty sequence")
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD_INDEX, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for row, sequence in enumerate(sequences):
        ids[row, :len(sequence)] = sequence
        mask[row, :len(sequence)] = True
    return ids, mask


def make_batch(examples: list[Example]) -> Batch:
    tasks = {e.task for e in examples}
    if len(tasks) != 1:
        raise ValueError(f"a batch must hold one task, got {sorted(tasks)}")
    tokens1, mask1 = pad_sequences([e.tokens1 for e in examples])
    tokens2, mask2 = pad_sequences([e.tokens2 for e in examples])
    return Batch(examples[0].task, np.array([e.id for e in examples], dtype=np.int64),
                 tokens1, mask1, tokens2, mask2, np.array([e.label for e in examples], dtype=np.int64))


def batch_iter(dataset: Dataset, batch_size: int = 128, shuffle_seed: int | None = None) -> list[Batch]:
    """One epoch of batches; the last batch may be partial."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(dataset))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(dataset))
    examples = dataset.examples
    return [make_batch([examples[i] for i in order[start:start + batch_size]])
            for start in range(0, len(order), batch_size)]
