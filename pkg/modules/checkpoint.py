"""
Model persistence in the MTLSE1 format.

Layout of a checkpoint file:
- one ASCII header line `MTLSE1 <framework> <K> <d> <d_w> <h_mlp>`
- then, for every record, an ASCII line `<name> <length>` followed by `length`
  little-endian float64 values.

Records are the model parameters in `MTLModel.parameters()` order, then the
`hyper.*` scalars and the frozen `embedding.table`. Shapes are recovered from the
header and the record lengths. The vocabulary, when the model carries one, is
written next to the checkpoint as `<path>.vocab`.

Saving is deterministic: save -> load -> save gives byte-identical files.
"""

import os

import numpy as np

from modules.biatt import BiattentiveParams
from modules.encoder import EncoderParams, LSTMParams
from modules.mtl import FRAMEWORKS, ClassifierHead, DiscriminatorParams, FrameworkError, MTLModel
from modules.ndgrad import Tensor
from modules.textdata import DataFormatError, EmbeddingTable, Vocabulary

MAGIC = "MTLSE1"
FLOAT_DTYPE = np.dtype("<f8")


class CheckpointFormatError(DataFormatError):
    """Wrong magic, malformed header or a truncated record."""


def vocab_path(path: str) -> str:
    return path + ".vocab"


def header_line(model: MTLModel) -> str:
    return f"{MAGIC} {model.framework} {len(model.tasks)} {model.hidden_dim} {model.input_dim} {model.mlp_dim}"


def _records(model: MTLModel) -> list[tuple[str, np.ndarray]]:
    records = [(name, tensor.data) for name, tensor in model.parameters().items()]
    records += [("hyper.beta", np.array([model.beta])),
                ("hyper.gamma", np.array([model.gamma])),
                ("hyper.lambda", np.array([model.reversal_strength])),
                ("hyper.diff_normalize", np.array([1.0 if model.diff_normalize else 0.0]))]
    if model.embeddings is not None:
        records.append(("embedding.table", model.embeddings.matrix))
    return records


def save_checkpoint(model: MTLModel, path: str) -> None:
    for task in model.tasks:
        if not task or any(c.isspace() for c in task):
            raise ValueError(f"task name {task!r} cannot be stored in a checkpoint")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write((header_line(model) + "\n").encode("ascii"))
        for name, values in _records(model):
            flat = np.ascontiguousarray(values, dtype=FLOAT_DTYPE).reshape(-1)
            handle.write(f"{name} {flat.size}\n".encode("ascii"))
            handle.write(flat.tobytes())
    if model.vocab is not None:
        model.vocab.save(vocab_path(path))


# --- Loading ---
def _read_line(handle, path: str) -> str:
    raw = handle.readline()
    if not raw.endswith(b"\n"):
        raise CheckpointFormatError("truncated checkpoint", path)
    try:
        return raw[:-1].decode("ascii")
    except UnicodeDecodeError:
        raise CheckpointFormatError("record header is not ASCII", path) from None


def _parse_header(line: str, path: str) -> tuple[str, int, int, int, int]:
    parts = line.split(" ")
    if not parts or parts[0] != MAGIC:
        raise CheckpointFormatError(f"not an {MAGIC} checkpoint (header {line[:20]!r})", path)
    if len(parts) != 6 or parts[1] not in FRAMEWORKS:
        raise CheckpointFormatError(f"malformed header {line!r}", path)
    try:
        num_tasks, hidden, input_dim, mlp = (int(p) for p in parts[2:])
    except ValueError:
        raise CheckpointFormatError(f"malformed header {line!r}", path) from None
    return parts[1], num_tasks, hidden, input_dim, mlp


def read_records(path: str) -> tuple[str, dict[str, np.ndarray]]:
    """Returns (header line, ordered name -> flat float64 array)."""
    if not os.path.exists(path):
        raise CheckpointFormatError("checkpoint not found", path)
    records: dict[str, np.ndarray] = {}
    with open(path, "rb") as handle:
        header = _read_line(handle, path)
        _parse_header(header, path)
        while True:
            if not handle.peek(1):
                break
            line = _read_line(handle, path)
            name, _, length = line.rpartition(" ")
            if not name or not length.isdigit():
                raise CheckpointFormatError(f"malformed record header {line!r}", path)
            size = int(length)
            payload = handle.read(size * FLOAT_DTYPE.itemsize)
            if len(payload) != size * FLOAT_DTYPE.itemsize:
                raise CheckpointFormatError(f"truncated record '{name}'", path)
            if name in records:
                raise CheckpointFormatError(f"duplicate record '{name}'", path)
            records[name] = np.frombuffer(payload, dtype=FLOAT_DTYPE).astype(np.float64)
    return header, records


def _take(records: dict, name: str, path: str) -> np.ndarray:
    if name not in records:
        raise CheckpointFormatError(f"missing record '{name}'", path)
    return records.pop(name)


def _param(values: np.ndarray, shape: tuple, name: str, path: str) -> Tensor:
    if values.size != int(np.prod(shape)):
        raise CheckpointFormatError(f"record '{name}' has {values.size} values, expected shape {shape}", path)
    return Tensor(values.reshape(shape), requires_grad=True)


def _encoder(records: dict, prefix: str, input_dim: int, path: str) -> EncoderParams:
    directions = []
    for direction in ("fw", "bw"):
        b = _take(records, f"{prefix}{direction}.b", path)
        if b.size % 4:
            raise CheckpointFormatError(f"record '{prefix}{direction}.b' is not a multiple of 4", path)
        hidden = b.size // 4
        W = _param(_take(records, f"{prefix}{direction}.W", path), (4 * hidden, input_dim + hidden), f"{prefix}{direction}.W", path)
        directions.append(LSTMParams(W, Tensor(b, requires_grad=True)))
    return EncoderParams(*directions)


def _head(records: dict, task: str, mlp: int, path: str) -> ClassifierHead:
    prefix = f"head.{task}."
    W1 = _take(records, prefix + "W1", path)
    W2 = _take(records, prefix + "W2", path)
    if mlp < 1 or W1.size % mlp or W2.size % mlp:
        raise CheckpointFormatError(f"head '{task}' does not fit h_mlp={mlp}", path)
    classes = W2.size // mlp
    return ClassifierHead(_param(W1, (W1.size // mlp, mlp), prefix + "W1", path),
                          _param(_take(records, prefix + "b1", path), (mlp,), prefix + "b1", path),
                          _param(W2, (mlp, classes), prefix + "W2", path),
                          _param(_take(records, prefix + "b2", path), (classes,), prefix + "b2", path))


def load_checkpoint(path: str, expect_framework: str | None = None) -> MTLModel:
    """Rebuilds the model; `expect_framework` guards evaluation paths that need a given framework."""
    header, records = read_records(path)
    framework, num_tasks, hidden, input_dim, mlp = _parse_header(header, path)
    if expect_framework is not None and framework != expect_framework:
        raise FrameworkError(f"{path} holds a {framework} model, expected {expect_framework}")

    tasks = [name[len("head."):-len(".W1")] for name in records if name.startswith("head.") and name.endswith(".W1")]
    if len(tasks) != num_tasks:
        raise CheckpointFormatError(f"header declares {num_tasks} tasks, found {len(tasks)} heads", path)

    shared = _encoder(records, "shared.", input_dim, path)
    if shared.hidden_dim != hidden:
        raise CheckpointFormatError(f"shared encoder has d={shared.hidden_dim}, header says {hidden}", path)
    private = {}
    if framework in ("SP", "ASP"):
        private = {task: _encoder(records, f"private.{task}.", input_dim, path) for task in tasks}
    heads = {task: _head(records, task, mlp, path) for task in tasks}
    biatt = {}
    for task in tasks:
        if f"biatt.{task}.w1" in records:
            biatt[task] = BiattentiveParams(Tensor(_take(records, f"biatt.{task}.w1", path), requires_grad=True),
                                            Tensor(_take(records, f"biatt.{task}.w2", path), requires_grad=True))
    discriminator = None
    if "disc.W" in records:
        discriminator = DiscriminatorParams(_param(_take(records, "disc.W", path), (2 * hidden, num_tasks), "disc.W", path),
                                            _param(_take(records, "disc.b", path), (num_tasks,), "disc.b", path))

    hyper = {key: float(_take(records, f"hyper.{key}", path)[0]) for key in ("beta", "gamma", "lambda", "diff_normalize")}
    embeddings = None
    if "embedding.table" in records:
        table = _take(records, "embedding.table", path)
        if input_dim < 1 or table.size % input_dim:
            raise CheckpointFormatError("embedding table does not fit d_w", path)
        embeddings = EmbeddingTable(table.reshape(-1, input_dim))
    if records:
        raise CheckpointFormatError(f"unexpected records: {', '.join(records)}", path)

    vocab = Vocabulary.load(vocab_path(path)) if os.path.exists(vocab_path(path)) else None
    try:
        return MTLModel(framework, tasks, shared, heads, embeddings=embeddings, vocab=vocab, private=private,
                        discriminator=discriminator, biatt=biatt, beta=hyper["beta"], gamma=hyper["gamma"],
                        reversal_strength=hyper["lambda"], diff_normalize=bool(hyper["diff_normalize"]))
    except (FrameworkError, ValueError) as e:
        raise CheckpointFormatError(f"inconsistent checkpoint: {e}", path) from None
