"""
BiLSTM-Max sentence encoder and pair features.

A one-layer bidirectional LSTM runs over the embedded tokens; the sentence vector
is the per-dimension max over the real (unmasked) time steps of [h_fw ; h_bw].
All functions work on batches (B x T x ...) with a boolean mask marking real
tokens; padding never changes a result because

- a padded step keeps the previous (h, c), so the backward direction starts from
  zero state at the last real token, and
- pooling ignores masked rows.
"""

from dataclasses import dataclass

import numpy as np

from modules import ndgrad as nd
from modules.ndgrad import ShapeError, Tensor
from modules.textdata import EmbeddingTable, Vocabulary, pad_sequences

FORGET_BIAS = 1.0


@dataclass
class LSTMParams:
    W: Tensor  # 4d x (d_w + d), gates packed i, f, g, o
    b: Tensor  # 4d

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[1] - self.hidden_dim


@dataclass
class EncoderParams:
    forward: LSTMParams
    backward: LSTMParams

    @property
    def input_dim(self) -> int:
        return self.forward.input_dim

    @property
    def hidden_dim(self) -> int:
        return self.forward.hidden_dim

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}fw.W": self.forward.W, f"{prefix}fw.b": self.forward.b,
                f"{prefix}bw.W": self.backward.W, f"{prefix}bw.b": self.backward.b}


@dataclass
class HiddenStates:
    H: Tensor          # B x T x 2d
    mask: np.ndarray   # B x T, True on real tokens


def _init_lstm(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> LSTMParams:
    fan_in = input_dim + hidden_dim
    bound = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=(4 * hidden_dim, fan_in))
    b = np.zeros(4 * hidden_dim)
    b[hidden_dim:2 * hidden_dim] = FORGET_BIAS
    return LSTMParams(Tensor(W, requires_grad=True), Tensor(b, requires_grad=True))


def init_encoder(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, forget-gate bias +1."""
    return EncoderParams(_init_lstm(input_dim, hidden_dim, rng), _init_lstm(input_dim, hidden_dim, rng))


def _run_direction(embedded: Tensor, mask: np.ndarray, params: LSTMParams, reverse: bool) -> list[Tensor]:
    batch, steps, _ = embedded.shape
    d = params.hidden_dim
    W_t = nd.transpose(params.W)
    h = Tensor(np.zeros((batch, d)))
    c = Tensor(np.zeros((batch, d)))
    states: list[Tensor] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        x_t = embedded[:, t, :]
        gates = nd.concat([x_t, h], axis=1) @ W_t + params.b
        i = nd.sigmoid(gates[:, 0:d])
        f = nd.sigmoid(gates[:, d:2 * d])
        g = nd.tanh(gates[:, 2 * d:3 * d])
        o = nd.sigmoid(gates[:, 3 * d:4 * d])
        c_new = f * c + i * g
        h_new = o * nd.tanh(c_new)
        real = mask[:, t:t + 1]
        c = nd.where(real, c_new, c)
        h = nd.where(real, h_new, h)
        states[t] = h
    return states


def bilstm_forward(embedded: Tensor, mask: np.ndarray, params: EncoderParams) -> HiddenStates:
    """Runs both directions over B x T x d_w input; row t of H is [h_fw_t ; h_bw_t]."""
    if embedded.ndim == 2:
        embedded = embedded.reshape(1, *embedded.shape)
        mask = np.asarray(mask, dtype=bool).reshape(1, -1)
    if embedded.ndim != 3:
        raise ShapeError(f"expected B x T x d_w input, got {embedded.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != embedded.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match input {embedded.shape[:2]}")
    if embedded.shape[1] < 1:
        raise ShapeError("cannot encode an empty sequence")
    if embedded.shape[2] != params.input_dim:
        raise ShapeError(f"input dim {embedded.shape[2]} does not match encoder input dim {params.input_dim}")
    forward_states = _run_direction(embedded, mask, params.forward, reverse=False)
    backward_states = _run_direction(embedded, mask, params.backward, reverse=True)
    H = nd.concat([nd.stack(forward_states, axis=1), nd.stack(backward_states, axis=1)], axis=2)
    return HiddenStates(H, mask)


def max_pool(states: HiddenStates) -> Tensor:
    """Per-dimension max over unmasked rows (B x 2d)."""
    if not np.all(states.mask.any(axis=-1)):
        raise ShapeError("max_pool over a fully masked sentence")
    return nd.reduce_max(states.H, axis=-2, mask=states.mask[..., None])


def pair_features(s1: Tensor, s2: Tensor) -> Tensor:
    """[s1 ; s2 ; s1 - s2 ; s1 * s2] along the last axis."""
    if s1.shape != s2.shape:
        raise ShapeError(f"pair_features: {s1.shape} vs {s2.shape}")
    return nd.concat([s1, s2, s1 - s2, s1 * s2], axis=-1)


def embed_batch(token_ids: np.ndarray, table: EmbeddingTable) -> Tensor:
    return table.lookup(token_ids)


def encode_batch(token_ids: np.ndarray, mask: np.ndarray, table: EmbeddingTable,
                 params: EncoderParams) -> tuple[Tensor, HiddenStates]:
    states = bilstm_forward(embed_batch(token_ids, table), mask, params)
    return max_pool(states), states


def encode_sentence(tokens, vocab: Vocabulary, table: EmbeddingTable, params: EncoderParams) -> Tensor:
    """lookup -> bilstm_forward -> max_pool for one sentence (tokens or indices)."""
    if len(tokens) == 0:
        raise ShapeError("cannot encode an empty sentence")
    indices = [vocab.index(t) if isinstance(t, str) else int(t) for t in tokens]
    ids, mask = pad_sequences([indices])
    pooled, _ = encode_batch(ids, mask, table, params)
    return pooled[0]
