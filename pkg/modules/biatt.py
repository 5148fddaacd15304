"""
Biattentive pooling over contextualized token vectors.

X (T_x x d'') and Y (T_y x d'') are the concatenated shared and private BiLSTM
outputs of a sentence pair. The pipeline is

    A = X Y^T
    A_x = softmax of A over the X axis,   A_y = softmax of A^T over the Y axis
    C_x = A_x^T X  (T_y x d''),           C_y = A_y^T Y  (T_x x d'')
    X|y = [X ; X - C_y ; X * C_y],        Y|x likewise
    s_x = [max ; mean ; min ; self-attentive] pooling of X|y, s_y likewise

and [s_x ; s_y] goes to the task head. Every function accepts an optional leading
batch axis; masks mark real tokens and padded positions never receive attention.
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from modules import ndgrad as nd
from modules.ndgrad import ShapeError, Tensor

if TYPE_CHECKING:
    from modules.mtl import ClassifierHead


@dataclass
class BiattentiveParams:
    w1: Tensor  # 3d'', scores rows of X|y
    w2: Tensor  # 3d'', scores rows of Y|x

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w1": self.w1, f"{prefix}w2": self.w2}


def init_biattentive(token_dim: int) -> BiattentiveParams:
    """Zero scoring weights, i.e. uniform self-attention at the start."""
    return BiattentiveParams(Tensor(np.zeros(3 * token_dim), requires_grad=True),
                             Tensor(np.zeros(3 * token_dim), requires_grad=True))


def _full_mask(x: Tensor) -> np.ndarray:
    return np.ones(x.shape[:-1], dtype=bool)


def affinity(X: Tensor, Y: Tensor) -> Tensor:
    """A[i, j] = <X[i], Y[j]>."""
    if X.shape[-1] != Y.shape[-1]:
        raise ShapeError(f"affinity: token dims differ, {X.shape} vs {Y.shape}")
    return X @ nd.transpose(Y)


def attention_weights(A: Tensor, mask_x: np.ndarray | None = None,
                      mask_y: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """A_x (T_x x T_y, columns sum to 1 over X) and A_y (T_y x T_x, columns sum to 1 over Y)."""
    if mask_x is None:
        mask_x = np.ones(A.shape[:-1], dtype=bool)
    if mask_y is None:
        mask_y = np.ones(A.shape[:-2] + A.shape[-1:], dtype=bool)
    A_x = nd.softmax(A, axis=-2, mask=np.asarray(mask_x, dtype=bool)[..., :, None])
    A_y = nd.softmax(nd.transpose(A), axis=-2, mask=np.asarray(mask_y, dtype=bool)[..., :, None])
    return A_x, A_y


def context_summaries(X: Tensor, Y: Tensor, A_x: Tensor, A_y: Tensor) -> tuple[Tensor, Tensor]:
    """C_x = A_x^T X summarises X per Y position; C_y = A_y^T Y summarises Y per X position."""
    t_x, t_y = X.shape[-2], Y.shape[-2]
    if A_x.shape[-2:] != (t_x, t_y) or A_y.shape[-2:] != (t_y, t_x):
        raise ShapeError(f"attention shapes {A_x.shape}, {A_y.shape} do not fit X {X.shape} and Y {Y.shape}")
    return nd.transpose(A_x) @ X, nd.transpose(A_y) @ Y


def augment(X: Tensor, C_y: Tensor) -> Tensor:
    """[X ; X - C_y ; X * C_y] per row."""
    if X.shape != C_y.shape:
        raise ShapeError(f"augment: {X.shape} vs {C_y.shape}")
    return nd.concat([X, X - C_y, X * C_y], axis=-1)


def pool_multi(X_aug: Tensor, w: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """[max ; mean ; min ; self-attentive] pooling over the unmasked rows."""
    if mask is None:
        mask = _full_mask(X_aug)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ShapeError("pool_multi over a fully masked sentence")
    row_mask = mask[..., None]
    scores = X_aug @ w.reshape(-1, 1)
    beta = nd.softmax(scores, axis=-2, mask=row_mask)
    pooled = [nd.reduce_max(X_aug, axis=-2, mask=row_mask),
              nd.reduce_mean(X_aug, axis=-2, mask=row_mask),
              nd.reduce_min(X_aug, axis=-2, mask=row_mask),
              nd.reduce_sum(X_aug * beta, axis=-2)]
    return nd.concat(pooled, axis=-1)


def biatt_represent(X: Tensor, Y: Tensor, params: BiattentiveParams,
                    mask_x: np.ndarray | None = None, mask_y: np.ndarray | None = None) -> Tensor:
    """[s_x ; s_y], length 2 x 12d''."""
    mask_x = _full_mask(X) if mask_x is None else np.asarray(mask_x, dtype=bool)
    mask_y = _full_mask(Y) if mask_y is None else np.asarray(mask_y, dtype=bool)
    A = affinity(X, Y)
    A_x, A_y = attention_weights(A, mask_x, mask_y)
    C_x, C_y = context_summaries(X, Y, A_x, A_y)
    s_x = pool_multi(augment(X, C_y), params.w1, mask_x)
    s_y = pool_multi(augment(Y, C_x), params.w2, mask_y)
    return nd.concat([s_x, s_y], axis=-1)


def biatt_classify(X: Tensor, Y: Tensor, params: BiattentiveParams, head: "ClassifierHead",
                   mask_x: np.ndarray | None = None, mask_y: np.ndarray | None = None) -> Tensor:
    representation = biatt_represent(X, Y, params, mask_x, mask_y)
    if representation.shape[-1] != head.input_dim:
        raise ShapeError(f"head expects {head.input_dim} inputs, biattentive pooling gives {representation.shape[-1]}")
    return head.forward(representation)
