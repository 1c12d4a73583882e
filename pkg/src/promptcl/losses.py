"""Training objectives.

retrieval_loss: symmetric in-batch InfoNCE over pooled joint features.
hpa_loss: layer-diagonal cross-entropy between the two modalities' prompts.
cpa_loss: NT-BXent over flattened per-task prompts, with positive/negative
labels derived from task-name cosine similarity.
total_loss: the weighted combination (defaults 0.8 / 0.1 / 0.1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor, add, as_tensor, concat, constant, l2_normalize, log, matmul,
    mean, mul, reshape, scale, sigmoid, softmax, transpose, tsum,
)


@dataclass
class LossWeights:
    base: float = 0.8
    modal: float = 0.1
    task: float = 0.1


@dataclass
class Temperatures:
    modal: float = 0.01
    task: float = 0.01
    retrieval: float = 0.05

    def __post_init__(self):
        if min(self.modal, self.task, self.retrieval) <= 0:
            raise ValueError("temperatures must be positive")


def _diag_cross_entropy(logits: Tensor) -> Tensor:
    """Mean over rows of -log softmax(logits)[i, i]."""
    n = logits.shape[0]
    eye = constant(np.eye(n))
    diag = tsum(mul(log(softmax(logits)), eye), axis=-1)  # (n,)
    return scale(tsum(diag), -1.0 / n)


def retrieval_loss(f_v: Tensor, f_l: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE; features are assumed L2-normalized."""
    b = f_v.shape[0]
    if b < 2:
        raise ValueError(f"retrieval_loss: batch size {b} < 2 leaves no negatives")
    if f_v.shape != f_l.shape:
        raise ValueError(f"retrieval_loss: shapes {f_v.shape} vs {f_l.shape}")
    logits = scale(matmul(f_v, transpose(f_l, (1, 0))), 1.0 / tau)
    i2t = _diag_cross_entropy(logits)
    t2i = _diag_cross_entropy(transpose(logits, (1, 0)))
    return scale(add(i2t, t2i), 0.5)


def hpa_loss(pv: Tensor, pl: Tensor, tau: float) -> Tensor:
    """Align prompts of the two modalities layer by layer.

    Both operands are divided by tau before the product (effective 1/tau^2
    scale), matching the score-matrix definition as written.
    """
    d = pv.shape[0]
    if pl.shape[0] != d or pv.shape[1] != pl.shape[1]:
        raise ValueError(f"hpa_loss: incompatible prompt shapes {pv.shape} vs {pl.shape}")
    pv_bar = scale(mean(pv, axis=-1), 1.0 / tau)   # (D, L)
    pl_bar = scale(mean(pl, axis=-1), 1.0 / tau)
    logits = matmul(pv_bar, transpose(pl_bar, (1, 0)))  # (D, D)
    return _diag_cross_entropy(logits)


@dataclass
class TaskLabelMatrix:
    z: np.ndarray          # k x k binary, z_ij = 1 iff c_ij >= threshold
    c: np.ndarray          # k x k cosine matrix
    threshold: float


def task_label_matrix(embeddings: Sequence[np.ndarray], threshold: float) -> TaskLabelMatrix:
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0):
        raise ValueError("task_label_matrix: zero-norm task embedding")
    unit = emb / norms[:, None]
    c = unit @ unit.T
    z = (c >= threshold).astype(np.float64)
    return TaskLabelMatrix(z=z, c=c, threshold=threshold)


def cpa_loss(prompt_sets: Sequence, labels: TaskLabelMatrix, tau: float) -> Tensor:
    """NT-BXent over flattened per-task prompts.

    l_ij = -z_ij log sig(TS_ij/tau) - (1-z_ij) log sig((1-TS_ij)/tau),
    per-task normalized by positive/negative counts, averaged over both
    modalities and all k tasks. Gradient reaches only unfrozen factors.
    """
    k = len(prompt_sets)
    z = labels.z
    if z.shape != (k, k):
        raise ValueError(f"cpa_loss: label matrix {z.shape} vs {k} tasks")

    def score_matrix(prompts: list) -> Tensor:
        flat = [l2_normalize(reshape(p, (1, p.size))) for p in prompts]
        stacked = concat(flat, axis=0)                       # (k, DLd)
        return matmul(stacked, transpose(stacked, (1, 0)))   # (k, k) cosines

    n_pos = z.sum(axis=1)
    n_neg = (1.0 - z).sum(axis=1)
    # weight w_ij multiplies l_ij; rows with no positives (or negatives)
    # drop that term rather than divide by zero
    w = np.zeros((k, k))
    pos_rows = n_pos > 0
    neg_rows = n_neg > 0
    w[pos_rows] += z[pos_rows] / n_pos[pos_rows, None]
    w[neg_rows] += (1.0 - z[neg_rows]) / n_neg[neg_rows, None]
    w_t = constant(w)
    z_t = constant(z)
    one_minus_z = constant(1.0 - z)

    total = None
    for modality in ("vision", "text"):
        prompts = [ps.vision_prompts() if modality == "vision" else ps.text_prompts()
                   for ps in prompt_sets]
        ts = score_matrix(prompts)
        pos_term = mul(z_t, log(sigmoid(scale(ts, 1.0 / tau))))
        neg_term = mul(one_minus_z, log(sigmoid(scale(add(scale(ts, -1.0), 1.0), 1.0 / tau))))
        l_ij = scale(add(pos_term, neg_term), -1.0)
        contrib = tsum(mul(w_t, l_ij))
        total = contrib if total is None else add(total, contrib)
    return scale(total, 1.0 / (2.0 * k))


def nt_bxent_pair(ts: float, z: int, tau: float) -> float:
    """Scalar reference for one pair's NT-BXent term (test oracle)."""
    def logsig(x):
        return -np.log1p(np.exp(-x)) if x >= 0 else x - np.log1p(np.exp(x))
    return -z * logsig(ts / tau) - (1 - z) * logsig((1.0 - ts) / tau)


def total_loss(l_base: Tensor, l_modal: Tensor, l_task: Tensor,
               weights: LossWeights) -> Tensor:
    for name, t in (("base", l_base), ("modal", l_modal), ("task", l_task)):
        if not np.all(np.isfinite(as_tensor(t).data)):
            raise ValueError(f"total_loss: non-finite {name} component")
    return add(add(scale(as_tensor(l_base), weights.base),
                   scale(as_tensor(l_modal), weights.modal)),
               scale(as_tensor(l_task), weights.task))
