"""Pixel-level InfoNCE loss, its exact gradient, and the dense projection head.

The objective over M query pixels with one positive each and a shared bank of
K-1 negatives is

    L = mean_i -log( exp(s(q_i, p_i)) / (sum_j exp(s(q_i, n_j)) + exp(s(q_i, p_i))) )

so the denominator has exactly K terms, positive included.  Similarity is
temperature-scaled cosine, s(a, b) = cos(a, b) / tau, with tau defaulting to
0.2.  Evaluation subtracts the per-query max logit before exponentiation, so
logits up to +-700 cannot overflow, and reduces in a fixed order for bitwise
reproducibility.

The gradient functions return the exact analytic derivative with respect to
the raw (unnormalized) embedding rows; tests validate them against central
finite differences.

Embedding tensor file "PCEB": magic, rows u32, cols u32, float64 row-major,
little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import DegenerateEmbedding, FormatError, ShapeError

PCEB_MAGIC = b"PCEB"
DEFAULT_TEMPERATURE = 0.2


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ShapeError(f"{name} contains non-finite values")
    return arr


def _unit_rows(x: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateEmbedding(f"zero-norm row in {name}")
    return x / norms[:, None], norms


@dataclass(frozen=True)
class EmbeddingBatch:
    """M queries, M aligned positives, and the K-1 negatives.

    Negatives are a shared (K-1, d) bank by default; an (M, K-1, d) array
    selects the per-query mode instead.  M = 0 is allowed as the degenerate
    empty batch (loss 0, zero gradients).
    """

    queries: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        q = _as_matrix(self.queries, "queries")
        p = _as_matrix(self.positives, "positives")
        n = np.ascontiguousarray(np.asarray(self.negatives, dtype=np.float64))
        if p.shape != q.shape:
            raise ShapeError(f"positives shape {p.shape} != queries shape {q.shape}")
        if n.ndim not in (2, 3):
            raise ShapeError(f"negatives must be (K-1, d) or (M, K-1, d), got {n.shape}")
        if not np.isfinite(n).all():
            raise ShapeError("negatives contain non-finite values")
        if n.ndim == 3 and n.shape[0] != q.shape[0]:
            raise ShapeError(
                f"per-query negatives rows {n.shape[0]} != query count {q.shape[0]}"
            )
        if n.shape[-1] != q.shape[1]:
            raise ShapeError(f"negatives dim {n.shape[-1]} != queries dim {q.shape[1]}")
        if n.shape[-2] < 1:
            raise ShapeError("need at least one negative (K >= 2)")
        if not (np.isfinite(self.temperature) and self.temperature > 0.0):
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        # arrays stay caller-owned (buffer-protocol friendly): no copy, no lock
        for name, arr in (("queries", q), ("positives", p), ("negatives", n)):
            object.__setattr__(self, name, arr)

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def per_query_negatives(self) -> bool:
        return self.negatives.ndim == 3

    @property
    def num_classes(self) -> int:
        """K: negatives plus the positive."""
        return self.negatives.shape[-2] + 1


def similarity(a, b, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Temperature-scaled cosine similarity of two vectors."""
    av = np.asarray(a, dtype=np.float64).reshape(-1)
    bv = np.asarray(b, dtype=np.float64).reshape(-1)
    if av.shape != bv.shape:
        raise ShapeError(f"vector shapes differ: {av.shape} vs {bv.shape}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbedding("zero-norm vector has no direction")
    return float(av @ bv / (na * nb * temperature))


def loss_from_logits(pos_logits: np.ndarray, neg_logits: np.ndarray) -> float:
    """Mean softmax cross-entropy at the logit level (max-subtracted)."""
    pos = np.asarray(pos_logits, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_logits, dtype=np.float64)
    if neg.shape[0] != pos.shape[0]:
        raise ShapeError("pos/neg logit row counts differ")
    if pos.shape[0] == 0:
        return 0.0
    z = np.concatenate([neg, pos[:, None]], axis=1)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return float(np.mean(lse - pos))


def grad_from_logits(
    pos_logits: np.ndarray, neg_logits: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """d(mean loss)/d(logits): softmax minus the one-hot positive, over M."""
    pos = np.asarray(pos_logits, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_logits, dtype=np.float64)
    m_count = pos.shape[0]
    if m_count == 0:
        return np.zeros(0), np.zeros_like(neg)
    z = np.concatenate([neg, pos[:, None]], axis=1)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    soft = e / e.sum(axis=1, keepdims=True)
    return (soft[:, -1] - 1.0) / m_count, soft[:, :-1] / m_count


def _logits(batch: EmbeddingBatch):
    qh, qn = _unit_rows(batch.queries, "queries")
    ph, pn = _unit_rows(batch.positives, "positives")
    neg = batch.negatives
    norms = np.linalg.norm(neg, axis=-1)
    if np.any(norms == 0.0):
        raise DegenerateEmbedding("zero-norm row in negatives")
    nh = neg / norms[..., None]
    cos_pos = np.sum(qh * ph, axis=1)
    if batch.per_query_negatives:
        cos_neg = np.einsum("md,mkd->mk", qh, nh)
    else:
        cos_neg = qh @ nh.T
    tau = batch.temperature
    return (qh, qn, ph, pn, nh, norms, cos_pos, cos_neg, cos_pos / tau, cos_neg / tau)


def info_nce_loss(batch: EmbeddingBatch) -> float:
    """Mean InfoNCE loss over the batch; equals log K when all logits tie."""
    if batch.num_queries == 0:
        return 0.0
    *_, pos_logits, neg_logits = _logits(batch)
    return loss_from_logits(pos_logits, neg_logits)


def info_nce_grad(
    batch: EmbeddingBatch,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact analytic gradient of info_nce_loss w.r.t. (queries, positives, negatives)."""
    if batch.num_queries == 0:
        return (
            np.zeros_like(batch.queries),
            np.zeros_like(batch.positives),
            np.zeros_like(batch.negatives),
        )
    qh, qn, ph, pn, nh, nn, cos_pos, cos_neg, pos_logits, neg_logits = _logits(batch)
    d_pos, d_neg = grad_from_logits(pos_logits, neg_logits)
    tau = batch.temperature

    # d cos(a, b) / d a = (b_hat - cos * a_hat) / |a|
    coeff_q = d_pos * cos_pos + np.sum(d_neg * cos_neg, axis=1)
    if batch.per_query_negatives:
        neg_pull = np.einsum("mk,mkd->md", d_neg, nh)
        grad_n = (
            d_neg[..., None] * qh[:, None, :] - (d_neg * cos_neg)[..., None] * nh
        ) / (tau * nn[..., None])
    else:
        neg_pull = d_neg @ nh
        coeff_n = np.sum(d_neg * cos_neg, axis=0)
        grad_n = (d_neg.T @ qh - coeff_n[:, None] * nh) / (tau * nn[:, None])
    grad_q = (d_pos[:, None] * ph + neg_pull - coeff_q[:, None] * qh) / (tau * qn[:, None])
    grad_p = d_pos[:, None] * (qh - cos_pos[:, None] * ph) / (tau * pn[:, None])
    return grad_q, grad_p, grad_n


@dataclass(frozen=True)
class ProjectionHead:
    """Per-pixel two-layer MLP: affine -> ReLU -> affine, identical at every pixel.

    Equivalent to a pair of 1x1 convolutions with a 2048-wide hidden layer by
    default; operating on (M, d) rows makes the positional independence
    explicit.
    """

    w1: np.ndarray  # (hidden, d_in)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (d_out, hidden)
    b2: np.ndarray  # (d_out,)

    def __post_init__(self):
        w1 = _as_matrix(self.w1, "w1")
        w2 = _as_matrix(self.w2, "w2")
        b1 = np.ascontiguousarray(np.asarray(self.b1, dtype=np.float64)).reshape(-1)
        b2 = np.ascontiguousarray(np.asarray(self.b2, dtype=np.float64)).reshape(-1)
        if b1.shape[0] != w1.shape[0]:
            raise ShapeError(f"b1 length {b1.shape[0]} != w1 rows {w1.shape[0]}")
        if w2.shape[1] != w1.shape[0]:
            raise ShapeError(f"w2 cols {w2.shape[1]} != hidden width {w1.shape[0]}")
        if b2.shape[0] != w2.shape[0]:
            raise ShapeError(f"b2 length {b2.shape[0]} != w2 rows {w2.shape[0]}")
        for name, arr in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            object.__setattr__(self, name, arr)

    @classmethod
    def random(
        cls, d_in: int, hidden: int = 2048, d_out: int = 128, rng_seed: int = 0
    ) -> "ProjectionHead":
        rng = np.random.Generator(np.random.PCG64(rng_seed))
        scale1 = 1.0 / np.sqrt(d_in)
        scale2 = 1.0 / np.sqrt(hidden)
        return cls(
            rng.normal(0.0, scale1, size=(hidden, d_in)),
            np.zeros(hidden),
            rng.normal(0.0, scale2, size=(d_out, hidden)),
            np.zeros(d_out),
        )

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]


def project(head: ProjectionHead, pixels) -> np.ndarray:
    """Apply the head to every pixel row of an (M, d_in) matrix."""
    x = _as_matrix(pixels, "pixels")
    if x.shape[1] != head.in_dim:
        raise ShapeError(f"pixel dim {x.shape[1]} != head input dim {head.in_dim}")
    hidden = np.maximum(x @ head.w1.T + head.b1, 0.0)
    return hidden @ head.w2.T + head.b2


def write_embeddings(matrix: np.ndarray, sink: BinaryIO) -> int:
    """Serialize an (M, d) float64 matrix as PCEB; returns the byte count."""
    arr = _as_matrix(matrix, "embeddings")
    n = sink.write(PCEB_MAGIC)
    n += sink.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
    n += sink.write(arr.astype("<f8").tobytes())
    return n


def read_embeddings(source: BinaryIO) -> np.ndarray:
    """Parse a PCEB stream; FormatError with byte offset on malformed input."""
    offset = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal offset
        data = source.read(nbytes)
        if len(data) != nbytes:
            raise FormatError(f"truncated {what}", offset + len(data))
        offset += nbytes
        return data

    if take(4, "magic") != PCEB_MAGIC:
        raise FormatError("bad magic", 0)
    rows, cols = struct.unpack("<II", take(8, "dims"))
    data = np.frombuffer(take(8 * rows * cols, "payload"), dtype="<f8")
    return data.reshape(rows, cols).astype(np.float64)
