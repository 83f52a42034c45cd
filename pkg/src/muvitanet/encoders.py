"""Shared multi-view patient encoder.

Feature view: every code's presence series (a column of the visit matrix) is
convolved with its own filter bank and max-pooled over time -> H^f (|C| x 4d).

Visit view: codes are embedded, pooled per visit with attention, fused with
demographics, shifted by a sinusoidal encoding of the time to the last visit,
and run through a bidirectional GRU -> H^v (T x 2d); h* is a small MLP over
the last visit's state.

All functions operate on padded batches (see ``RecordBatch``); a single
record is a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import DEMO_DIM, PatientRecord
from .errors import DimensionError, OrderingError
from .numerics import ParamStore, Tensor, glorot_uniform
from .numerics import tensor as tn
from .numerics.ops import affine, gru_sequence

TIME_SCALE = 10000.0


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 16
    kernel_width: int = 3
    demo_dim: int = DEMO_DIM

    def __post_init__(self):
        if self.hidden_dim < 2 or self.hidden_dim % 2:
            raise DimensionError(f"hidden_dim must be even and >= 2, got {self.hidden_dim}")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise DimensionError(f"kernel_width must be odd, got {self.kernel_width}")
        if self.vocab_size < 1:
            raise DimensionError("vocab_size must be >= 1")

    @property
    def feature_filters(self) -> int:
        return 4 * self.hidden_dim


@dataclass
class RecordBatch:
    """Padded tensors for B records with up to T visits of up to M codes."""

    records: tuple[PatientRecord, ...]
    visit_matrix: np.ndarray   # (B, T, C) binary
    visit_mask: np.ndarray     # (B, T) bool
    codes: np.ndarray          # (B, T, M) int, 0 where padded
    code_mask: np.ndarray      # (B, T, M) bool
    demo: np.ndarray           # (B, demo_dim)
    intervals: np.ndarray      # (B, T) days from visit j to the last visit
    last_visit: np.ndarray     # (B, T) one-hot of each record's final visit

    @property
    def size(self) -> int:
        return len(self.records)

    @property
    def lengths(self) -> np.ndarray:
        return self.visit_mask.sum(axis=1)


def make_batch(records: Sequence[PatientRecord], vocab_size: int) -> RecordBatch:
    records = tuple(records)
    b = len(records)
    t = max(r.num_visits for r in records)
    m = max(len(v.codes) for r in records for v in r.visits)
    vm = np.zeros((b, t, vocab_size))
    vmask = np.zeros((b, t), dtype=bool)
    codes = np.zeros((b, t, m), dtype=np.intp)
    cmask = np.zeros((b, t, m), dtype=bool)
    # padded visits expose one dummy code so their softmax stays defined;
    # the GRU mask discards whatever they produce
    cmask[:, :, 0] = True
    demo = np.zeros((b, DEMO_DIM))
    intervals = np.zeros((b, t))
    last = np.zeros((b, t))
    for i, r in enumerate(records):
        r.check_against(vocab_size)
        demo[i] = r.demographics
        t_last = r.visits[-1].t
        for j, v in enumerate(r.visits):
            vm[i, j, list(v.codes)] = 1.0
            vmask[i, j] = True
            codes[i, j, : len(v.codes)] = v.codes
            cmask[i, j, : len(v.codes)] = True
            intervals[i, j] = t_last - v.t
        last[i, r.num_visits - 1] = 1.0
    return RecordBatch(records, vm, vmask, codes, cmask, demo, intervals, last)


# ---------------------------------------------------------------- parameters


def init_encoder_params(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator,
                        feature_view: bool = True, visit_view: bool = True) -> None:
    d, c, k, f = cfg.hidden_dim, cfg.vocab_size, cfg.kernel_width, cfg.feature_filters
    if feature_view:
        store.add("feature.conv_w", glorot_uniform(rng, (c, f, k), k, f * k))
        store.add("feature.conv_b", np.zeros((c, f)))
    if visit_view:
        store.add("visit.embed_w", glorot_uniform(rng, (d, c), c, d))
        store.add("visit.embed_b", np.zeros(d))
        store.add("visit.attn_w1", glorot_uniform(rng, (d, d), d, d))
        store.add("visit.attn_b1", np.zeros(d))
        store.add("visit.attn_w2", glorot_uniform(rng, (1, d), d, 1))
        store.add("visit.attn_b2", np.zeros(1))
        store.add("visit.demo_w", glorot_uniform(rng, (d, d + cfg.demo_dim), d + cfg.demo_dim, d))
        for direction in ("gru_fwd", "gru_bwd"):
            w_ih = np.concatenate([glorot_uniform(rng, (d, d), d, d) for _ in range(3)])
            w_hh = np.concatenate([glorot_uniform(rng, (d, d), d, d) for _ in range(3)])
            store.add(f"visit.{direction}.w_ih", w_ih)
            store.add(f"visit.{direction}.w_hh", w_hh)
            store.add(f"visit.{direction}.bias", np.zeros(3 * d))
        store.add("visit.out_w1", glorot_uniform(rng, (2 * d, 2 * d), 2 * d, 2 * d))
        store.add("visit.out_b1", np.zeros(2 * d))
        store.add("visit.out_w2", glorot_uniform(rng, (2 * d, 2 * d), 2 * d, 2 * d))
        store.add("visit.out_b2", np.zeros(2 * d))


# ---------------------------------------------------------------- feature view


def encode_feature_view(visit_matrix, params: ParamStore, cfg: EncoderConfig,
                        visit_mask: np.ndarray | None = None) -> Tensor:
    """(..., T, C) binary visits -> (..., C, 4d) per-code representations."""
    x = np.asarray(visit_matrix, dtype=float)
    w, b = params["feature.conv_w"], params["feature.conv_b"]
    if x.shape[-1] != cfg.vocab_size or w.shape != (cfg.vocab_size, cfg.feature_filters, cfg.kernel_width):
        raise DimensionError(f"feature view: visits {x.shape}, kernels {w.shape}, config {cfg}")
    series = np.swapaxes(x, -1, -2)  # (..., C, T)
    mask = None if visit_mask is None else np.asarray(visit_mask, dtype=bool)
    return tn.conv1d_maxpool_per_channel(series, w, b, mask)


# ---------------------------------------------------------------- visit view


def embed_codes(codes, params: ParamStore) -> Tensor:
    """ReLU(W1 x + b1) for one-hot x, i.e. ReLU of the selected W1 column plus bias."""
    table = params["visit.embed_w"].T  # (C, d)
    return tn.relu(tn.take_rows(table, codes) + params["visit.embed_b"])


def visit_code_attention(embeddings: Tensor, params: ParamStore, mask=None) -> tuple[Tensor, Tensor]:
    """Attention over a visit's codes. (..., M, d) -> (alpha (..., M), visit vector (..., d))."""
    hidden = tn.tanh(affine(embeddings, params["visit.attn_w1"], params["visit.attn_b1"]))
    scores = affine(hidden, params["visit.attn_w2"], params["visit.attn_b2"])
    scores = scores.reshape(scores.shape[:-1])
    alpha = tn.softmax(scores, axis=-1, mask=mask)
    pooled = (alpha.reshape(alpha.shape + (1,)) * embeddings).sum(axis=-2)
    return alpha, pooled


def fuse_demographics(visit_vec: Tensor, demo, params: ParamStore) -> Tensor:
    visit_vec = tn.as_tensor(visit_vec)
    demo = np.broadcast_to(np.asarray(demo, dtype=float), visit_vec.shape[:-1] + (np.shape(demo)[-1],))
    return affine(tn.concat([visit_vec, Tensor(demo)], axis=-1), params["visit.demo_w"])


def temporal_encoding(t_j, t_last, d: int) -> np.ndarray:
    """Sinusoidal encoding of the interval t_last - t_j (days).

    Entry 2i is sin(delta / 10000**(2i/d)), entry 2i+1 the matching cosine.
    Broadcasts over array inputs; output has a trailing axis of length d.
    """
    if d < 2 or d % 2:
        raise DimensionError(f"temporal encoding needs an even dimension, got {d}")
    delta = np.asarray(t_last, dtype=float) - np.asarray(t_j, dtype=float)
    if np.any(delta < 0):
        raise OrderingError("visit timestamp after the last visit")
    return interval_encoding(delta, d)


def interval_encoding(delta, d: int) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    freq = TIME_SCALE ** (-np.arange(0, d, 2) / d)
    angle = delta[..., None] * freq
    out = np.empty(delta.shape + (d,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def encode_visit_view(batch: RecordBatch, params: ParamStore,
                      cfg: EncoderConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Returns H^v (B, T, 2d), h* (B, 2d) and code attention alpha (B, T, M)."""
    emb = embed_codes(batch.codes, params)
    alpha, pooled = visit_code_attention(emb, params, batch.code_mask)
    fused = fuse_demographics(pooled, batch.demo[:, None, :], params)
    x = fused + interval_encoding(batch.intervals, cfg.hidden_dim)
    fwd = gru_sequence(x, batch.visit_mask, params.group("visit.gru_fwd"), reverse=False)
    bwd = gru_sequence(x, batch.visit_mask, params.group("visit.gru_bwd"), reverse=True)
    hv = tn.concat([fwd, bwd], axis=-1)
    h_last = (hv * batch.last_visit[:, :, None]).sum(axis=1)
    hidden = tn.relu(affine(h_last, params["visit.out_w1"], params["visit.out_b1"]))
    h_star = affine(hidden, params["visit.out_w2"], params["visit.out_b2"])
    return hv, h_star, alpha


@dataclass
class SharedRepresentation:
    feature_view: Tensor | None     # (B, C, 4d)
    visit_view: Tensor | None       # (B, T, 2d)
    patient: Tensor | None          # (B, 2d)
    code_attention: Tensor | None   # (B, T, M)
    visit_mask: np.ndarray          # (B, T)

    def code_attention_for(self, batch: RecordBatch, i: int) -> list[np.ndarray]:
        """Per-visit alpha vectors of record ``i``, trimmed to its real codes."""
        rec = batch.records[i]
        return [self.code_attention.data[i, j, : len(v.codes)].copy() for j, v in enumerate(rec.visits)]


def encode(batch: RecordBatch, params: ParamStore, cfg: EncoderConfig,
           feature_view: bool = True, visit_view: bool = True) -> SharedRepresentation:
    hf = encode_feature_view(batch.visit_matrix, params, cfg, batch.visit_mask) if feature_view else None
    hv = h_star = alpha = None
    if visit_view:
        hv, h_star, alpha = encode_visit_view(batch, params, cfg)
    return SharedRepresentation(hf, hv, h_star, alpha, batch.visit_mask)
