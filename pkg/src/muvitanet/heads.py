"""Task-specific attention, decoders, projection heads, and losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import SharedRepresentation
from .errors import DimensionError, DomainError, TaskKindError
from .numerics import ParamStore, Tensor, glorot_uniform
from .numerics import tensor as tn
from .numerics.ops import affine

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class HeadLayout:
    """Widths of one task head for a given hidden size and active views."""

    hidden_dim: int
    feature_view: bool = True
    visit_view: bool = True
    kind: str = "labeled"          # "labeled" | "unlabeled"
    linear_decoder: bool = False
    proj_dim: int | None = None

    @property
    def rep_dim(self) -> int:
        d = self.hidden_dim
        return (4 * d if self.feature_view else 0) + (4 * d if self.visit_view else 0)

    @property
    def projection_dim(self) -> int:
        return self.proj_dim or 2 * self.hidden_dim


def init_head_params(store: ParamStore, prefix: str, layout: HeadLayout,
                     rng: np.random.Generator) -> None:
    d = layout.hidden_dim

    def mlp(name, n_in, n_hidden, n_out):
        store.add(f"{prefix}.{name}_w1", glorot_uniform(rng, (n_hidden, n_in), n_in, n_hidden))
        store.add(f"{prefix}.{name}_b1", np.zeros(n_hidden))
        store.add(f"{prefix}.{name}_w2", glorot_uniform(rng, (n_out, n_hidden), n_hidden, n_out))
        store.add(f"{prefix}.{name}_b2", np.zeros(n_out))

    if layout.feature_view:
        mlp("feat_attn", 4 * d, d, 1)
    if layout.visit_view:
        mlp("visit_attn", 2 * d, d, 1)
    if layout.kind == "labeled":
        if layout.linear_decoder:
            n = layout.rep_dim
            store.add(f"{prefix}.dec_w", glorot_uniform(rng, (1, n), n, 1))
            store.add(f"{prefix}.dec_b", np.zeros(1))
        else:
            mlp("dec", layout.rep_dim, 2 * d, 1)
    elif layout.kind == "unlabeled":
        if not (layout.feature_view and layout.visit_view):
            raise TaskKindError("the contrastive head needs both views")
        mlp("proj_f", 4 * d, 4 * d, layout.projection_dim)
        mlp("proj_v", 4 * d, 4 * d, layout.projection_dim)
    else:
        raise TaskKindError(f"unknown head kind {layout.kind!r}")


def _mlp(x, p: dict, name: str, hidden_act) -> Tensor:
    h = hidden_act(affine(x, p[f"{name}_w1"], p[f"{name}_b1"]))
    return affine(h, p[f"{name}_w2"], p[f"{name}_b2"])


@dataclass
class TaskOutput:
    beta: Tensor | None      # (B, C)
    gamma: Tensor | None     # (B, T)
    g_feature: Tensor | None  # (B, 4d)
    g_visit: Tensor | None   # (B, 2d)
    rep: Tensor              # o_k
    prediction: Tensor | None = None  # (B,)
    z_feature: Tensor | None = None
    z_visit: Tensor | None = None


def task_attention(shared: SharedRepresentation, head: dict) -> TaskOutput:
    """Per-task softmax weights over codes (beta) and visits (gamma), pooled into o_k."""
    parts = []
    beta = gamma = gf = gv = None
    if shared.feature_view is not None:
        hf = shared.feature_view
        s = _mlp(hf, head, "feat_attn", tn.tanh)
        beta = tn.softmax(s.reshape(s.shape[:-1]), axis=-1)
        gf = (beta.reshape(beta.shape + (1,)) * hf).sum(axis=-2)
        parts.append(gf)
    if shared.visit_view is not None:
        hv = shared.visit_view
        s = _mlp(hv, head, "visit_attn", tn.tanh)
        gamma = tn.softmax(s.reshape(s.shape[:-1]), axis=-1, mask=shared.visit_mask)
        gv = (gamma.reshape(gamma.shape + (1,)) * hv).sum(axis=-2)
        parts += [gv, shared.patient]
    if not parts:
        raise DimensionError("shared representation has no active view")
    rep = parts[0] if len(parts) == 1 else tn.concat(parts, axis=-1)
    return TaskOutput(beta, gamma, gf, gv, rep)


def decode_labeled(rep, head: dict) -> Tensor:
    """Onset probability from o_k; shape (B,) for (B, n) input."""
    rep = tn.as_tensor(rep)
    if "dec_w" in head:
        logit = affine(rep, head["dec_w"], head["dec_b"])
    elif "dec_w1" in head:
        logit = _mlp(rep, head, "dec", tn.relu)
    else:
        raise TaskKindError("head has no labeled decoder")
    return tn.sigmoid(logit.reshape(logit.shape[:-1]))


def project_unlabeled(g_feature, g_visit, h_star, head: dict) -> tuple[Tensor, Tensor]:
    """Unit-norm projections of the feature view and of (g^v, h*)."""
    if "proj_f_w1" not in head:
        raise TaskKindError("head has no projection layers")
    zf = _mlp(g_feature, head, "proj_f", tn.relu)
    zv = _mlp(tn.concat([g_visit, h_star], axis=-1), head, "proj_v", tn.relu)
    return tn.l2_normalize(zf), tn.l2_normalize(zv)


def bce_loss(pred, labels) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    pred = tn.as_tensor(pred)
    y = np.asarray(labels, dtype=float)
    if pred.data.size == 0:
        raise DomainError("empty batch")
    if pred.shape != y.shape:
        raise DimensionError(f"predictions {pred.shape} vs labels {y.shape}")
    p = tn.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = tn.log(p) * y + tn.log(1.0 - p) * (1.0 - y)
    return tn.mean(ll) * -1.0


def contrastive_loss(z_feature, z_visit, temperature: float = 1.0) -> Tensor:
    """Cross-view contrastive loss summed over the 2B anchors.

    For anchor z in {z_i^f, z_i^v} the numerator is exp(z_i^f . z_i^v) and the
    denominator sums exp(z . z') over every other vector in the batch.
    """
    zf, zv = tn.as_tensor(z_feature), tn.as_tensor(z_visit)
    if zf.ndim != 2 or zf.shape != zv.shape:
        raise DimensionError(f"projection shapes differ: {zf.shape} vs {zv.shape}")
    b = zf.shape[0]
    z = tn.concat([zf, zv], axis=0)  # rows 0..B-1 feature, B..2B-1 visit
    sim = tn.matmul(z, z.T) * (1.0 / temperature)
    pos = (zf * zv).sum(axis=-1) * (1.0 / temperature)
    others = ~np.eye(2 * b, dtype=bool)
    denom = tn.logsumexp(sim, axis=-1, mask=others)
    return (denom.sum() - pos.sum() * 2.0)
