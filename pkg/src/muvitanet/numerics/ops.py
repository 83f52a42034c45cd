"""Network building blocks on top of the autodiff tensor.

All functions accept leading batch dimensions where it makes sense; the
single-example shapes in the docstrings are the minimal case.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import DimensionError, DomainError
from . import tensor as tn
from .tensor import Tensor, as_tensor

ACTIVATIONS = {"relu": tn.relu, "tanh": tn.tanh, "sigmoid": tn.sigmoid}


def _check_finite(x: Tensor, what: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise DomainError(f"non-finite values in {what}")


def affine(x, weight, bias=None) -> Tensor:
    """``weight @ x + bias`` applied along the last axis of ``x``.

    weight is (out, in); x is (..., in).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"affine: weight {weight.shape} does not accept input {x.shape}")
    out = tn.matmul(x, weight.T)
    if bias is None:
        return out
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    return out + bias


def activation(x, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind not in ACTIVATIONS:
        raise DomainError(f"unknown activation {kind!r}")
    _check_finite(x, f"{kind} input")
    return ACTIVATIONS[kind](x)


def softmax(scores, axis: int = -1, mask=None) -> Tensor:
    return tn.softmax(scores, axis=axis, mask=mask)


def conv1d_single_channel(sequence, kernels, bias) -> Tensor:
    """Length-preserving convolution of one series with a filter bank.

    sequence: (T,); kernels: (filters, width); bias: (filters,) -> (filters, T).
    """
    sequence, kernels, bias = as_tensor(sequence), as_tensor(kernels), as_tensor(bias)
    if sequence.ndim != 1 or kernels.ndim != 2 or bias.shape != (kernels.shape[0],):
        raise DimensionError(
            f"conv1d: sequence {sequence.shape}, kernels {kernels.shape}, bias {bias.shape}")
    out = tn.conv1d_per_channel(sequence.reshape(1, -1), kernels.reshape(1, *kernels.shape),
                                bias.reshape(1, -1))
    return out.reshape(kernels.shape[0], sequence.shape[0])


def maxpool_over_time(feature_map, mask=None) -> Tensor:
    """Row-wise max over the last (time) axis: (filters, T) -> (filters,)."""
    return tn.max_over_last(feature_map, mask)


def gru_cell(x, h_prev, p: Mapping[str, Tensor]) -> Tensor:
    """One GRU step.

    ``p`` holds ``w_ih`` (3h, in), ``w_hh`` (3h, h) and ``bias`` (3h,), gate
    blocks ordered update, reset, candidate.

        z = sigmoid(W_z x + U_z h + b_z)
        r = sigmoid(W_r x + U_r h + b_r)
        n = tanh(W_n x + U_n (r * h) + b_n)
        h' = (1 - z) * n + z * h
    """
    x, h_prev = as_tensor(x), as_tensor(h_prev)
    w_ih, w_hh, bias = p["w_ih"], p["w_hh"], p["bias"]
    hid = w_hh.shape[1]
    if (w_ih.shape[0] != 3 * hid or w_hh.shape[0] != 3 * hid or x.shape[-1] != w_ih.shape[1]
            or h_prev.shape[-1] != hid):
        raise DimensionError(
            f"gru_cell: input {x.shape}, hidden {h_prev.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    gi = affine(x, w_ih, bias)
    gh = affine(h_prev, w_hh[: 2 * hid])
    z = tn.sigmoid(gi[..., :hid] + gh[..., :hid])
    r = tn.sigmoid(gi[..., hid:2 * hid] + gh[..., hid:])
    n = tn.tanh(gi[..., 2 * hid:] + affine(r * h_prev, w_hh[2 * hid:]))
    return (1.0 - z) * n + z * h_prev


def normalize_to_unit_sphere(v, axis: int = -1) -> Tensor:
    return tn.l2_normalize(v, axis=axis)


def gru_sequence(x, mask, p: Mapping[str, Tensor], reverse: bool = False) -> Tensor:
    """Run ``gru_cell`` over the time axis of x (B, T, in) as one graph node.

    Where ``mask[b, t]`` is False the state is carried through unchanged, so
    right-padded records behave as if they ended at their last real visit in
    both directions. Returns the state after every step, (B, T, h).
    """
    x = as_tensor(x)
    w_ih, w_hh, bias = p["w_ih"], p["w_hh"], p["bias"]
    hid = w_hh.shape[1]
    b, t, _ = x.shape
    if w_ih.shape[0] != 3 * hid or x.shape[-1] != w_ih.shape[1]:
        raise DimensionError(f"gru_sequence: input {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    m = np.asarray(mask, dtype=float).reshape(b, t, 1)
    gi = x.data @ w_ih.data.T + bias.data
    u_zr, u_n = w_hh.data[: 2 * hid], w_hh.data[2 * hid:]
    order = range(t - 1, -1, -1) if reverse else range(t)
    h = np.zeros((b, hid))
    out = np.empty((b, t, hid))
    cache = {}
    for j in order:
        gh = h @ u_zr.T
        z = _sig(gi[:, j, :hid] + gh[:, :hid])
        r = _sig(gi[:, j, hid:2 * hid] + gh[:, hid:])
        rh = r * h
        n = np.tanh(gi[:, j, 2 * hid:] + rh @ u_n.T)
        h_new = (1.0 - z) * n + z * h
        mj = m[:, j]
        cache[j] = (h, z, r, rh, n)
        h = mj * h_new + (1.0 - mj) * h
        out[:, j] = h

    def backward(g):
        dgi = np.zeros_like(gi)
        du_zr = np.zeros_like(u_zr)
        du_n = np.zeros_like(u_n)
        carry = np.zeros((b, hid))
        for j in reversed(list(order)):
            h_prev, z, r, rh, n = cache[j]
            mj = m[:, j]
            dh = carry + g[:, j]
            dnew = mj * dh
            dprev = (1.0 - mj) * dh + dnew * z
            dn = dnew * (1.0 - z)
            dz = dnew * (h_prev - n)
            dan = dn * (1.0 - n * n)
            du_n += dan.T @ rh
            drh = dan @ u_n
            dprev += drh * r
            dar = drh * h_prev * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dzr = np.concatenate([daz, dar], axis=1)
            du_zr += dzr.T @ h_prev
            dprev += dzr @ u_zr
            dgi[:, j, :hid] = daz
            dgi[:, j, hid:2 * hid] = dar
            dgi[:, j, 2 * hid:] = dan
            carry = dprev
        flat = dgi.reshape(-1, 3 * hid)
        dw_ih = flat.T @ x.data.reshape(-1, x.shape[-1])
        dbias = flat.sum(axis=0)
        dx = dgi @ w_ih.data if x.requires_grad else None
        return dx, dw_ih, np.concatenate([du_zr, du_n]), dbias

    return tn._make(out, (x, w_ih, w_hh, bias), backward)


def _sig(v: np.ndarray) -> np.ndarray:
    return tn.sigmoid(Tensor(v)).data
