"""Selective state-space scan.

For each channel ``c`` and state index ``s``::

    h_t = exp(delta_t * A[c, s]) * h_{t-1} + delta_t * B_t[s] * u_t[c]
    y_t[c] = sum_s C_t[s] * h_t[c, s]

``A`` is strictly negative (stored as ``-exp(A_log)``), so every retention
factor lies in (0, 1). The recurrence is evaluated by :func:`linear_recurrence`,
which works in fixed-size chunks: a doubling (Hillis-Steele) scan inside each
chunk and a sequential carry between chunks. Work is ``O(L log chunk)`` and
live state is one chunk.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, make_op

DEFAULT_CHUNK = 64


def naive_recurrence(a: np.ndarray, x: np.ndarray, h0=None) -> np.ndarray:
    """``h_t = a_t * h_{t-1} + x_t`` along axis 1, one step at a time."""
    h = np.zeros_like(x)
    prev = np.zeros_like(x[:, 0]) if h0 is None else h0
    for t in range(x.shape[1]):
        prev = a[:, t] * prev + x[:, t]
        h[:, t] = prev
    return h


def linear_recurrence(a: np.ndarray, x: np.ndarray, h0=None, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Chunked evaluation of ``h_t = a_t * h_{t-1} + x_t`` along axis 1.

    ``a`` and ``x`` share shape ``(B, L, ...)``. Neither input is modified.
    """
    B, L = x.shape[:2]
    out = np.empty(np.broadcast_shapes(a.shape, x.shape), dtype=np.result_type(a, x))
    carry = np.zeros_like(out[:, 0]) if h0 is None else np.asarray(h0, dtype=out.dtype)
    for lo in range(0, L, chunk):
        hi = min(lo + chunk, L)
        A = np.array(a[:, lo:hi], dtype=out.dtype)
        X = np.array(x[:, lo:hi], dtype=out.dtype)
        step = 1
        T = hi - lo
        while step < T:
            # compose (A[t-step], X[t-step]) into (A[t], X[t]) for t >= step
            X[:, step:] = X[:, step:] + A[:, step:] * X[:, :-step]
            A[:, step:] = A[:, step:] * A[:, :-step]
            step *= 2
        out[:, lo:hi] = X + A * carry[:, None]
        carry = out[:, hi - 1]
    return out


def reverse_recurrence(a_next: np.ndarray, x: np.ndarray, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """``g_t = x_t + a_next_t * g_{t+1}`` (the adjoint of :func:`linear_recurrence`)."""
    return linear_recurrence(a_next[:, ::-1], x[:, ::-1], chunk=chunk)[:, ::-1]


def ssm_scan(u: Tensor, delta: Tensor, A: Tensor, Bt: Tensor, Ct: Tensor, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Selective scan with zero-order-hold retention and Euler input.

    Shapes: ``u (B, L, C)``, ``delta (B, L, 1)`` or ``(B, L, C)``,
    ``A (C, S)``, ``Bt (B, L, S)``, ``Ct (B, L, S)``. Returns ``(B, L, C)``.
    """
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, Bt.data, Ct.data
    dA = dd[..., None] * Ad                                  # (B, L, C, S)
    abar = np.exp(dA)
    drive = (dd * ud)[..., None] * Bd[:, :, None, :]         # (B, L, C, S)
    h = linear_recurrence(abar, drive, chunk=chunk)
    y = np.einsum("blcs,bls->blc", h, Cd)

    def bw(g):
        gh_direct = g[..., None] * Cd[:, :, None, :]
        a_next = np.zeros_like(abar)
        a_next[:, :-1] = abar[:, 1:]
        gh = reverse_recurrence(a_next, gh_direct, chunk=chunk)
        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]
        g_abar = gh * h_prev
        g_dA = g_abar * abar
        gC = np.einsum("blc,blcs->bls", g, h)
        g_bu = np.einsum("blcs,bls->blc", gh, Bd)            # d/d(delta*u)
        gB = np.einsum("blcs,blc->bls", gh, dd * ud)
        gu = g_bu * dd
        g_delta_full = g_bu * ud + np.einsum("blcs,cs->blc", g_dA, Ad)
        g_delta = g_delta_full.sum(axis=2, keepdims=True) if dd.shape[2] == 1 else g_delta_full
        gA = np.einsum("blcs,blc->cs", g_dA, np.broadcast_to(dd, ud.shape))
        return gu, g_delta, gA.reshape(Ad.shape), gB, gC

    return make_op(y, (u, delta, A, Bt, Ct), bw)


def ssm_scan_reference(u, delta, A, Bt, Ct) -> np.ndarray:
    """Plain sequential loop over time on numpy arrays (test oracle)."""
    u, delta, A, Bt, Ct = (np.asarray(v, dtype=np.float64) for v in (u, delta, A, Bt, Ct))
    Bn, L, C = u.shape
    y = np.zeros((Bn, L, C))
    dl = np.broadcast_to(delta, (Bn, L, C)) if delta.shape[2] == 1 else delta
    for b in range(Bn):
        state = np.zeros((C, A.shape[1]))
        for t in range(L):
            abar = np.exp(dl[b, t][:, None] * A)
            state = abar * state + dl[b, t][:, None] * Bt[b, t][None, :] * u[b, t][:, None]
            y[b, t] = state @ Ct[b, t]
    return y
