"""Training objective: L1 reconstruction plus a CV^2 expert-balance term."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import ops
from .errors import ContractError
from .router import RoutingState
from .tensor import Tensor


def loss_l1(restored: Tensor, clean) -> Tensor:
    return ops.l1_mean(restored, clean)


def cv_squared(v, eps: float):
    """``Var(v) / (Mean(v)^2 + eps)`` with population variance; tensor or array in, same out."""
    mu = v.mean()
    var = ((v - mu) ** 2).mean()
    return var / (mu * mu + eps)


def loss_balance(diagnostics: Sequence[RoutingState], eps: float = 1e-10) -> Tensor:
    """Mean over routers of ``CV^2(w) + CV^2(s)``.

    ``w`` is the per-expert sum of routing weights over every pixel in the
    batch and carries gradient; ``s`` counts how many pixels selected each
    expert and is a constant.
    """
    if not diagnostics:
        raise ContractError("balance loss needs at least one routing state")
    terms = []
    for st in diagnostics:
        Se = st.Se_tensor if st.Se_tensor is not None else Tensor(st.Se)
        w = Se.reshape(-1, st.n_experts).sum(axis=0)
        s = st.selection_counts().astype(np.float64)
        s_term = float(cv_squared(s, eps))
        terms.append(cv_squared(w, eps) + s_term)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


def balance_from_usage(w, s, eps: float = 1e-10) -> float:
    """Closed-form balance value for given aggregate weights and counts."""
    w = np.asarray(w, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    return float(cv_squared(w, eps) + cv_squared(s, eps))


def loss_total(l1, balance, lam: float):
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    return l1 + lam * balance
