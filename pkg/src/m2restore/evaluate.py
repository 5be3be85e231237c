"""Restoration quality report and routing analysis over a corpus split."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import DEGRADATION_CLASSES
from .data import SplitData
from .errors import ContractError
from .metrics import cosine_similarity, psnr, silhouette, ssim
from .model import M2Restore, forward
from .router import INFER
from .tensor import Tensor, no_grad


def restore(model: M2Restore, provider, images: np.ndarray, labels=None, batch: int = 8,
            keep_routing: bool = False):
    """Infer-mode restoration of ``images (n,3,H,W)``, clipped to ``[0,1]``.

    With ``keep_routing`` also returns one list of ``RoutingState`` per batch.
    """
    dtype = model.parameters()[0].dtype
    outs, states = [], []
    with no_grad():
        for lo in range(0, len(images), batch):
            x = np.asarray(images[lo:lo + batch])
            lab = None if labels is None else labels[lo:lo + batch]
            prior = provider(x, lab)
            y, diag = forward(model, Tensor(x.astype(dtype)), prior, INFER)
            outs.append(np.clip(y.data, 0.0, 1.0))
            if keep_routing:
                for st in diag:
                    st.Se_tensor = None
                states.append(diag)
    restored = np.concatenate(outs)
    return (restored, states) if keep_routing else restored


@dataclass
class EvalRow:
    kind: str
    n: int
    psnr: float
    ssim: float
    input_psnr: float
    input_ssim: float


EVAL_HEADER = ["type", "n", "psnr", "ssim", "input_psnr", "input_ssim"]


def evaluate(model: M2Restore, provider, data: SplitData, batch: int = 8) -> list[EvalRow]:
    """One row per degradation type present, then ``average`` (mean of the type rows)."""
    restored = restore(model, provider, data.degraded, data.labels, batch)
    per = {"psnr": [], "ssim": [], "input_psnr": [], "input_ssim": []}
    for i in range(len(data)):
        c = data.clean[i]
        per["psnr"].append(psnr(restored[i], c))
        per["ssim"].append(ssim(restored[i], c))
        per["input_psnr"].append(psnr(data.degraded[i], c))
        per["input_ssim"].append(ssim(data.degraded[i], c))
    per = {k: np.array(v) for k, v in per.items()}
    kinds = np.array(data.kinds)
    rows = []
    for kind in [k for k in DEGRADATION_CLASSES if k in set(data.kinds)]:
        m = kinds == kind
        rows.append(EvalRow(kind, int(m.sum()), *(float(per[k][m].mean()) for k in per)))
    rows.append(EvalRow("average", len(data), *(float(np.mean([getattr(r, k) for r in rows])) for k in per)))
    return rows


def eval_csv(rows: list[EvalRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_HEADER)
    for r in rows:
        w.writerow([r.kind, r.n, f"{r.psnr:.4f}", f"{r.ssim:.4f}", f"{r.input_psnr:.4f}", f"{r.input_ssim:.4f}"])
    return buf.getvalue()


def eval_table(rows: list[EvalRow]) -> str:
    lines = [f"{'type':<10}{'n':>5}{'PSNR':>9}{'SSIM':>8}{'in PSNR':>10}{'in SSIM':>9}{'gain dB':>9}"]
    for r in rows:
        lines.append(f"{r.kind:<10}{r.n:>5}{r.psnr:>9.2f}{r.ssim:>8.3f}{r.input_psnr:>10.2f}"
                     f"{r.input_ssim:>9.3f}{r.psnr - r.input_psnr:>9.2f}")
    return "\n".join(lines)


# ------------------------------------------------------------------ routing

@dataclass
class RoutingReport:
    vectors: np.ndarray            # (n_images, N) mean Se over pixels and levels
    labels: np.ndarray
    ids: list
    kinds: list                    # type names in centroid order
    centroids: np.ndarray          # (n_types, N)
    cosine: np.ndarray             # (n_types, n_types)
    silhouette: float
    usage: np.ndarray              # (N,) selected-pixel counts summed over routers
    usage_per_level: np.ndarray    # (levels, N)

    @property
    def usage_ratio(self) -> float:
        lo = self.usage.min()
        return float("inf") if lo == 0 else float(self.usage.max() / lo)

    @property
    def max_offdiag_cosine(self) -> float:
        k = len(self.kinds)
        return float(max(self.cosine[i, j] for i in range(k) for j in range(k) if i != j))


def analyze_routing(model: M2Restore, provider, data: SplitData, batch: int = 8) -> RoutingReport:
    if not model.uses_router:
        raise ContractError("this model variant has no routers to analyse")
    present = [k for k in DEGRADATION_CLASSES if k in set(data.kinds)]
    if len(present) < 2:
        raise ContractError(f"routing analysis needs at least 2 degradation types, found {present}")
    _, states = restore(model, provider, data.degraded, data.labels, batch, keep_routing=True)
    vecs, per_level = [], None
    for diag in states:
        vecs.append(np.mean([st.Se.mean(axis=1) for st in diag], axis=0))
        counts = np.stack([st.selection_counts() for st in diag])
        per_level = counts if per_level is None else per_level + counts
    V = np.concatenate(vecs)
    kinds = np.array(data.kinds)
    cents = np.stack([V[kinds == k].mean(axis=0) for k in present])
    cos = np.array([[cosine_similarity(a, b) for b in cents] for a in cents])
    return RoutingReport(V, data.labels.copy(), list(data.ids), present, cents, cos,
                         silhouette(V, data.labels), per_level.sum(axis=0), per_level)


def routing_csv(rep: RoutingReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    N = rep.vectors.shape[1]
    w.writerow(["id", "type"] + [f"se_{n}" for n in range(N)])
    for sid, lab, v in zip(rep.ids, rep.labels, rep.vectors):
        w.writerow([sid, DEGRADATION_CLASSES[lab]] + [f"{x:.6f}" for x in v])
    return buf.getvalue()


def routing_summary(rep: RoutingReport) -> str:
    lines = ["centroids (mean expert weight):"]
    for k, c in zip(rep.kinds, rep.centroids):
        lines.append(f"  {k:<9}" + " ".join(f"{x:.3f}" for x in c))
    lines.append("pairwise cosine similarity:")
    for k, row in zip(rep.kinds, rep.cosine):
        lines.append(f"  {k:<9}" + " ".join(f"{x:.3f}" for x in row))
    lines.append(f"silhouette: {rep.silhouette:.4f}")
    lines.append("usage (selected pixels per expert): " + " ".join(str(int(u)) for u in rep.usage)
                 + f"   max/min = {rep.usage_ratio:.3f}")
    return "\n".join(lines)


def input_baseline(data: SplitData) -> float:
    """Mean over types of the degraded-input PSNR."""
    kinds = np.array(data.kinds)
    vals = [np.mean([psnr(data.degraded[i], data.clean[i]) for i in np.flatnonzero(kinds == k)])
            for k in sorted(set(data.kinds))]
    return float(np.mean(vals))


def average_row(rows: list[EvalRow]) -> Optional[EvalRow]:
    return next((r for r in rows if r.kind == "average"), None)
