"""Optimizer, gradient-accumulated training step, and the training driver.

One optimizer step consumes ``batch_size * accum_steps`` samples drawn
without replacement, split into ``accum_steps`` micro-batches whose scaled
gradients are summed before a single Adam update. The routing noise of a
step is keyed by one seed plus each sample's position in the step, so the
split batch sees exactly the draws the unsplit batch would.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckpt_io
from . import ops
from .checkpoint import Checkpoint
from .config import RunConfig
from .data import SplitData
from .errors import ContractError, NumericalError
from .losses import loss_balance, loss_l1, loss_total
from .model import M2Restore, build_variant, forward
from .nn import Module
from .prompt import LearnedProvider, OracleProvider
from .router import TRAIN, RoutingNoise
from .tensor import Tensor, backward


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, params: dict, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ContractError("learning rate must be >= 0")
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            upd = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class Batch:
    degraded: np.ndarray     # (n, 3, H, W)
    clean: np.ndarray
    labels: np.ndarray       # (n,)
    ids: list                # corpus sample ids, for diagnostics

    def __len__(self):
        return len(self.labels)

    def slice(self, lo: int, hi: int) -> "Batch":
        return Batch(self.degraded[lo:hi], self.clean[lo:hi], self.labels[lo:hi], self.ids[lo:hi])


def sample_batch(data: SplitData, n: int, rng: np.random.Generator, flip: bool = True) -> Batch:
    """``n`` distinct samples with independent horizontal/vertical flips."""
    idx = rng.choice(len(data), size=min(n, len(data)), replace=False)
    deg = data.degraded[idx].copy()
    cln = data.clean[idx].copy()
    if flip:
        flips = rng.random((len(idx), 2)) < 0.5
        for i, (fh, fv) in enumerate(flips):
            axes = tuple(a for a, f in ((2, fh), (1, fv)) if f)
            if axes:
                deg[i] = np.flip(deg[i], axis=axes)
                cln[i] = np.flip(cln[i], axis=axes)
    return Batch(deg, cln, data.labels[idx], [data.ids[i] for i in idx])


def train_step(model: M2Restore, batch: Batch, opt: Adam, rng: np.random.Generator, provider,
               micro_batch: int, lam: float, eps_stab: float = 1e-10, step: int = 0) -> dict:
    """Accumulate gradients over micro-batches of ``batch``, then apply one Adam update.

    Returns ``l1``, ``balance``, ``total`` and ``usage`` (selected-pixel count per
    expert summed over routers). ``balance`` is the mean of the micro-batch values.
    """
    n = len(batch)
    if n == 0:
        raise ContractError("train_step needs a nonempty batch")
    if micro_batch < 1:
        raise ContractError("micro_batch must be >= 1")
    noise_seed = int(rng.integers(0, 2**62))
    dtype = model.parameters()[0].dtype
    opt.zero_grad()
    l1_sum = bal_sum = 0.0
    usage = np.zeros(model.cfg.n_experts, dtype=np.int64)
    n_micro = 0
    for lo in range(0, n, micro_batch):
        mb = batch.slice(lo, min(lo + micro_batch, n))
        frac = len(mb) / n
        image = Tensor(mb.degraded.astype(dtype))
        prior = provider(mb.degraded, mb.labels)
        noise = RoutingNoise(noise_seed, range(lo, lo + len(mb)))
        restored, diag = forward(model, image, prior, TRAIN, noise)
        l1 = loss_l1(restored, Tensor(mb.clean.astype(dtype)))
        if diag:
            bal = loss_balance(diag, eps_stab)
            for st in diag:
                usage += st.selection_counts()
        else:
            bal = Tensor(np.zeros((), dtype=dtype))
        total = loss_total(l1, bal, lam)
        if not math.isfinite(total.item()):
            raise NumericalError(f"non-finite loss at step {step} on samples {mb.ids}", step=step, batch_id=mb.ids)
        backward(total * frac)
        l1_sum += l1.item() * frac
        bal_sum += bal.item()
        n_micro += 1
    opt.step()
    balance = bal_sum / n_micro
    return {"l1": l1_sum, "balance": balance, "total": l1_sum + lam * balance, "usage": usage}


# ------------------------------------------------------------ prior training

def train_prior(provider: LearnedProvider, data: SplitData, steps: int, lr: float,
                rng: np.random.Generator, batch: int = 16) -> list[float]:
    """Fit the degradation classifier with cross-entropy; marks the provider trained."""
    params = dict(provider.net.named_parameters())
    opt = Adam(params, lr=lr)
    losses = []
    for _ in range(steps):
        b = sample_batch(data, batch, rng, flip=True)
        opt.zero_grad()
        logits = provider.net(Tensor(b.degraded.astype(np.float32)))
        loss = ops.cross_entropy(logits, b.labels)
        backward(loss)
        opt.step()
        losses.append(loss.item())
    provider.trained = True
    return losses


def make_provider(cfg: RunConfig):
    m = cfg.model
    if m.prior == "oracle":
        return OracleProvider(m.classes, m.prior_dim, m.prior_seed)
    if m.prior == "learned":
        return LearnedProvider(m.classes, m.prior_dim, np.random.default_rng(m.prior_seed))
    raise ContractError(f"prior: unknown provider {m.prior!r} (oracle or learned)")


# ------------------------------------------------------------------ driver

METRIC_FIELDS = ["step", "l1", "balance", "total", "lr"]


def metrics_header(n_experts: int) -> list[str]:
    return METRIC_FIELDS + [f"usage_{i}" for i in range(n_experts)]


def metrics_row(step: int, m: dict, lr: float) -> list[str]:
    return [str(step), repr(m["l1"]), repr(m["balance"]), repr(m["total"]), repr(lr)] + [str(int(u)) for u in m["usage"]]


class Trainer:
    """Owns model, optimizer, rng and provider for one run directory."""

    def __init__(self, cfg: RunConfig, data: SplitData, out_dir=None, log: Optional[Callable[[str], None]] = None):
        self.cfg = cfg.validate()
        self.data = data
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log = log or (lambda s: None)
        self.model = build_variant(cfg.model)
        self.provider = make_provider(cfg)
        t = cfg.train
        self.opt = Adam(dict(self.model.named_parameters()), t.lr, (t.beta1, t.beta2), t.adam_eps)
        self.rng = np.random.default_rng(t.seed)
        self.step = 0

    # -- checkpointing
    def to_checkpoint(self) -> Checkpoint:
        params = {k: p.data.copy() for k, p in self.model.named_parameters()}
        if isinstance(self.provider, LearnedProvider):
            params.update({"prior." + k: p.data.copy() for k, p in self.provider.net.named_parameters()})
        return Checkpoint(params=params, adam_m={k: v.copy() for k, v in self.opt.m.items()},
                          adam_v={k: v.copy() for k, v in self.opt.v.items()}, step=self.step,
                          adam_t=self.opt.t, rng_state=self.rng.bit_generator.state,
                          config_text=self.cfg.to_text())

    def restore(self, ck: Checkpoint) -> None:
        restore_state(ck, self.model, self.provider, self.opt, self.rng)
        self.step = ck.step

    def checkpoint_path(self, step: int) -> Path:
        return self.out_dir / f"ckpt_{step:06d}.m2r"

    def save_checkpoint(self) -> Path:
        path = self.checkpoint_path(self.step)
        ckpt_io.save(self.to_checkpoint(), path)
        return path

    # -- metrics
    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.csv"

    def _append_metrics(self, row: list[str]) -> None:
        new = not self.metrics_path.exists()
        with open(self.metrics_path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(metrics_header(self.cfg.model.n_experts))
            w.writerow(row)

    def _trim_metrics(self) -> None:
        """Drop rows past the current step (resuming from an earlier checkpoint)."""
        if not self.metrics_path.exists():
            return
        rows = list(csv.reader(io.StringIO(self.metrics_path.read_text())))
        keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= self.step]
        with open(self.metrics_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(keep)

    # -- loop
    def prepare(self) -> None:
        """Train the learned prior (if configured) before the first restoration step."""
        if isinstance(self.provider, LearnedProvider) and not self.provider.trained:
            t = self.cfg.train
            losses = train_prior(self.provider, self.data, t.prior_steps, t.prior_lr,
                                 np.random.default_rng([t.seed, 7]))
            self.log(f"prior classifier trained for {t.prior_steps} steps, final CE {losses[-1]:.4f}")

    def run(self, steps: Optional[int] = None, resume: Optional[Checkpoint] = None) -> list[dict]:
        t = self.cfg.train
        total = t.steps if steps is None else steps
        if resume is not None:
            self.restore(resume)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.txt").write_text(self.cfg.to_text())
            self._trim_metrics()
        self.prepare()
        history = []
        while self.step < total:
            batch = sample_batch(self.data, t.batch_size * t.accum_steps, self.rng, t.flip_augment)
            lam = self.cfg.model.balance_weight if self.model.uses_router else 0.0
            m = train_step(self.model, batch, self.opt, self.rng, self.provider, t.batch_size, lam,
                           self.cfg.model.eps_stab, self.step + 1)
            self.step += 1
            m["step"] = self.step
            history.append(m)
            if self.out_dir is not None:
                self._append_metrics(metrics_row(self.step, m, self.opt.lr))
                if self.step % t.checkpoint_every == 0:
                    self.save_checkpoint()
            if self.step % t.log_every == 0 or self.step == total:
                self.log(f"step {self.step:5d}  l1 {m['l1']:.5f}  balance {m['balance']:.4f}  "
                         f"usage {' '.join(str(int(u)) for u in m['usage'])}")
        if self.out_dir is not None and not self.checkpoint_path(self.step).exists():
            self.save_checkpoint()
        return history


def restore_state(ck: Checkpoint, model: M2Restore, provider, opt: Optional[Adam] = None,
                  rng: Optional[np.random.Generator] = None) -> None:
    model.load_state_dict({k: v for k, v in ck.params.items() if not k.startswith("prior.")})
    if isinstance(provider, LearnedProvider):
        provider.net.load_state_dict({k[6:]: v for k, v in ck.params.items() if k.startswith("prior.")})
        provider.trained = True
    if opt is not None:
        opt.m = {k: np.array(v) for k, v in ck.adam_m.items()}
        opt.v = {k: np.array(v) for k, v in ck.adam_v.items()}
        opt.t = ck.adam_t
    if rng is not None and ck.rng_state is not None:
        rng.bit_generator.state = ck.rng_state


def load_model(path) -> tuple[M2Restore, object, RunConfig, Checkpoint]:
    """Rebuild model and provider from a checkpoint file."""
    ck = ckpt_io.load(path)
    cfg = RunConfig.from_text(ck.config_text)
    model = build_variant(cfg.model)
    provider = make_provider(cfg)
    restore_state(ck, model, provider)
    return model, provider, cfg, ck


def parameters_equal(a: Module, b: Module) -> bool:
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k].data, pb[k].data) for k in pa)
