"""Multi-step posterior-guided training.

Each epoch picks one uniform start per trajectory and unrolls ``rollout_len``
steps with latents from the posterior.  Every step's loss is backpropagated on
its own (the model input at step k is a detached sample), gradients
accumulate over the unroll, and the optimizer steps once per minibatch.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import fileio
from .models import draw_noise

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 400
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    rollout_len: int = 16
    beta_increment: float = 0.005
    beta_period: int = 10
    free_bits: float = 0.0
    grad_clip: float = 10.0
    seed: int = 0
    val_pairs: int = 64
    val_every: int = 1
    max_skip_fraction: float = 0.1

    def __post_init__(self):
        if self.rollout_len < 1:
            raise ValueError("rollout_len must be >= 1")
        if self.beta_period < 1 or self.beta_increment < 0:
            raise ValueError("bad KL annealing schedule")

    @classmethod
    def celestial(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def cellular(cls, **kw) -> "TrainConfig":
        base = dict(epochs=60, adam_beta2=0.9, adam_eps=1e-6, batch_size=8, rollout_len=14, beta_increment=0.04,
                    beta_period=1, free_bits=0.1175, val_pairs=16)
        base.update(kw)
        return cls(**base)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0

    def as_tree(self) -> dict:
        return {"step": self.step, "skipped": self.skipped,
                "m": {k: t.detach().numpy() for k, t in self.m.items()},
                "v": {k: t.detach().numpy() for k, t in self.v.items()}}

    @classmethod
    def from_tree(cls, tree: dict) -> "OptimizerState":
        return cls(int(tree["step"]), {k: torch.as_tensor(a) for k, a in tree.get("m", {}).items()},
                   {k: torch.as_tensor(a) for k, a in tree.get("v", {}).items()}, int(tree.get("skipped", 0)))


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> bool:
    """Bias-corrected Adam with decoupled weight decay, in place.

    Returns False (and leaves everything untouched) when any gradient is not finite.
    """
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            state.skipped += 1
            log.warning("non-finite gradient in %s; update skipped", name)
            return False
    b1, b2 = betas
    state.step += 1
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps) + lr * weight_decay * p)
    return True


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for a module's named parameters."""

    def __init__(self, module: nn.Module, cfg: TrainConfig, state: OptimizerState | None = None):
        self.params = dict(module.named_parameters())
        self.cfg = cfg
        self.state = state or OptimizerState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        c = self.cfg
        grads = {k: p.grad for k, p in self.params.items()}
        return adam_step(self.params, grads, self.state, c.learning_rate, (c.adam_beta1, c.adam_beta2), c.adam_eps,
                         c.weight_decay)


# ---------------------------------------------------------------- objective


def kl_anneal(epoch: int, cfg: TrainConfig) -> float:
    return min(1.0, cfg.beta_increment * (epoch // cfg.beta_period))


def free_bits_objective(recon: torch.Tensor, kl: torch.Tensor, beta: float, free_bits: float) -> torch.Tensor:
    """-mean(recon) + beta * sum_j max(lambda, KL_j).

    ``kl`` is ``[B, ..., Z]``: KL per latent dim, optionally per cell.  Cells are
    summed and the batch averaged before the clamp.
    """
    kl_j = kl.reshape(kl.shape[0], -1, kl.shape[-1]).sum(1).mean(0)
    return -recon.mean() + beta * torch.clamp_min(kl_j, free_bits).sum()


def _stream_seed(*parts: int) -> int:
    h = hashlib.sha256(",".join(str(int(p)) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def element_noise(model, x, ids, epoch: int, seed: int, steps: int) -> list[dict]:
    """Noise for ``steps`` steps, one independent stream per (seed, epoch, trajectory id).

    The draws for an element do not depend on which batch it lands in, so any
    batching or worker split reproduces the same numbers.
    """
    shapes = model.noise_shapes(x)
    per_elem = []
    for tid in ids:
        g = torch.Generator().manual_seed(_stream_seed(seed, epoch, tid))
        per_elem.append([draw_noise(shapes, None, g, model.dtype) for _ in range(steps)])
    return [{k: torch.stack([e[s][k] for e in per_elem]) for k in shapes} for s in range(steps)]


def epoch_plan(data, cfg: TrainConfig, epoch: int):
    """Uniform start per trajectory and a shuffled trajectory order, from the (seed, epoch) stream."""
    if data.n_frames < cfg.rollout_len + 1:
        raise ValueError(f"trajectories of {data.n_frames} frames are too short for rollout_len {cfg.rollout_len}")
    rng = np.random.default_rng([cfg.seed, epoch])
    starts = rng.integers(0, data.n_frames - cfg.rollout_len, size=data.n_traj)
    order = rng.permutation(data.n_traj)
    return starts, order


def unrolled_loss(model, data, ids, starts, noises, beta: float, free_bits: float, backward: bool = True,
                  frozen_inputs: list | None = None):
    """Run the K-step unroll on one minibatch.

    Returns ``(total_loss, recon_sum, kl_sum, inputs)``, where ``inputs`` are
    the per-step model inputs.  With ``frozen_inputs`` the sampled inputs are
    replaced by the given ones (used for finite-difference checks).
    """
    x_hat = data.state(ids, starts)
    total, recon_sum, kl_sum, inputs = 0.0, 0.0, 0.0, []
    for k, noise in enumerate(noises, start=1):
        if frozen_inputs is not None:
            x_hat = frozen_inputs[k - 1]
        inputs.append(x_hat)
        x_next = data.state(ids, starts + k)
        terms = model.step_terms(x_hat, x_next, noise)
        loss = free_bits_objective(terms.recon, terms.kl, beta, free_bits)
        if not bool(torch.isfinite(loss)):
            raise FloatingPointError(f"non-finite loss at unroll step {k}")
        if backward:
            loss.backward()
        total = total + (loss.detach() if backward else loss)
        recon_sum += float(terms.recon.detach().mean())
        kl_sum += float(terms.kl.detach().reshape(terms.kl.shape[0], -1).sum(-1).mean())
        x_hat = terms.x_hat
    return total, recon_sum, kl_sum, inputs


@dataclass
class EpochMetrics:
    epoch: int
    recon: float
    kl: float
    beta: float
    val_elbo: float
    skipped_batches: int
    batches: int


def multi_step_train_epoch(model, data, opt: Adam, cfg: TrainConfig, epoch: int) -> EpochMetrics:
    beta = kl_anneal(epoch, cfg)
    starts, order = epoch_plan(data, cfg, epoch)
    recon = kl = 0.0
    done = skipped = batches = 0
    model.train()
    for b0 in range(0, data.n_traj, cfg.batch_size):
        ids = order[b0:b0 + cfg.batch_size]
        batches += 1
        first = data.state(ids, starts[ids])
        noises = element_noise(model, first, ids, epoch, cfg.seed, cfg.rollout_len)
        opt.zero_grad()
        try:
            _, r, k, _ = unrolled_loss(model, data, ids, starts[ids], noises, beta, cfg.free_bits)
        except FloatingPointError as err:
            skipped += 1
            log.warning("epoch %d batch %d skipped: %s", epoch, batches - 1, err)
            continue
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(list(opt.params.values()), cfg.grad_clip)
        if not opt.step():
            skipped += 1
            continue
        recon += r / cfg.rollout_len
        kl += k / cfg.rollout_len
        done += 1
    if skipped > cfg.max_skip_fraction * batches:
        raise TrainingAborted(f"epoch {epoch}: {skipped}/{batches} batches skipped (non-finite loss or gradient)")
    return EpochMetrics(epoch, recon / max(done, 1), kl / max(done, 1), beta, math.nan, skipped, batches)


# ---------------------------------------------------------------- validation


def validation_pairs(data, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 7919])
    traj = rng.integers(0, data.n_traj, size=count)
    t = rng.integers(0, data.n_frames - 1, size=count)
    return traj, t


@torch.no_grad()
def mean_elbo(model, data, traj: np.ndarray, t: np.ndarray, batch_size: int, seed: int = 0) -> float:
    """One-step ELBO (single posterior sample, beta = 1, no free bits) averaged over the given pairs."""
    model.eval()
    vals = []
    for b0 in range(0, len(traj), batch_size):
        ids, ts = traj[b0:b0 + batch_size], t[b0:b0 + batch_size]
        x, y = data.state(ids, ts), data.state(ids, ts + 1)
        g = torch.Generator().manual_seed(_stream_seed(seed, b0))
        recon, kl = model.elbo_terms(x, y, model.draw_noise(x, g))
        vals.append((recon - kl).double())
    return float(torch.cat(vals).mean())


# ---------------------------------------------------------------- loop

CSV_FIELDS = ["epoch", "recon", "kl", "beta", "val_elbo", "skipped_batches"]


@dataclass
class TrainResult:
    history: list
    best_val: float
    best_epoch: int
    out_dir: Path | None


def _params_tree(model: nn.Module) -> dict:
    return {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}


def load_params(model: nn.Module, params: dict) -> None:
    model.load_state_dict({k: torch.as_tensor(v) for k, v in params.items()})


def train(model: nn.Module, train_data, val_data, cfg: TrainConfig, out_dir=None, resume: bool = False,
          meta: dict | None = None, progress=None) -> TrainResult:
    """Full loop: per-epoch metrics CSV, validation ELBO, best and last checkpoints, resumable."""
    out = Path(out_dir) if out_dir is not None else None
    opt = Adam(model, cfg)
    history, start_epoch = [], 0
    best_val, best_epoch = -math.inf, -1
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        last = out / "last.ckpt"
        if resume and last.exists():
            params, opt_tree, info = fileio.load_checkpoint(last)
            load_params(model, params)
            opt = Adam(model, cfg, OptimizerState.from_tree(opt_tree))
            start_epoch = int(info["epoch"]) + 1
            best_val, best_epoch = float(info["best_val"]), int(info["best_epoch"])
            history = _read_metrics(out / "metrics.csv")[:start_epoch]
    vt, vs = validation_pairs(val_data, cfg.val_pairs, cfg.seed)
    for epoch in range(start_epoch, cfg.epochs):
        m = multi_step_train_epoch(model, train_data, opt, cfg, epoch)
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs - 1:
            m.val_elbo = mean_elbo(model, val_data, vt, vs, cfg.batch_size, cfg.seed)
        row = {k: getattr(m, k) for k in CSV_FIELDS}
        history.append(row)
        improved = math.isfinite(m.val_elbo) and m.val_elbo > best_val
        if improved:
            best_val, best_epoch = m.val_elbo, epoch
        if out is not None:
            _write_metrics(out / "metrics.csv", history)
            info = {"epoch": epoch, "best_val": best_val, "best_epoch": best_epoch, "config": asdict(cfg),
                    **(meta or {})}
            if improved:
                fileio.save_checkpoint(out / "best.ckpt", _params_tree(model), meta=info)
            fileio.save_checkpoint(out / "last.ckpt", _params_tree(model), opt.state.as_tree(), info)
        if progress is not None:
            progress(row)
    return TrainResult(history, best_val, best_epoch, out)


def _write_metrics(path: Path, rows: list) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(float(r[k])) if k not in ("epoch", "skipped_batches") else int(r[k]) for k in CSV_FIELDS})
    fileio.atomic_write_bytes(path, buf.getvalue().encode())


def _read_metrics(path: Path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("epoch", "skipped_batches") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]
