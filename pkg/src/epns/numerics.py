"""Dense float64 tensor operations with reverse-mode differentiation.

The tape is torch's autograd graph: every op below records itself when an
input requires grad, and :func:`backward` replays it in reverse.  What this
module adds on top is the shape checking the models rely on, the pooling
conventions for non-divisible grids, the parameter initializer, and a central
finite-difference checker used to verify every backward rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64

Tensor = torch.Tensor


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def tensor(data, requires_grad: bool = False, dtype: torch.dtype = DTYPE) -> Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=dtype).clone()
    return t.requires_grad_(requires_grad)


def _broadcast_dims(a: Sequence[int], b: Sequence[int]) -> None:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"cannot broadcast shapes {tuple(a)} and {tuple(b)}")


_UNARY = {
    "relu": torch.relu,
    "softplus": F.softplus,  # log1p(exp(-|x|)) + max(x, 0) internally
    "exp": torch.exp,
    "log": torch.log,
    "neg": torch.neg,
}
_BINARY = {"add": torch.add, "mul": torch.mul}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        _broadcast_dims(a.shape, b.shape)
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


def relu(x: Tensor) -> Tensor:
    return elementwise("relu", x)


def softplus(x: Tensor) -> Tensor:
    return elementwise("softplus", x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise DimensionError(f"expected c×h×w or b×c×h×w input, got {tuple(x.shape)}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-d cross-correlation of a (batched) c_in×h×w grid with a c_out×c_in×kh×kw kernel."""
    xb, squeeze = _as_batched(x)
    if kernel.dim() != 4 or kernel.shape[1] != xb.shape[1]:
        raise DimensionError(f"kernel {tuple(kernel.shape)} does not match input {tuple(x.shape)}")
    kh, kw = kernel.shape[-2:]
    if kh > xb.shape[-2] + 2 * padding or kw > xb.shape[-1] + 2 * padding:
        raise DimensionError(f"kernel {kh}×{kw} larger than padded input {tuple(x.shape)} (padding {padding})")
    out = F.conv2d(xb, kernel, bias=bias, stride=stride, padding=padding)
    return out.squeeze(0) if squeeze else out


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int = 2, bias: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel layout (c_out×c_in×k×k).

    With k == stride this upsamples h×w to (stride·h)×(stride·w).
    """
    xb, squeeze = _as_batched(x)
    if kernel.dim() != 4 or kernel.shape[0] != xb.shape[1]:
        raise DimensionError(f"kernel {tuple(kernel.shape)} does not match input {tuple(x.shape)}")
    out = F.conv_transpose2d(xb, kernel, bias=bias, stride=stride)
    return out.squeeze(0) if squeeze else out


def pool2d(x: Tensor, kind: str = "max", window: int = 2) -> Tensor:
    """Non-overlapping window pooling over the last two axes.

    Grids whose sides are not multiples of ``window`` are padded at the far
    edge: with -inf for max pooling, and excluded from the average for mean
    pooling, so partial windows pool only real cells.
    """
    if x.dim() < 2:
        raise DimensionError(f"pool2d needs at least 2 dims, got {tuple(x.shape)}")
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    ph, pw = (-h) % window, (-w) % window
    xb = x.reshape(-1, 1, h, w)
    if kind == "max":
        if ph or pw:
            xb = F.pad(xb, (0, pw, 0, ph), value=-math.inf)
        out = F.max_pool2d(xb, window)
    elif kind == "mean":
        ones = torch.ones(1, 1, h, w, dtype=x.dtype)
        if ph or pw:
            xb = F.pad(xb, (0, pw, 0, ph))
            ones = F.pad(ones, (0, pw, 0, ph))
        area = window * window
        out = F.avg_pool2d(xb, window) * area / (F.avg_pool2d(ones, window) * area)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return out.reshape(*lead, out.shape[-2], out.shape[-1])


def global_mean_pool(x: Tensor) -> Tensor:
    """Average over the two trailing spatial axes: [..., c, h, w] -> [..., c]."""
    return x.mean(dim=(-2, -1))


def softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    loss.backward()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def init_uniform_(module: torch.nn.Module) -> torch.nn.Module:
    """Weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero, for every linear/conv layer."""
    for m in module.modules():
        if isinstance(m, torch.nn.Linear):
            fan_in = m.in_features
        elif isinstance(m, torch.nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
        elif isinstance(m, torch.nn.ConvTranspose2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
        else:
            continue
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            m.weight.uniform_(-bound, bound)
            if m.bias is not None:
                m.bias.zero_()
    return module


@dataclass
class GradCheckReport:
    """Per-parameter comparison of analytic and central-difference gradients.

    ``max_rel_err[name]`` is max|analytic - numeric| over the checked entries,
    divided by the larger of the two gradients' max magnitudes on those entries.
    """

    step: float
    tolerance: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    max_abs_err: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    kinks: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_err.values()) and all(self.checked.values())

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_rel_err.items():
            flag = "ok" if err < self.tolerance else "FAIL"
            flag = flag if self.checked[name] else "NONE"
            out.append(f"{name:<48s} n={self.checked[name]:<5d} kinks={self.kinks.get(name, 0):<3d} rel={err:.3e} "
                       f"abs={self.max_abs_err[name]:.3e} {flag}")
        return out


def finite_difference_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-12,
    kink_factor: float | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of ``f()`` with central differences.

    ``f`` must be deterministic (fix every random draw inside it).  With
    ``max_entries`` set, each parameter is probed at that many random entries
    instead of exhaustively.

    With ``kink_factor`` set, an entry whose forward and backward difference
    quotients disagree by more than ``kink_factor * tolerance`` (relative to
    the block's largest analytic gradient) straddles a ReLU or max kink, where the function is
    not differentiable; it is counted in ``kinks`` and another entry is probed.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    plist = list(params.values())
    zero_grads(plist)
    loss = f()
    backward(loss)
    base = float(loss.detach())
    analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}
    zero_grads(plist)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(step=step, tolerance=tolerance)
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            ana_all = analytic[name].view(-1).numpy()
            block_scale = max(np.abs(ana_all).max(initial=0.0), floor)
            # difference quotients cannot resolve slopes below the loss's rounding noise
            roundoff = 16 * np.finfo(np.float64).eps * max(abs(base), 1.0) / step
            order = np.arange(flat.numel())
            want = flat.numel() if max_entries is None else min(max_entries, flat.numel())
            if want < flat.numel():
                order = rng.permutation(flat.numel())
            idx, num, kinks = [], [], 0
            for i in order:
                if len(idx) == want:
                    break
                orig = flat[i].item()
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                if kink_factor is not None:
                    gap = abs((fp - base) - (base - fm)) / step
                    if gap > kink_factor * tolerance * block_scale + roundoff:
                        kinks += 1
                        continue
                idx.append(i)
                num.append((fp - fm) / (2 * step))
            idx, num = np.asarray(idx, dtype=np.int64), np.asarray(num)
            ana = ana_all[idx]
            diff = np.abs(ana - num)
            scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), floor)
            report.max_abs_err[name] = float(diff.max(initial=0.0))
            report.max_rel_err[name] = float(diff.max(initial=0.0) / scale)
            report.checked[name] = len(idx)
            report.kinks[name] = kinks
    return report
