"""Conditional-VAE simulators built on the equivariant backbones."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass
class LatentSample:
    z: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor
    eps: torch.Tensor


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, eps: torch.Tensor) -> LatentSample:
    if not bool((sigma > 0).all()):
        raise FloatingPointError("latent scale must be strictly positive")
    if eps.shape != mu.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match latent shape {tuple(mu.shape)}")
    return LatentSample(mu + sigma * eps, mu, sigma, eps)


def gaussian_kl(mu_q, sigma_q, mu_p, sigma_p) -> torch.Tensor:
    """Elementwise KL(N(mu_q, sigma_q²) || N(mu_p, sigma_p²))."""
    return (torch.log(sigma_p / sigma_q) + (sigma_q ** 2 + (mu_q - mu_p) ** 2) / (2 * sigma_p ** 2) - 0.5)


def gaussian_log_prob(x, mu, sigma) -> torch.Tensor:
    return -0.5 * ((x - mu) / sigma) ** 2 - torch.log(sigma) - 0.5 * math.log(2 * math.pi)


@dataclass
class StepTerms:
    """One posterior-guided step: per-sample reconstruction log-likelihood, per-dim KL and the sampled next state."""

    recon: torch.Tensor   # [B]
    kl: torch.Tensor      # [B, ..., Z]
    x_hat: object

    @property
    def elbo(self) -> torch.Tensor:
        return self.recon - self.kl.flatten(1).sum(-1)


def draw_noise(shapes: dict, batch: int | None, generator: torch.Generator | None, dtype) -> dict:
    """Standard normal draws per shape; the ``gumbel`` entry gets standard Gumbel draws instead."""
    lead = () if batch is None else (batch,)
    out = {}
    for name, shape in shapes.items():
        if name == "gumbel":
            u = torch.rand((*lead, *shape), generator=generator, dtype=dtype)
            out[name] = -torch.log(-torch.log(u.clamp_min(torch.finfo(dtype).tiny)))
        else:
            out[name] = torch.randn((*lead, *shape), generator=generator, dtype=dtype)
    return out
