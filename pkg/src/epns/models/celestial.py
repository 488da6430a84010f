"""EPNS for celestial dynamics: frame-averaged GNN forward model and decoder, invariant global latent."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .. import nets
from ..numerics import softplus
from . import StepTerms, draw_noise, gaussian_kl, gaussian_log_prob, reparameterize


@dataclass
class BodyBatch:
    masses: torch.Tensor      # [B, n]
    positions: torch.Tensor   # [B, n, 3]
    velocities: torch.Tensor  # [B, n, 3]

    @classmethod
    def from_array(cls, a, dtype=torch.float64) -> "BodyBatch":
        a = torch.as_tensor(np.asarray(a), dtype=dtype)
        if a.dim() == 2:
            a = a[None]
        return cls(a[..., 0], a[..., 1:4], a[..., 4:7])

    def to_array(self) -> np.ndarray:
        return torch.cat([self.masses[..., None], self.positions, self.velocities], -1).detach().cpu().numpy()

    def __len__(self) -> int:
        return self.masses.shape[0]

    def detach(self) -> "BodyBatch":
        return BodyBatch(self.masses.detach(), self.positions.detach(), self.velocities.detach())

    def repeat(self, k: int) -> "BodyBatch":
        return BodyBatch(self.masses.repeat_interleave(k, 0), self.positions.repeat_interleave(k, 0),
                         self.velocities.repeat_interleave(k, 0))

    def select(self, mask) -> "BodyBatch":
        return BodyBatch(self.masses[mask], self.positions[mask], self.velocities[mask])

    def transformed(self, rotation, translation=None, perm=None) -> "BodyBatch":
        R = torch.as_tensor(rotation, dtype=self.positions.dtype)
        p, v, m = self.positions @ R.T, self.velocities @ R.T, self.masses
        if translation is not None:
            p = p + torch.as_tensor(translation, dtype=p.dtype)
        if perm is not None:
            p, v, m = p[:, perm], v[:, perm], m[:, perm]
        return BodyBatch(m, p, v)


class CelestialData:
    """Training view over an array of trajectories ``[traj, frames, n, 7]``."""

    def __init__(self, array: np.ndarray, dtype=torch.float64):
        self.array = np.asarray(array, dtype=np.float64)
        self.dtype = dtype

    @property
    def n_traj(self) -> int:
        return self.array.shape[0]

    @property
    def n_frames(self) -> int:
        return self.array.shape[1]

    def state(self, idx, t) -> BodyBatch:
        return BodyBatch.from_array(self.array[np.asarray(idx), np.asarray(t)], self.dtype)


@dataclass
class Embedding:
    h: torch.Tensor           # [B, n, H] invariant node embeddings
    state: BodyBatch          # coordinates passed through unchanged
    edges: torch.Tensor       # [B, n, n, 2]
    frames: nets.FrameSet | None


@dataclass
class Decoded:
    mu_p: torch.Tensor
    sigma_p: torch.Tensor     # [B, n, 1], isotropic
    mu_v: torch.Tensor
    sigma_v: torch.Tensor


class CelestialEPNS(nn.Module):
    """``equivariant=False`` swaps every frame-averaged network for plain message passing on raw coordinates."""

    def __init__(self, hidden: int = 128, latent: int = 16, forward_layers: int = 5, prior_layers: int = 5,
                 decoder_layers: int = 3, equivariant: bool = True, sigma_floor: float = 1e-4,
                 init_sigma: float = 0.1, dtype=torch.float64):
        super().__init__()
        self.hidden, self.latent, self.equivariant, self.sigma_floor = hidden, latent, equivariant, sigma_floor
        self.mass_embed = nn.Linear(1, hidden)
        if equivariant:
            self.forward_net = nets.FAGNN(hidden, 2, hidden, forward_layers)
            self.decoder_net = nets.FAGNN(hidden + latent, 2, hidden, decoder_layers, n_vectors=2)
        else:
            self.forward_net = nets.MPGNN(hidden + 6, 2, hidden, forward_layers)
            self.decoder_net = nets.MPGNN(hidden + latent + 6, 2, hidden, decoder_layers)
            self.vec_head = nn.Linear(hidden, 6)
        self.prior_net = nets.MPGNN(hidden, 2, hidden, prior_layers)
        self.prior_mu, self.prior_sigma = nn.Linear(hidden, latent), nn.Linear(hidden, latent)
        # posterior nodes also see |p'-p| and |v'-v|; edges add the next-frame edge scalars
        self.post_net = nets.MPGNN(hidden + 2, 4, hidden, prior_layers)
        self.post_mu, self.post_sigma = nn.Linear(hidden, latent), nn.Linear(hidden, latent)
        self.sigma_p_head, self.sigma_v_head = nn.Linear(hidden, 1), nn.Linear(hidden, 1)
        self.dv_head = nets.MLP(hidden, hidden, 1)
        self._init_heads(init_sigma)
        self.to(dtype)

    @torch.no_grad()
    def _init_heads(self, sigma: float) -> None:
        """Start at identity drift (mu_v = v, mu_p = p) with small output scales."""
        vec = self.decoder_net.vec_head if self.equivariant else self.vec_head
        for lin in (vec, self.dv_head[-1]):
            lin.weight.zero_()
            lin.bias.zero_()
        for lin in (self.sigma_p_head, self.sigma_v_head):
            lin.weight.mul_(0.1)
            lin.bias.fill_(math.log(math.expm1(sigma)))

    @property
    def dtype(self):
        return self.mass_embed.weight.dtype

    # ---------------------------------------------------------------- pieces

    def forward_embed(self, x: BodyBatch) -> Embedding:
        e = nets.edge_scalars(x.positions, x.velocities)
        s = self.mass_embed(x.masses[..., None])
        if self.equivariant:
            frames = nets.compute_frames(x.positions)
            h, _ = self.forward_net(s, x.positions, x.velocities, e, frames)
        else:
            frames = None
            h = self.forward_net(torch.cat([s, x.positions, x.velocities], -1), e)
        return Embedding(h, x, e, frames)

    def _gaussian(self, feats, mu_head, sigma_head):
        pooled = feats.mean(dim=-2)
        return mu_head(pooled), softplus(sigma_head(pooled)) + self.sigma_floor

    def prior(self, emb: Embedding):
        return self._gaussian(self.prior_net(emb.h, emb.edges), self.prior_mu, self.prior_sigma)

    def posterior(self, emb: Embedding, x_next: BodyBatch):
        e_next = nets.edge_scalars(x_next.positions, x_next.velocities)
        dp = nets._safe_norm(x_next.positions - emb.state.positions)
        dv = nets._safe_norm(x_next.velocities - emb.state.velocities)
        feats = self.post_net(torch.cat([emb.h, dp[..., None], dv[..., None]], -1), torch.cat([emb.edges, e_next], -1))
        return self._gaussian(feats, self.post_mu, self.post_sigma)

    def prior_sample(self, emb: Embedding, eps):
        return reparameterize(*self.prior(emb), eps)

    def posterior_sample(self, emb: Embedding, x_next: BodyBatch, eps):
        return reparameterize(*self.posterior(emb, x_next), eps)

    def decode(self, emb: Embedding, z: torch.Tensor) -> Decoded:
        x = emb.state
        zs = z[..., None, :].expand(*emb.h.shape[:-1], z.shape[-1])
        if self.equivariant:
            inv, vecs = self.decoder_net(torch.cat([emb.h, zs], -1), x.positions, x.velocities, emb.edges, emb.frames)
            d_v, d_p = vecs[..., 0, :], vecs[..., 1, :]
        else:
            inv = self.decoder_net(torch.cat([emb.h, zs, x.positions, x.velocities], -1), emb.edges)
            d_v, d_p = self.vec_head(inv).split(3, dim=-1)
        mu_v = x.velocities + d_v
        mu_p = x.positions + self.dv_head(inv) * mu_v + d_p
        sigma_p = softplus(self.sigma_p_head(inv)) + self.sigma_floor
        sigma_v = softplus(self.sigma_v_head(inv)) + self.sigma_floor
        return Decoded(mu_p, sigma_p, mu_v, sigma_v)

    @staticmethod
    def draw(x: BodyBatch, dec: Decoded, eps_x: torch.Tensor) -> BodyBatch:
        return BodyBatch(x.masses, dec.mu_p + dec.sigma_p * eps_x[..., :3], dec.mu_v + dec.sigma_v * eps_x[..., 3:])

    @staticmethod
    def log_likelihood(dec: Decoded, x_next: BodyBatch) -> torch.Tensor:
        lp = gaussian_log_prob(x_next.positions, dec.mu_p, dec.sigma_p).sum((-1, -2))
        lv = gaussian_log_prob(x_next.velocities, dec.mu_v, dec.sigma_v).sum((-1, -2))
        return lp + lv

    # ---------------------------------------------------------------- noise

    def noise_shapes(self, x: BodyBatch) -> dict:
        """Per-sample noise shapes for one step."""
        return {"z": (self.latent,), "x": (x.positions.shape[-2], 6)}

    def draw_noise(self, x: BodyBatch, generator: torch.Generator | None = None) -> dict:
        return draw_noise(self.noise_shapes(x), len(x), generator, self.dtype)

    # ---------------------------------------------------------------- steps

    def one_step_sample(self, x: BodyBatch, noise: dict) -> BodyBatch:
        emb = self.forward_embed(x)
        lat = self.prior_sample(emb, noise["z"])
        return self.draw(x, self.decode(emb, lat.z), noise["x"])

    def one_step_reconstruct(self, x: BodyBatch, x_next: BodyBatch, noise: dict) -> BodyBatch:
        return self.step_terms(x, x_next, noise).x_hat

    def step_terms(self, x: BodyBatch, x_next: BodyBatch, noise: dict) -> StepTerms:
        """Posterior-guided step used by training and the ELBO."""
        emb = self.forward_embed(x)
        q = self.posterior_sample(emb, x_next, noise["z"])
        mu_p, sigma_p = self.prior(emb)
        dec = self.decode(emb, q.z)
        kl = gaussian_kl(q.mu, q.sigma, mu_p, sigma_p)
        return StepTerms(self.log_likelihood(dec, x_next), kl, self.draw(x, dec, noise["x"]).detach())

    def elbo_terms(self, x: BodyBatch, x_next: BodyBatch, noise: dict):
        t = self.step_terms(x, x_next, noise)
        return t.recon, t.kl.sum(-1)

    @torch.no_grad()
    def rollout(self, x0: BodyBatch, steps: int, generator: torch.Generator | None = None,
                noise_fn=None, blowup: float = 1e6) -> np.ndarray:
        """Autoregressive sampling; returns ``[B, steps+1, n, 7]``.

        A member whose state turns non-finite (or leaves ``|x| < blowup``) is
        truncated: its remaining frames are NaN.  ``noise_fn(step, x)`` may
        supply the noise dict instead of drawing from ``generator``.
        """
        out = np.full((len(x0), steps + 1, x0.masses.shape[-1], 7), np.nan)
        out[:, 0] = x0.to_array()
        alive = torch.ones(len(x0), dtype=torch.bool)
        x = x0
        for k in range(1, steps + 1):
            noise = noise_fn(k, x) if noise_fn is not None else self.draw_noise(x, generator)
            nxt = self.one_step_sample(x, noise)
            stacked = torch.cat([nxt.positions, nxt.velocities], -1).flatten(1)
            ok = torch.isfinite(stacked).all(-1) & (stacked.abs() < blowup).all(-1)
            alive &= ok
            if not bool(alive.any()):
                break
            arr = nxt.to_array()
            out[alive.numpy(), k] = arr[alive.numpy()]
            # dead members keep their last finite state as a placeholder input
            keep = alive[:, None, None]
            x = BodyBatch(x.masses, torch.where(keep, nxt.positions, x.positions),
                          torch.where(keep, nxt.velocities, x.velocities))
        return out
