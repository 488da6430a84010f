"""EPNS for cellular dynamics: one-hot cell nodes, SpatialConv forward model and decoder, per-cell latents."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .. import nets
from ..cpm import Lattice
from . import StepTerms, draw_noise, gaussian_kl, reparameterize


@dataclass
class CellBatch:
    sites: torch.Tensor   # [B, H, W] ids, 0 = medium
    types: torch.Tensor   # [B, N] type per id, types[:, 0] == 0

    @classmethod
    def from_lattices(cls, lats) -> "CellBatch":
        lats = [lats] if isinstance(lats, Lattice) else list(lats)
        return cls(torch.as_tensor(np.stack([l.sites for l in lats])).long(),
                   torch.as_tensor(np.stack([l.cell_types for l in lats])).long())

    def lattices(self, frame_index: int = 0) -> list[Lattice]:
        return [Lattice(s.numpy(), t.numpy(), frame_index) for s, t in zip(self.sites, self.types)]

    def __len__(self) -> int:
        return self.sites.shape[0]

    def detach(self) -> "CellBatch":
        return self

    def repeat(self, k: int) -> "CellBatch":
        return CellBatch(self.sites.repeat_interleave(k, 0), self.types.repeat_interleave(k, 0))

    def relabeled(self, perm) -> "CellBatch":
        """Cell ``k`` becomes ``perm[k-1] + 1`` (medium fixed), as :meth:`Lattice.relabeled`."""
        mapping = torch.cat([torch.zeros(1, dtype=torch.long), torch.as_tensor(perm).long() + 1])
        types = torch.zeros_like(self.types)
        types[:, mapping] = self.types
        return CellBatch(mapping[self.sites], types)


def node_permutation(perm) -> torch.Tensor:
    """Index array ``idx`` with ``new_nodes = old_nodes[:, idx]`` for a cell relabeling ``perm``."""
    mapping = torch.cat([torch.zeros(1, dtype=torch.long), torch.as_tensor(perm).long() + 1])
    return torch.argsort(mapping)


class CellularData:
    """Training view over ``sites [traj, frames, H, W]`` and ``types [traj, N]``."""

    def __init__(self, sites: np.ndarray, types: np.ndarray):
        self.sites = np.asarray(sites)
        self.types = np.asarray(types, dtype=np.int64)

    @property
    def n_traj(self) -> int:
        return self.sites.shape[0]

    @property
    def n_frames(self) -> int:
        return self.sites.shape[1]

    def state(self, idx, t) -> CellBatch:
        idx = np.asarray(idx)
        return CellBatch(torch.as_tensor(self.sites[idx, np.asarray(t)].astype(np.int64)),
                         torch.as_tensor(self.types[idx]))


@dataclass
class Embedding:
    h: torch.Tensor       # [B, N, C, H, W]
    state: CellBatch


class CellularEPNS(nn.Module):
    def __init__(self, n_types: int = 2, embed: int = 32, message: int = 32, unet_widths=(64, 128, 256),
                 encoder_width: int = 32, latent: int = 64, message_kernel: int = 9, unet_kernel: int = 5,
                 encoder_kernel: int = 9, latent_channels: int | None = None, sigma_floor: float = 1e-4,
                 sample_mode: str = "argmax", stay_logit: float = 4.0, dtype=torch.float32):
        super().__init__()
        if sample_mode not in ("argmax", "categorical"):
            raise ValueError(f"unknown sample mode {sample_mode!r}")
        self.n_types, self.latent, self.sample_mode = n_types, latent, sample_mode
        c_in = n_types + 2
        self.embed = nn.Conv2d(c_in, embed, 1)
        self.forward_layer = nets.SpatialConvLayer(embed, embed, message, unet_widths, message_kernel, unet_kernel)
        self.prior_net = nets.CellLatentEncoder(embed, encoder_width, latent, encoder_kernel, sigma_floor)
        self.post_net = nets.CellLatentEncoder(embed + c_in, encoder_width, latent, encoder_kernel, sigma_floor)
        # z enters the decoder through a linear map to a few channels, broadcast over the grid
        latent_channels = latent_channels or latent
        self.z_proj = nn.Linear(latent, latent_channels)
        self.decoder_layer = nets.SpatialConvLayer(embed + latent_channels, embed, message, unet_widths, message_kernel,
                                                   unet_kernel)
        self.readout = nn.Conv2d(embed, 1, 1)
        # learnable bonus for the pixel's current owner; most pixels keep their cell between frames
        self.stay_logit = nn.Parameter(torch.tensor(float(stay_logit)))
        self.to(dtype)

    @property
    def dtype(self):
        return self.embed.weight.dtype

    def onehot(self, x: CellBatch) -> torch.Tensor:
        return nets.encode_onehot_cells(x.sites, x.types, self.n_types).to(self.dtype)

    def forward_embed(self, x: CellBatch) -> Embedding:
        oh = self.onehot(x)
        B, N = oh.shape[:2]
        h = self.embed(oh.flatten(0, 1)).unflatten(0, (B, N))
        return Embedding(self.forward_layer(h), x)

    def prior(self, emb: Embedding):
        return self.prior_net(emb.h)

    def posterior(self, emb: Embedding, x_next: CellBatch):
        if x_next.types.shape != emb.state.types.shape:
            raise ValueError("next state has a different cell table")
        return self.post_net(torch.cat([emb.h, self.onehot(x_next)], dim=2))

    def prior_sample(self, emb: Embedding, eps):
        return reparameterize(*self.prior(emb), eps)

    def posterior_sample(self, emb: Embedding, x_next: CellBatch, eps):
        return reparameterize(*self.posterior(emb, x_next), eps)

    def decode(self, emb: Embedding, z: torch.Tensor) -> torch.Tensor:
        """Per-pixel log-probabilities over nodes, ``[B, N, H, W]``."""
        B, N, _, H, W = emb.h.shape
        zp = self.z_proj(z)
        zs = zp[..., None, None].expand(B, N, zp.shape[-1], H, W)
        y = self.decoder_layer(torch.cat([emb.h, zs], dim=2))
        logits = self.readout(y.flatten(0, 1)).reshape(B, N, H, W)
        current = (emb.state.sites[:, None] == torch.arange(N, device=logits.device)[:, None, None]).to(logits.dtype)
        logits = logits + self.stay_logit * current
        return torch.log_softmax(logits, dim=1)

    def draw(self, x: CellBatch, log_pi: torch.Tensor, gumbel: torch.Tensor | None = None) -> CellBatch:
        if self.sample_mode == "categorical":
            if gumbel is None:
                raise ValueError("categorical sampling needs per-pixel Gumbel noise")
            log_pi = log_pi + gumbel
        return CellBatch(log_pi.argmax(dim=1), x.types)

    @staticmethod
    def log_likelihood(log_pi: torch.Tensor, x_next: CellBatch) -> torch.Tensor:
        return torch.gather(log_pi, 1, x_next.sites[:, None]).squeeze(1).sum((-1, -2))

    def noise_shapes(self, x: CellBatch) -> dict:
        N = x.types.shape[-1]
        shapes = {"z": (N, self.latent)}
        if self.sample_mode == "categorical":
            shapes["gumbel"] = (N, *x.sites.shape[-2:])
        return shapes

    def draw_noise(self, x: CellBatch, generator: torch.Generator | None = None) -> dict:
        return draw_noise(self.noise_shapes(x), len(x), generator, self.dtype)

    def one_step_sample(self, x: CellBatch, noise: dict) -> CellBatch:
        emb = self.forward_embed(x)
        lat = self.prior_sample(emb, noise["z"])
        return self.draw(x, self.decode(emb, lat.z), noise.get("gumbel"))

    def one_step_reconstruct(self, x: CellBatch, x_next: CellBatch, noise: dict) -> CellBatch:
        return self.step_terms(x, x_next, noise).x_hat

    def step_terms(self, x: CellBatch, x_next: CellBatch, noise: dict) -> StepTerms:
        emb = self.forward_embed(x)
        q = self.posterior_sample(emb, x_next, noise["z"])
        mu_p, sigma_p = self.prior(emb)
        log_pi = self.decode(emb, q.z)
        kl = gaussian_kl(q.mu, q.sigma, mu_p, sigma_p)
        with torch.no_grad():
            x_hat = self.draw(x, log_pi.detach(), noise.get("gumbel"))
        return StepTerms(self.log_likelihood(log_pi, x_next), kl, x_hat)

    def elbo_terms(self, x: CellBatch, x_next: CellBatch, noise: dict):
        t = self.step_terms(x, x_next, noise)
        return t.recon, t.kl.sum((-1, -2))

    @torch.no_grad()
    def rollout(self, x0: CellBatch, steps: int, generator: torch.Generator | None = None,
                noise_fn=None) -> np.ndarray:
        """Autoregressive sampling; returns ids ``[B, steps+1, H, W]``, -1 after a non-finite decode."""
        out = np.full((len(x0), steps + 1, *x0.sites.shape[-2:]), -1, dtype=np.int64)
        out[:, 0] = x0.sites.numpy()
        alive = torch.ones(len(x0), dtype=torch.bool)
        x = x0
        for k in range(1, steps + 1):
            noise = noise_fn(k, x) if noise_fn is not None else self.draw_noise(x, generator)
            emb = self.forward_embed(x)
            lat = self.prior_sample(emb, noise["z"])
            log_pi = self.decode(emb, lat.z)
            alive &= torch.isfinite(log_pi).flatten(1).all(-1)
            if not bool(alive.any()):
                break
            nxt = self.draw(x, log_pi, noise.get("gumbel"))
            out[alive.numpy(), k] = nxt.sites.numpy()[alive.numpy()]
            x = CellBatch(torch.where(alive[:, None, None], nxt.sites, x.sites), x.types)
        return out


def rollout_lattices(sites: np.ndarray, types: np.ndarray) -> list[list[Lattice]]:
    """Split a rollout array into per-member frame lists, dropping truncated frames."""
    out = []
    for b in range(sites.shape[0]):
        frames = []
        for k in range(sites.shape[1]):
            if sites[b, k, 0, 0] < 0:
                break
            frames.append(Lattice(sites[b, k], types[b], k))
        out.append(frames)
    return out
