"""Equivariant backbones.

* :class:`MPGNN` – fully connected message passing, permutation-equivariant.
* :class:`FAGNN` – frame averaging around :class:`MPGNN`: E(3)-invariant node
  embeddings plus E(3)-equivariant vector outputs.
* :class:`SpatialConvLayer` – message passing between per-cell grid nodes with
  convolutional message and update functions and a shared mean aggregate.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import numerics as nx

SIGNS = torch.tensor(list(itertools.product((1.0, -1.0), repeat=3)), dtype=torch.float64)  # [8, 3]


def edge_scalars(positions: torch.Tensor, velocities: torch.Tensor) -> torch.Tensor:
    """[..., n, n, 2]: pairwise distance and velocity-difference magnitude."""
    dp = positions[..., :, None, :] - positions[..., None, :, :]
    dv = velocities[..., :, None, :] - velocities[..., None, :, :]
    # sqrt has an infinite slope at 0 (the diagonal); keep it finite
    return torch.stack([_safe_norm(dp), _safe_norm(dv)], dim=-1)


def _safe_norm(d: torch.Tensor) -> torch.Tensor:
    sq = (d * d).sum(-1)
    zero = sq == 0
    return torch.where(zero, torch.zeros_like(sq), torch.sqrt(torch.where(zero, torch.ones_like(sq), sq)))


@dataclass
class FrameSet:
    centroid: torch.Tensor  # [..., 3]
    bases: torch.Tensor     # [..., 8, 3, 3]; columns are the frame axes


def _canonical_eigvecs(cov: torch.Tensor):
    evals, evecs = torch.linalg.eigh(cov)
    evals, evecs = evals.flip(-1), evecs.flip(-1)  # descending
    idx = evecs.abs().argmax(dim=-2, keepdim=True)
    sign = torch.sign(torch.gather(evecs, -2, idx))
    return evals, evecs * sign


def compute_frames(positions: torch.Tensor, gap: float = 1e-9) -> FrameSet:
    """PCA frames of a point cloud: centroid plus the 8 sign choices of the covariance eigenbasis.

    Inputs whose covariance has (near-)repeated eigenvalues get a tiny jitter
    seeded from their bytes before the decomposition, so the result stays a
    pure function of the input.
    """
    pos = positions.detach()
    if pos.shape[-2] < 2:
        raise ValueError("frames need at least two points")
    if not torch.isfinite(pos).all():
        raise ValueError("non-finite positions")
    centroid = pos.mean(dim=-2)
    centered = pos - centroid[..., None, :]
    cov = centered.transpose(-1, -2) @ centered / pos.shape[-2]
    evals, evecs = _canonical_eigvecs(cov)
    degenerate = ((evals[..., :-1] - evals[..., 1:]).abs() < gap).any(dim=-1)
    if degenerate.any():
        flat_pos = centered.reshape(-1, *centered.shape[-2:])
        flat_deg = degenerate.reshape(-1)
        flat_vecs = evecs.reshape(-1, 3, 3).clone()
        for k in torch.nonzero(flat_deg).flatten().tolist():
            p = flat_pos[k].numpy()
            seed = int.from_bytes(hashlib.sha256(p.tobytes()).digest()[:8], "little")
            jitter = np.random.default_rng(seed).standard_normal(p.shape) * 1e-7
            q = torch.as_tensor(p + jitter, dtype=pos.dtype)
            q = q - q.mean(0)
            _, v = _canonical_eigvecs(q.T @ q / q.shape[0])
            flat_vecs[k] = v
        evecs = flat_vecs.reshape(evecs.shape)
    bases = evecs[..., None, :, :] * SIGNS.to(pos.dtype)[:, None, :]
    return FrameSet(centroid, bases)


class MLP(nn.Sequential):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class MPLayer(nn.Module):
    """m_ij = MLP(h_i, h_j, e_ij); h_i <- h_i + MLP(h_i, mean_j m_ij), all j including i."""

    def __init__(self, hidden: int, edge_dim: int):
        super().__init__()
        self.msg_i = nn.Linear(hidden, hidden)
        self.msg_j = nn.Linear(hidden, hidden, bias=False)
        self.msg_e = nn.Linear(edge_dim, hidden, bias=False)
        self.msg_out = nn.Linear(hidden, hidden)
        self.upd_h = nn.Linear(hidden, hidden)
        self.upd_m = nn.Linear(hidden, hidden, bias=False)
        self.upd_out = nn.Linear(hidden, hidden)

    def forward(self, h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        pre = self.msg_i(h)[..., :, None, :] + self.msg_j(h)[..., None, :, :] + self.msg_e(e)
        # the output projection is linear, so it commutes with the mean over j
        agg = self.msg_out(torch.relu(pre).mean(dim=-2))
        return h + self.upd_out(torch.relu(self.upd_h(h) + self.upd_m(agg)))


class MPGNN(nn.Module):
    def __init__(self, node_in: int, edge_in: int, hidden: int, layers: int):
        super().__init__()
        self.proj = nn.Linear(node_in, hidden)
        self.layers = nn.ModuleList(MPLayer(hidden, edge_in) for _ in range(layers))

    def forward(self, x: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        h = self.proj(x)
        for layer in self.layers:
            h = layer(h, e)
        return h


class FAGNN(nn.Module):
    """Frame-averaged message passing over a geometric graph.

    ``forward`` returns the frame-averaged invariant node embeddings and
    ``n_vectors`` equivariant vectors per node.  Vectors flagged in
    ``point_outputs`` are points (the centroid is added back); the rest are
    displacements.
    """

    def __init__(self, scalar_in: int, edge_in: int, hidden: int, layers: int, n_vectors: int = 0,
                 point_outputs: tuple[bool, ...] | None = None):
        super().__init__()
        self.gnn = MPGNN(scalar_in + 6, edge_in, hidden, layers)
        self.n_vectors = n_vectors
        self.vec_head = nn.Linear(hidden, 3 * n_vectors) if n_vectors else None
        self.point_outputs = tuple(point_outputs or (False,) * n_vectors)

    def forward(self, scalars, positions, velocities, edges, frames: FrameSet | None = None):
        frames = frames or compute_frames(positions)
        B = frames.bases.to(positions.dtype)                        # [..., 8, 3, 3]
        t = frames.centroid.to(positions.dtype)[..., None, None, :]  # [..., 1, 1, 3]
        p_loc = (positions[..., None, :, :] - t) @ B                 # [..., 8, n, 3]
        v_loc = velocities[..., None, :, :] @ B
        s = scalars[..., None, :, :].expand(*p_loc.shape[:-1], scalars.shape[-1])
        e = edges[..., None, :, :, :].expand(*p_loc.shape[:-2], *edges.shape[-3:])
        h = self.gnn(torch.cat([s, p_loc, v_loc], dim=-1), e)       # [..., 8, n, hidden]
        inv = h.mean(dim=-3)
        if not self.n_vectors:
            return inv, None
        o = self.vec_head(h).unflatten(-1, (self.n_vectors, 3))    # [..., 8, n, k, 3]
        back = (o @ B.transpose(-1, -2)[..., :, None, :, :]).mean(dim=-4)   # [..., n, k, 3]
        if any(self.point_outputs):
            mask = torch.tensor(self.point_outputs, dtype=back.dtype)[:, None]
            back = back + mask * frames.centroid.to(back.dtype)[..., None, None, :]
        return inv, back


# ---------------------------------------------------------------- cellular


def encode_onehot_cells(sites: torch.Tensor, cell_types: torch.Tensor, n_types: int) -> torch.Tensor:
    """One node per id (node 0 is the medium).

    sites [..., h, w] (ints), cell_types [..., N] -> [..., N, 1 + n_types + 1, h, w]:
    channel 0 is the node's own indicator, the rest the shared type one-hot.
    """
    N = cell_types.shape[-1]
    if sites.min() < 0 or sites.max() >= N:
        raise ValueError(f"site ids must lie in 0..{N - 1}")
    ids = torch.arange(N, device=sites.device)
    indicator = (sites[..., None, :, :] == ids[:, None, None]).to(torch.float64)
    type_grid = torch.gather(cell_types, -1, sites.flatten(-2)).reshape(sites.shape)
    tids = torch.arange(n_types + 1, device=sites.device)
    types = (type_grid[..., None, :, :] == tids[:, None, None]).to(torch.float64)
    types = types[..., None, :, :, :].expand(*indicator.shape[:-2], n_types + 1, *sites.shape[-2:])
    return torch.cat([indicator[..., :, None, :, :], types], dim=-3)


def _conv(c_in: int, c_out: int, k: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, k, stride=stride, padding=(k - 1) // 2 if stride == 1 else 0)


class UNet(nn.Module):
    """Three pooling levels down, nearest-neighbor upsampling with skip concatenation back up."""

    def __init__(self, c_in: int, c_out: int, widths=(64, 128, 256), kernel: int = 5):
        super().__init__()
        w1, w2, w3 = widths
        self.enc0 = _conv(c_in, w1, kernel)
        self.enc1 = _conv(w1, w2, kernel)
        self.enc2 = _conv(w2, w3, kernel)
        self.mid = _conv(w3, w3, kernel)
        self.dec2 = _conv(2 * w3, w2, kernel)
        self.dec1 = _conv(2 * w2, w1, kernel)
        self.dec0 = _conv(2 * w1, w1, kernel)
        self.out = nn.Conv2d(w1, c_out, 1)

    @staticmethod
    def _up(x):
        return x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)

    def forward(self, x):
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ValueError(f"UNet needs spatial dims divisible by 8, got {tuple(x.shape[-2:])}")
        x0 = torch.relu(self.enc0(x))
        x1 = torch.relu(self.enc1(nx.pool2d(x0, "max", 2)))
        x2 = torch.relu(self.enc2(nx.pool2d(x1, "max", 2)))
        x3 = torch.relu(self.mid(nx.pool2d(x2, "max", 2)))
        u2 = torch.relu(self.dec2(torch.cat([self._up(x3), x2], dim=1)))
        u1 = torch.relu(self.dec1(torch.cat([self._up(u2), x1], dim=1)))
        u0 = torch.relu(self.dec0(torch.cat([self._up(u1), x0], dim=1)))
        return self.out(u0)


class SpatialConvLayer(nn.Module):
    """h_i <- psi(h_i, mean_j phi(h_j)) over all nodes j of the same sample.

    Input/output: [B, N, C, h, w].  The aggregate is shared by every node, so
    it is computed (and upsampled) once per sample.
    """

    def __init__(self, c_in: int, c_out: int, msg: int = 32, unet_widths=(64, 128, 256),
                 msg_kernel: int = 9, unet_kernel: int = 5):
        super().__init__()
        self.down = nn.Conv2d(c_in, msg, 2, stride=2)
        self.msg_convs = nn.ModuleList(_conv(msg, msg, msg_kernel) for _ in range(3))
        self.up = nn.ConvTranspose2d(msg, msg, 2, stride=2)
        self.psi = UNet(c_in + msg, c_out, unet_widths, unet_kernel)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.dim() != 5:
            raise ValueError(f"expected [B, N, C, h, w], got {tuple(h.shape)}")
        B, N, C, H, W = h.shape
        if H % 8 or W % 8:
            raise ValueError(f"grid {H}×{W} must be divisible by 8")
        m = self.down(h.reshape(B * N, C, H, W))
        for conv in self.msg_convs:
            m = torch.relu(conv(m))
        agg = m.reshape(B, N, *m.shape[1:]).mean(dim=1)        # [B, msg, H/2, W/2]
        up = self.up(agg)                                      # [B, msg, H, W]
        up = up[:, None].expand(B, N, *up.shape[1:])
        out = self.psi(torch.cat([h, up], dim=2).reshape(B * N, -1, H, W))
        return out.reshape(B, N, *out.shape[1:])


class CellLatentEncoder(nn.Module):
    """Per-node conv stack with global pooling -> Gaussian (mu, sigma) per node."""

    def __init__(self, c_in: int, width: int = 32, latent: int = 64, kernel: int = 9, sigma_floor: float = 1e-4):
        super().__init__()
        self.first = _conv(c_in, width, kernel)
        self.blocks = nn.ModuleList(_conv(width, width, kernel) for _ in range(3))
        self.hidden = nn.Linear(width, width)
        self.mu = nn.Linear(width, latent)
        self.sigma = nn.Linear(width, latent)
        self.sigma_floor = sigma_floor

    def forward(self, x: torch.Tensor):
        B, N = x.shape[:2]
        y = torch.relu(self.first(x.flatten(0, 1)))
        for conv in self.blocks:
            y = nx.pool2d(torch.relu(conv(y)), "max", 2)
        y = torch.relu(self.hidden(nx.global_mean_pool(y)))
        mu = self.mu(y).reshape(B, N, -1)
        sigma = (nx.softplus(self.sigma(y)) + self.sigma_floor).reshape(B, N, -1)
        return mu, sigma
