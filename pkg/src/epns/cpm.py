"""Cellular Potts model with Metropolis copy attempts, set up for cell sorting.

Hamiltonian: contact energies over Moore-neighbor site pairs holding different
ids, plus a quadratic volume constraint per cell.  Random draws address sites
and neighbor slots only, never ids, so relabeling cells commutes exactly with
a seeded run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .nbody import GenerationError, Trajectory

MOORE = np.array([(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)], dtype=np.int64)
# one representative per unordered Moore pair
_HALF = ((0, 1), (1, -1), (1, 0), (1, 1))


def sorting_contact_energies(n_types: int, same: float = 4.0, cross: float = 11.0, medium: float = 8.0) -> list:
    J = np.full((n_types + 1, n_types + 1), cross)
    J[0, :] = J[:, 0] = medium
    J[0, 0] = 0.0
    for t in range(1, n_types + 1):
        J[t, t] = same
    return J.tolist()


@dataclass(frozen=True)
class CPMConfig:
    h: int = 48
    w: int = 48
    n_cells: int = 12
    n_types: int = 2
    contact_energy: tuple = field(default=None)
    target_volume: int = 64
    volume_weight: float = 1.0
    temperature: float = 12.0
    mcs_per_frame: int = 200
    frames: int = 59
    burn_in: int = 20
    seed: int = 0

    def __post_init__(self):
        J = self.contact_energy
        if J is None:
            J = sorting_contact_energies(self.n_types)
        J = tuple(tuple(float(v) for v in row) for row in J)
        object.__setattr__(self, "contact_energy", J)
        a = np.asarray(J)
        if a.shape != (self.n_types + 1, self.n_types + 1) or not np.array_equal(a, a.T):
            raise ValueError("contact energy must be a symmetric (n_types+1)² matrix")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.h, self.w, self.n_cells, self.n_types, self.target_volume, self.mcs_per_frame, self.frames) < 1:
            raise ValueError("lattice size, cell and type counts, target volume and frame counts must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.n_cells * self.target_volume > self.h * self.w:
            raise ValueError("cells do not fit on the lattice")

    @property
    def J(self) -> np.ndarray:
        return np.asarray(self.contact_energy, dtype=np.float64)

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Lattice:
    """``sites[r, c]`` holds a cell id (0 = medium); ``cell_types[id]`` its type, with ``cell_types[0] == 0``."""

    sites: np.ndarray
    cell_types: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=np.int64)
        self.cell_types = np.asarray(self.cell_types, dtype=np.int64)
        if self.cell_types[0] != 0:
            raise ValueError("type 0 is reserved for the medium")
        if self.sites.max(initial=0) >= len(self.cell_types) or self.sites.min(initial=0) < 0:
            raise ValueError("site id outside the cell table")

    @property
    def n_cells(self) -> int:
        return len(self.cell_types) - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.sites.shape

    def volumes(self) -> np.ndarray:
        return np.bincount(self.sites.ravel(), minlength=len(self.cell_types))

    def type_grid(self) -> np.ndarray:
        return self.cell_types[self.sites]

    def copy(self) -> "Lattice":
        return Lattice(self.sites.copy(), self.cell_types.copy(), self.frame_index)

    def relabeled(self, perm: np.ndarray) -> "Lattice":
        """Rename cell ``k`` to ``perm[k-1] + 1``; types travel with the cells."""
        mapping = np.concatenate([[0], np.asarray(perm) + 1])
        types = np.zeros_like(self.cell_types)
        types[mapping] = self.cell_types
        return Lattice(mapping[self.sites], types, self.frame_index)


def hamiltonian(lat: Lattice, cfg: CPMConfig) -> float:
    J = cfg.J
    s = lat.sites
    t = lat.type_grid()
    h, w = s.shape
    H = 0.0
    for dr, dc in _HALF:
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        a, b = s[r0:r1, c0:c1], s[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        ta, tb = t[r0:r1, c0:c1], t[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        H += float(J[ta, tb][a != b].sum())
    vol = lat.volumes()[1:]
    H += cfg.volume_weight * float(((vol - cfg.target_volume) ** 2).sum())
    return H


def delta_h(lat: Lattice, site: tuple[int, int], proposed_id: int, cfg: CPMConfig, volumes=None) -> float:
    """Energy change of setting ``site`` to ``proposed_id``."""
    r, c = site
    h, w = lat.shape
    if not (0 <= r < h and 0 <= c < w):
        raise IndexError(f"site {site} outside {h}×{w} lattice")
    if volumes is None:
        volumes = lat.volumes()
    return float(_delta_h(lat.sites, lat.cell_types, volumes, cfg.J, r, c, int(proposed_id),
                          float(cfg.target_volume), float(cfg.volume_weight)))


def metropolis_accept(dh: float, temperature: float, u: float) -> bool:
    return dh <= 0.0 or u < math.exp(-dh / temperature)


@numba.njit(cache=True)
def _delta_h(sites, types, volumes, J, r, c, new, vt, lam):
    old = sites[r, c]
    if old == new:
        return 0.0
    h, w = sites.shape
    t_old, t_new = types[old], types[new]
    dh = 0.0
    for k in range(8):
        rr, cc = r + MOORE[k, 0], c + MOORE[k, 1]
        if rr < 0 or rr >= h or cc < 0 or cc >= w:
            continue
        nb = sites[rr, cc]
        tn = types[nb]
        if nb != old:
            dh -= J[t_old, tn]
        if nb != new:
            dh += J[t_new, tn]
    if old != 0:
        v = volumes[old]
        dh += lam * ((v - 1 - vt) ** 2 - (v - vt) ** 2)
    if new != 0:
        v = volumes[new]
        dh += lam * ((v + 1 - vt) ** 2 - (v - vt) ** 2)
    return dh


@numba.njit(cache=True)
def _sweep(sites, types, volumes, J, vt, lam, temp, site_idx, nbr_idx, u):
    h, w = sites.shape
    accepted = 0
    for a in range(site_idx.shape[0]):
        r = site_idx[a] // w
        c = site_idx[a] % w
        rr = r + MOORE[nbr_idx[a], 0]
        cc = c + MOORE[nbr_idx[a], 1]
        if rr < 0 or rr >= h or cc < 0 or cc >= w:
            continue
        new = sites[rr, cc]
        old = sites[r, c]
        if new == old:
            continue
        dh = _delta_h(sites, types, volumes, J, r, c, new, vt, lam)
        if dh <= 0.0 or u[a] < math.exp(-dh / temp):
            sites[r, c] = new
            volumes[old] -= 1
            volumes[new] += 1
            accepted += 1
    return accepted


def draw_attempts(shape: tuple[int, int], rng: np.random.Generator):
    n = shape[0] * shape[1]
    return rng.integers(0, n, size=n), rng.integers(0, 8, size=n), rng.random(n)


def mcs_step(lat: Lattice, cfg: CPMConfig, rng: np.random.Generator, draws=None, stats: dict | None = None) -> Lattice:
    """One Monte Carlo step: h·w Metropolis copy attempts; returns a new lattice."""
    site_idx, nbr_idx, u = draws if draws is not None else draw_attempts(lat.shape, rng)
    sites = lat.sites.copy()
    volumes = lat.volumes()
    acc = _sweep(sites, lat.cell_types, volumes, cfg.J, float(cfg.target_volume), float(cfg.volume_weight),
                 float(cfg.temperature), site_idx, nbr_idx, u)
    if stats is not None:
        stats["attempts"] = stats.get("attempts", 0) + len(site_idx)
        stats["accepted"] = stats.get("accepted", 0) + int(acc)
    return Lattice(sites, lat.cell_types, lat.frame_index)


def mcs_step_reference(lat: Lattice, cfg: CPMConfig, draws) -> Lattice:
    """Pure-Python version of :func:`mcs_step` (full-Hamiltonian differences), for testing."""
    site_idx, nbr_idx, u = draws
    cur = lat.copy()
    h, w = cur.shape
    for a in range(len(site_idx)):
        r, c = divmod(int(site_idx[a]), w)
        rr, cc = r + MOORE[nbr_idx[a], 0], c + MOORE[nbr_idx[a], 1]
        if not (0 <= rr < h and 0 <= cc < w):
            continue
        new = cur.sites[rr, cc]
        if new == cur.sites[r, c]:
            continue
        before = hamiltonian(cur, cfg)
        trial = cur.copy()
        trial.sites[r, c] = new
        if metropolis_accept(hamiltonian(trial, cfg) - before, cfg.temperature, u[a]):
            cur = trial
    return cur


def init_random_culture(cfg: CPMConfig, rng: np.random.Generator) -> Lattice:
    """Square cells tiled edge to edge in a centered block, random types, then burn-in."""
    side = max(1, int(round(math.sqrt(cfg.target_volume))))
    cols = math.ceil(math.sqrt(cfg.n_cells))
    rows = math.ceil(cfg.n_cells / cols)
    if rows * side > cfg.h or cols * side > cfg.w:
        raise GenerationError(f"{cfg.n_cells} cells of side {side} do not fit a {cfg.h}×{cfg.w} lattice")
    sites = np.zeros((cfg.h, cfg.w), dtype=np.int64)
    r0 = (cfg.h - rows * side) // 2
    c0 = (cfg.w - cols * side) // 2
    for k in range(cfg.n_cells):
        i, j = divmod(k, cols)
        sites[r0 + i * side:r0 + (i + 1) * side, c0 + j * side:c0 + (j + 1) * side] = k + 1
    types = np.concatenate([[0], rng.integers(1, cfg.n_types + 1, size=cfg.n_cells)])
    lat = Lattice(sites, types)
    for _ in range(cfg.burn_in):
        lat = mcs_step(lat, cfg, rng)
    return lat


def run_frames(lat: Lattice, cfg: CPMConfig, frames: int, rng: np.random.Generator) -> list[Lattice]:
    out = [Lattice(lat.sites.copy(), lat.cell_types, 0)]
    for f in range(1, frames + 1):
        for _ in range(cfg.mcs_per_frame):
            lat = mcs_step(lat, cfg, rng)
        lat = Lattice(lat.sites, lat.cell_types, f)
        out.append(lat)
    return out


def generate_cell_sorting_trajectory(cfg: CPMConfig, rng: np.random.Generator, x0: Lattice | None = None) -> Trajectory:
    start = x0 if x0 is not None else init_random_culture(cfg, rng)
    return Trajectory(run_frames(start, cfg, cfg.frames, rng), float(cfg.mcs_per_frame), cfg.seed, cfg.digest())
