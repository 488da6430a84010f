"""Stochastic celestial dynamics: softened gravity with additive force noise.

States may carry leading batch axes (positions ``[..., n, 3]``), so an
ensemble of trajectories integrates in one vectorized pass.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NBodyConfig:
    n: int = 5
    grav_const: float = 1.0
    softening: float = 0.1
    noise_scale: float = 0.05
    dt: float = 0.01
    steps_per_frame: int = 10
    frames: int = 100
    seed: int = 0
    init_radius: float = 4.0
    min_separation: float = 0.5
    velocity_jitter: float = 0.1
    energy_jump: float = 20.0

    def __post_init__(self):
        if self.dt <= 0 or self.steps_per_frame < 1:
            raise ValueError("dt must be positive and steps_per_frame >= 1")

    @property
    def frame_interval(self) -> float:
        return self.dt * self.steps_per_frame

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class BodyState:
    masses: np.ndarray      # [..., n]
    positions: np.ndarray   # [..., n, 3]
    velocities: np.ndarray  # [..., n, 3]

    def __post_init__(self):
        if np.any(self.masses <= 0):
            raise ValueError("masses must be strictly positive")

    @property
    def n(self) -> int:
        return self.masses.shape[-1]

    def copy(self) -> "BodyState":
        return BodyState(self.masses.copy(), self.positions.copy(), self.velocities.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.positions).all() and np.isfinite(self.velocities).all())

    def to_array(self) -> np.ndarray:
        """Pack into ``[..., n, 7]`` rows of (mass, position, velocity)."""
        return np.concatenate([self.masses[..., None], self.positions, self.velocities], axis=-1)

    @classmethod
    def from_array(cls, a: np.ndarray) -> "BodyState":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[..., 0].copy(), a[..., 1:4].copy(), a[..., 4:7].copy())

    def transformed(self, rotation: np.ndarray, translation=None, perm=None) -> "BodyState":
        """Apply p -> R p + t, v -> R v and an optional relabeling of bodies."""
        p = self.positions @ rotation.T
        v = self.velocities @ rotation.T
        if translation is not None:
            p = p + translation
        m = self.masses
        if perm is not None:
            p, v, m = p[..., perm, :], v[..., perm, :], m[..., perm]
        return BodyState(m.copy(), p, v)


@dataclass
class Trajectory:
    frames: list
    frame_interval: float
    seed: int
    config_hash: str

    def __len__(self) -> int:
        return len(self.frames)


def pairwise_acceleration(state: BodyState, cfg: NBodyConfig) -> np.ndarray:
    d = state.positions[..., None, :, :] - state.positions[..., :, None, :]   # d[i, j] = p_j - p_i
    r2 = np.sum(d * d, axis=-1) + cfg.softening ** 2
    with np.errstate(divide="ignore"):
        inv_r3 = r2 ** -1.5
    n = state.n
    inv_r3[..., np.arange(n), np.arange(n)] = 0.0
    w = cfg.grav_const * state.masses[..., None, :] * inv_r3
    return np.einsum("...ij,...ijk->...ik", w, d)


def euler_maruyama_step(state: BodyState, cfg: NBodyConfig, rng=None, noise=None) -> BodyState:
    """One kick-then-drift Euler–Maruyama step.

    v' = v + a(p) dt + noise_scale sqrt(dt) xi ;  p' = p + v' dt.
    ``noise`` overrides the draw of xi (same shape as velocities).
    """
    if noise is None:
        noise = rng.standard_normal(state.velocities.shape) if cfg.noise_scale > 0 else 0.0
    acc = pairwise_acceleration(state, cfg)
    v = state.velocities + acc * cfg.dt + cfg.noise_scale * np.sqrt(cfg.dt) * noise
    p = state.positions + v * cfg.dt
    return BodyState(state.masses, p, v)


def kinetic_energy(state: BodyState) -> np.ndarray:
    return 0.5 * np.sum(state.masses * np.sum(state.velocities ** 2, axis=-1), axis=-1)


def potential_energy(state: BodyState, cfg: NBodyConfig) -> np.ndarray:
    d = state.positions[..., None, :, :] - state.positions[..., :, None, :]
    r = np.sqrt(np.sum(d * d, axis=-1) + cfg.softening ** 2)
    mm = state.masses[..., :, None] * state.masses[..., None, :]
    iu = np.triu_indices(state.n, k=1)
    with np.errstate(divide="ignore"):
        return -cfg.grav_const * np.sum((mm / r)[..., iu[0], iu[1]], axis=-1)


def total_energy(state: BodyState, cfg: NBodyConfig) -> np.ndarray:
    return kinetic_energy(state) + potential_energy(state, cfg)


def sample_initial_condition(cfg: NBodyConfig, rng: np.random.Generator, max_tries: int = 1000) -> BodyState:
    """Draw a bound, barycentric configuration.

    Masses are log-uniform in [0.5, 2], positions uniform in a ball with a
    minimum pairwise separation, velocities follow the circular-orbit speed
    about the barycenter around a shared random axis with Gaussian jitter.
    """
    n = cfg.n
    for _ in range(max_tries):
        masses = np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=n))
        direction = rng.standard_normal((n, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = cfg.init_radius * rng.uniform(size=(n, 1)) ** (1 / 3)
        pos = direction * radius
        if n > 1:
            dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)[np.triu_indices(n, 1)]
            if dist.min() < cfg.min_separation:
                continue
        pos -= (masses[:, None] * pos).sum(0) / masses.sum()
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        vel = np.zeros((n, 3))
        for i in range(n):
            r = np.linalg.norm(pos[i])
            tangent = np.cross(axis, pos[i])
            tn = np.linalg.norm(tangent)
            if tn < 1e-12 or r < 1e-12:
                continue
            speed = np.sqrt(cfg.grav_const * (masses.sum() - masses[i]) / np.sqrt(r ** 2 + cfg.softening ** 2))
            vel[i] = tangent / tn * speed
            vel[i] += cfg.velocity_jitter * speed * rng.standard_normal(3)
        vel -= (masses[:, None] * vel).sum(0) / masses.sum()
        state = BodyState(masses, pos, vel)
        if total_energy(state, cfg) < 0:
            return state
    raise GenerationError(f"no bound initial condition after {max_tries} draws")


def simulate(state: BodyState, cfg: NBodyConfig, frames: int, rng: np.random.Generator) -> list[BodyState]:
    """Integrate ``frames`` stored frames (plus the initial one) without filtering.

    Works on batched states; every ensemble member gets independent noise.
    """
    out = [state]
    for _ in range(frames):
        for _ in range(cfg.steps_per_frame):
            state = euler_maruyama_step(state, cfg, rng)
        out.append(state)
    return out


def max_energy_jump(frames: list[BodyState], cfg: NBodyConfig) -> float:
    e = np.array([total_energy(f, cfg) for f in frames])
    if not np.isfinite(e).all():
        return np.inf
    return float(np.abs(np.diff(e, axis=0)).max(initial=0.0))


def generate_trajectory(cfg: NBodyConfig, rng: np.random.Generator, x0: BodyState | None = None,
                        max_rejections: int = 100) -> Trajectory:
    """Sample a trajectory, regenerating any whose stored-frame energy jumps above the threshold.

    With ``x0`` given, the initial condition is held fixed and only the noise is
    redrawn on rejection.
    """
    for _ in range(max_rejections):
        start = x0 if x0 is not None else sample_initial_condition(cfg, rng)
        frames = simulate(start, cfg, cfg.frames, rng)
        if max_energy_jump(frames, cfg) <= cfg.energy_jump:
            return Trajectory(frames, cfg.frame_interval, cfg.seed, cfg.digest())
        log.debug("rejected trajectory: energy jump above %.1f", cfg.energy_jump)
    raise GenerationError(f"{max_rejections} consecutive trajectories failed the energy-jump filter")


def trajectory_array(traj: Trajectory) -> np.ndarray:
    return np.stack([f.to_array() for f in traj.frames])


def trajectory_from_array(a: np.ndarray, frame_interval: float = 0.1, seed: int = 0, config_hash: str = "") -> Trajectory:
    return Trajectory([BodyState.from_array(f) for f in a], frame_interval, seed, config_hash)


def random_rotation(rng: np.random.Generator, reflections: bool = False) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if not reflections and np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
