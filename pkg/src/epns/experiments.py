"""Experiment drivers shared by the CLI and the acceptance suite.

Model construction, ensemble rollouts, observables on rollout arrays, the
equivariance protocol adapters and the two desk-scale training smoke runs.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as C
from . import cpm, datasets, evaluation, fileio, nbody, numerics, training
from .models.celestial import BodyBatch, CelestialData, CelestialEPNS
from .models.cellular import CellBatch, CellularData, CellularEPNS, rollout_lattices

log = logging.getLogger(__name__)

CACHE_ENV = "EPNS_ACCEPTANCE_DIR"
FRESH_ENV = "EPNS_ACCEPTANCE_FRESH"


def build_model(cfg: dict, seed: int = 0, equivariant: bool | None = None):
    """Fresh model with parameters drawn from a stream fixed by ``seed``."""
    m = dict(cfg["model"])
    with torch.random.fork_rng():
        torch.manual_seed(training._stream_seed(seed, 104729))
        if cfg["system"] == "celestial":
            if equivariant is not None:
                m["equivariant"] = equivariant
            return CelestialEPNS(**m)
        m["unet_widths"] = tuple(m["unet_widths"])
        return CellularEPNS(n_types=int(cfg["generator"]["n_types"]), **m)


def load_model(cfg: dict, ckpt) -> torch.nn.Module:
    params, _, meta = fileio.load_checkpoint(ckpt)
    model = build_model(cfg, equivariant=meta.get("equivariant"))
    training.load_params(model, params)
    return model


def initial_state(split: datasets.Split, k: int, t: int = 0):
    return split.training_view().state([k], [t])


def ensemble_rollout(model, x0, count: int, steps: int, seed: int, chunk: int = 50) -> np.ndarray:
    """``count`` independent rollouts from one initial state (batch of 1)."""
    gen = torch.Generator().manual_seed(training._stream_seed(seed, 31337))
    model.eval()
    parts = []
    for c0 in range(0, count, chunk):
        parts.append(model.rollout(x0.repeat(min(chunk, count - c0)), steps, gen))
    return np.concatenate(parts)


# ---------------------------------------------------------------- observables


def body_frames(member: np.ndarray) -> list:
    """Frames of one celestial rollout ``[T, n, 7]``, truncated at the first NaN."""
    out = []
    for f in member:
        if not np.isfinite(f).all():
            break
        out.append(nbody.BodyState.from_array(f))
    return out


def celestial_values(arr: np.ndarray, observable: str, nbody_cfg: nbody.NBodyConfig) -> np.ndarray:
    """``[members, frames]`` observable values; NaN after truncation."""
    out = np.full(arr.shape[:2], np.nan)
    for b in range(arr.shape[0]):
        frames = body_frames(arr[b])
        if frames:
            out[b, :len(frames)] = evaluation.observable_series(frames, observable, nbody_cfg)
    return out


def cellular_values(sites: np.ndarray, types: np.ndarray, observable: str = "cluster_count") -> np.ndarray:
    out = np.full(sites.shape[:2], np.nan)
    for b, frames in enumerate(rollout_lattices(sites, types)):
        if frames:
            out[b, :len(frames)] = evaluation.observable_series(frames, observable)
    return out


def rollout_values(cfg: dict, arr: np.ndarray, types: np.ndarray | None = None) -> np.ndarray:
    obs = cfg["evaluation"]["observable"]
    if cfg["system"] == "celestial":
        return celestial_values(arr, obs, C.generator_config(cfg))
    return cellular_values(arr, types, obs)


def rollout_frames(cfg: dict, arr: np.ndarray, types: np.ndarray | None = None) -> list[list]:
    if cfg["system"] == "celestial":
        return [body_frames(m) for m in arr]
    return rollout_lattices(arr, types)


def stability_criterion(cfg: dict, train_split: datasets.Split) -> evaluation.StabilityCriterion:
    if cfg["system"] == "celestial":
        gen = C.generator_config(cfg)
        return evaluation.StabilityCriterion("energy_jump", threshold=gen.energy_jump, nbody_cfg=gen)
    frames = [f for k in range(len(train_split)) for f in train_split.frames(k)]
    return evaluation.StabilityCriterion.volume_range_from(frames)


# ---------------------------------------------------------------- equivariance protocol


def split_states(batch: nbody.BodyState) -> list:
    return [nbody.BodyState(batch.masses[i], batch.positions[i], batch.velocities[i])
            for i in range(batch.masses.shape[0])]


def celestial_generator_protocol(rng, cfg: nbody.NBodyConfig | None = None, n_x0: int = 100, steps: int = 20,
                                 rollouts_per_x0: int = 10, dummy: bool = False):
    """Statistical equivariance check on the n-body generator (or a deliberately broken variant).

    The dummy adds +1 to every x-coordinate of its output before the group
    action is applied, which no rotation commutes with.
    """
    cfg = cfg or nbody.NBodyConfig()
    x0s = [nbody.sample_initial_condition(cfg, rng) for _ in range(n_x0)]
    body = int(rng.integers(cfg.n))

    def rollout(x0, count, r):
        batch = nbody.BodyState(np.repeat(x0.masses[None], count, 0), np.repeat(x0.positions[None], count, 0),
                                np.repeat(x0.velocities[None], count, 0))
        final = nbody.simulate(batch, cfg, steps, r)[-1]
        if dummy:
            final.positions[..., 0] += 1.0
        return split_states(final)

    return evaluation.verify_equivariance(
        rollout, x0s, lambda r: nbody.random_rotation(r), lambda g, s: s.transformed(g),
        lambda gx0, f: float(f.positions[body, 0]), rng, rollouts_per_x0)


def cellular_generator_protocol(rng, cfg: cpm.CPMConfig | None = None, n_x0: int = 30, steps: int = 3,
                                rollouts_per_x0: int = 10):
    cfg = cfg or cpm.CPMConfig()
    x0s = [cpm.init_random_culture(cfg, rng) for _ in range(n_x0)]
    cell = int(rng.integers(1, cfg.n_cells + 1))

    def rollout(x0, count, r):
        return [cpm.run_frames(x0, cfg, steps, r)[-1] for _ in range(count)]

    return evaluation.verify_equivariance(
        rollout, x0s, lambda r: r.permutation(cfg.n_cells), lambda g, lat: lat.relabeled(g),
        lambda gx0, f: evaluation.distance_traveled(gx0, f, cell), rng, rollouts_per_x0)


def model_protocol(model, cfg: dict, x0s: list, steps: int, rng, rollouts_per_x0: int = 10):
    """Statistical equivariance check for a trained simulator over the given initial states (BodyState or Lattice)."""
    if cfg["system"] == "celestial":
        body = int(rng.integers(x0s[0].n))

        def rollout(x0, count, r):
            arr = ensemble_rollout(model, BodyBatch.from_array(x0.to_array()), count, steps, int(r.integers(2 ** 62)))
            return [nbody.BodyState.from_array(a[-1]) for a in arr]

        return evaluation.verify_equivariance(
            rollout, x0s, lambda r: nbody.random_rotation(r), lambda g, s: s.transformed(g),
            lambda gx0, f: float(f.positions[body, 0]), rng, rollouts_per_x0)

    cell = int(rng.integers(1, x0s[0].n_cells + 1))

    def rollout(x0, count, r):
        arr = ensemble_rollout(model, CellBatch.from_lattices(x0), count, steps, int(r.integers(2 ** 62)))
        return [cpm.Lattice(a[-1], x0.cell_types) for a in arr]

    return evaluation.verify_equivariance(
        rollout, x0s, lambda r: r.permutation(x0s[0].n_cells), lambda g, lat: lat.relabeled(g),
        lambda gx0, f: evaluation.distance_traveled(gx0, f, cell), rng, rollouts_per_x0)


# ---------------------------------------------------------------- smoke experiments


def acceptance_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "epns" / "acceptance"))


def ensure_dataset(cfg: dict, data_dir: Path, workers: int | None = None) -> None:
    man = data_dir / "manifest.json"
    if man.exists():
        try:
            if fileio.read_manifest(data_dir)["config_hash"] == C.data_hash(cfg):
                return
        except fileio.FormatError:
            pass
    datasets.generate_dataset(cfg, data_dir, workers)


def _seed_cfg(cfg: dict, seed: int) -> dict:
    out = json.loads(json.dumps(cfg))
    out["training"]["seed"] = seed
    return out


def train_seed(cfg: dict, data_dir: Path, out_dir: Path, seed: int, equivariant: bool | None = None,
               progress=None):
    """Train one model; returns (model, untrained twin, TrainResult, initial validation ELBO)."""
    train = datasets.load_split(data_dir, "train").training_view()
    val = datasets.load_split(data_dir, "val").training_view()
    tc = C.train_config(cfg, seed)
    model = build_model(cfg, seed, equivariant)
    untrained = build_model(cfg, seed, equivariant)
    vt, vs = training.validation_pairs(val, tc.val_pairs, tc.seed)
    init_val = training.mean_elbo(model, val, vt, vs, tc.batch_size, tc.seed)
    meta = {"equivariant": getattr(model, "equivariant", True), "system": cfg["system"],
            "config_hash": C.config_hash(cfg)}
    res = training.train(model, train, val, tc, out_dir, resume=True, meta=meta, progress=progress)
    return model, untrained, res, init_val


@dataclass
class CelestialSeedReport:
    seed: int
    val_init: float
    val_quarter: float
    kl_final: float
    dks_trained: float
    dks_untrained: float
    dks_pns: float
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def dks_final_ke(cfg: dict, model, ens: datasets.Split, seed: int) -> float:
    steps = ens.arrays.shape[1] - 1
    x0 = initial_state(ens, 0)
    arr = ensemble_rollout(model, x0, ens.arrays.shape[0], steps, seed)
    gen = C.generator_config(cfg)
    model_ke = celestial_values(arr[:, [0, -1]], "kinetic_energy", gen)[:, -1]
    gt_ke = celestial_values(ens.arrays[:, [0, -1]], "kinetic_energy", gen)[:, -1]
    model_ke = np.where(np.isfinite(model_ke), model_ke, np.inf)
    return evaluation.ks_statistic(model_ke, gt_ke)


def celestial_smoke(work: Path | None = None, seeds=(0, 1, 2), fresh: bool | None = None,
                    stop_on_pass: bool = True, cfg: dict | None = None, progress=None) -> dict:
    work = Path(work or acceptance_dir())
    cfg = cfg or C.load_config(system="celestial", preset="desk")
    key = C.config_hash(cfg)
    cache = work / f"celestial_smoke_{key}.json"
    fresh = os.environ.get(FRESH_ENV) == "1" if fresh is None else fresh
    if cache.exists() and not fresh:
        return json.loads(cache.read_text())
    data_dir = work / f"celestial_data_{C.data_hash(cfg)}"
    ensure_dataset(cfg, data_dir)
    ens = datasets.load_split(data_dir, "ensemble")
    reports = []
    for seed in seeds:
        model, untrained, res, init_val = train_seed(cfg, data_dir, work / f"celestial_{key}_epns_{seed}", seed,
                                                     progress=progress)
        pns, _, _, _ = train_seed(cfg, data_dir, work / f"celestial_{key}_pns_{seed}", seed, equivariant=False,
                                  progress=progress)
        hist = res.history
        q = max(1, len(hist) // 4)
        rep = CelestialSeedReport(
            seed, init_val, float(hist[q - 1]["val_elbo"]), float(hist[-1]["kl"]),
            dks_final_ke(cfg, model, ens, seed), dks_final_ke(cfg, untrained, ens, seed),
            dks_final_ke(cfg, pns, ens, seed))
        rep.checks = {
            "val_elbo_improves_first_quarter": rep.val_quarter > rep.val_init,
            "kl_positive_after_annealing": hist[-1]["beta"] >= 1.0 and rep.kl_final > 1e-2,
            "dks_below_untrained": rep.dks_trained < rep.dks_untrained,
            "dks_within_pns_plus_0.1": rep.dks_trained <= rep.dks_pns + 0.1,
        }
        reports.append(rep)
        log.info("celestial seed %d: %s", seed, rep)
        if stop_on_pass and rep.passed:
            break
    out = {"config_hash": key, "seeds": [dict(asdict(r), passed=r.passed) for r in reports],
           "passed": any(r.passed for r in reports)}
    fileio.write_json(cache, out)
    return out


@dataclass
class CellularSeedReport:
    seed: int
    val_init: float
    val_best: float
    clusters_frame0: float
    clusters_frame40: float
    stability_at_2k: float
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def cellular_rollouts(cfg: dict, model, test: datasets.Split, per_x0: int, steps: int, seed: int):
    sites, types = [], []
    for k in range(len(test)):
        x0 = initial_state(test, k)
        sites.append(ensemble_rollout(model, x0, per_x0, steps, seed + k, chunk=per_x0))
        types.append(np.repeat(test.cell_types[k][None], per_x0, 0))
    return np.concatenate(sites), np.concatenate(types)


def cellular_smoke(work: Path | None = None, seeds=(0, 1, 2), fresh: bool | None = None,
                   stop_on_pass: bool = True, cfg: dict | None = None, progress=None) -> dict:
    work = Path(work or acceptance_dir())
    cfg = cfg or C.load_config(system="cellular", preset="desk")
    key = C.config_hash(cfg)
    cache = work / f"cellular_smoke_{key}.json"
    fresh = os.environ.get(FRESH_ENV) == "1" if fresh is None else fresh
    if cache.exists() and not fresh:
        return json.loads(cache.read_text())
    data_dir = work / f"cellular_data_{C.data_hash(cfg)}"
    ensure_dataset(cfg, data_dir)
    train_split = datasets.load_split(data_dir, "train")
    test = datasets.load_split(data_dir, "test")
    crit = stability_criterion(cfg, train_split)
    k2 = 2 * int(cfg["training"]["rollout_len"])
    steps = max(40, k2)
    per_x0 = max(1, int(cfg["evaluation"]["rollouts"]) // len(test))
    reports = []
    for seed in seeds:
        model, _, res, init_val = train_seed(cfg, data_dir, work / f"cellular_{key}_epns_{seed}", seed,
                                             progress=progress)
        sites, types = cellular_rollouts(cfg, model, test, per_x0, steps, seed)
        cc = cellular_values(sites, types)
        frames = rollout_lattices(sites, types)
        stab = evaluation.stability_fraction(frames, crit, steps + 1)
        rep = CellularSeedReport(seed, init_val, float(res.best_val), float(np.nanmean(cc[:, 0])),
                                 float(np.nanmean(cc[:, 40])) if cc.shape[1] > 40 else math.nan, float(stab[k2]))
        rep.checks = {
            "val_elbo_improves": rep.val_best > rep.val_init,
            "clusters_decrease_0_to_40": rep.clusters_frame40 < rep.clusters_frame0,
            "volume_stability_at_2k_ge_0.5": rep.stability_at_2k >= 0.5,
        }
        reports.append(rep)
        log.info("cellular seed %d: %s", seed, rep)
        if stop_on_pass and rep.passed:
            break
    out = {"config_hash": key, "seeds": [dict(asdict(r), passed=r.passed) for r in reports],
           "passed": any(r.passed for r in reports)}
    fileio.write_json(cache, out)
    return out


# ---------------------------------------------------------------- gradient check


def toy_problem(system: str, seed: int = 0):
    """Tiny float64 model, a two-trajectory dataset and the gradient floor for finite-difference checks."""
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if system == "celestial":
            gen = nbody.NBodyConfig(n=3, frames=4)
            arr = np.stack([nbody.trajectory_array(nbody.generate_trajectory(gen, rng)) for _ in range(2)])
            model = CelestialEPNS(hidden=6, latent=2, forward_layers=1, prior_layers=1, decoder_layers=1)
            data = CelestialData(arr)
            floor = 1e-3
        elif system == "cellular":
            gen = cpm.CPMConfig(h=16, w=16, n_cells=3, target_volume=16, mcs_per_frame=2, burn_in=1)
            lats = [cpm.run_frames(cpm.init_random_culture(gen, rng), gen, 3, rng) for _ in range(2)]
            sites = np.stack([np.stack([f.sites for f in t]) for t in lats])
            types = np.stack([t[0].cell_types for t in lats])
            model = CellularEPNS(n_types=gen.n_types, embed=3, message=3, unet_widths=(3, 3, 4), encoder_width=3,
                                 latent=2, message_kernel=3, unet_kernel=3, encoder_kernel=3, latent_channels=2,
                                 stay_logit=0.0, dtype=torch.float64)
            # He-scale the conv stacks: at default scale the deep width-3 stack
            # has gradients too small to resolve by differences on a loss of
            # ~1e3.  Latent heads keep their scale so the KL stays moderate.
            with torch.no_grad():
                for name, p in model.named_parameters():
                    if p.dim() > 1 and not name.endswith(("mu.weight", "sigma.weight")):
                        p.mul_(math.sqrt(6.0))
            data = CellularData(sites, types)
            floor = 1e-2
        else:
            raise ValueError(f"unknown system {system!r}")
    return model, data, floor


def model_gradcheck(system: str, seed: int = 0, steps: int = 2, max_entries: int | None = 4,
                    tolerance: float = 1e-4) -> numerics.GradCheckReport:
    """Central differences vs autograd for every parameter block of a toy model.

    The loss is a ``steps``-step unroll with fixed noise; the sampled inputs of
    later steps are frozen so the loss is a smooth function of the parameters.
    Relative errors use a gradient floor (1e-3 celestial, 1e-2 cellular):
    differences on losses of order 1e2 to 1e3 resolve gradients only to about
    1e-8 to 1e-7 absolute.
    """
    model, data, floor = toy_problem(system, seed)
    ids, starts = np.arange(data.n_traj), np.zeros(data.n_traj, dtype=np.int64)
    first = data.state(ids, starts)
    noises = training.element_noise(model, first, ids, 0, seed, steps)
    with torch.no_grad():
        _, _, _, frozen = training.unrolled_loss(model, data, ids, starts, noises, 0.5, 0.0, backward=False)

    def loss():
        total, _, _, _ = training.unrolled_loss(model, data, ids, starts, noises, 0.5, 0.0, backward=False,
                                                frozen_inputs=frozen)
        return total

    return numerics.finite_difference_check(loss, dict(model.named_parameters()), step=1e-6, tolerance=tolerance,
                                            max_entries=max_entries, seed=seed, floor=floor, kink_factor=1.0)
