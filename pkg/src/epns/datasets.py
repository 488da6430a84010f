"""Dataset generation and loading.

Every trajectory draws from its own stream keyed by (seed, split, index), so
the bytes written do not depend on the worker count.  The ``ensemble`` split
holds repeated runs from one fixed initial condition (the first test
trajectory's frame 0), for distribution comparisons.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as C
from . import cpm, fileio, nbody
from .models.celestial import CelestialData
from .models.cellular import CellularData

log = logging.getLogger(__name__)

SPLITS = {"train": 0, "val": 1, "test": 2, "ensemble": 3}
WORKERS_ENV = "EPNS_WORKERS"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def stream(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), SPLITS[split], int(index)])


def _ensemble_x0(system: str, gen_cfg, seed: int):
    rng = stream(seed, "test", 0)
    if system == "celestial":
        return nbody.sample_initial_condition(gen_cfg, rng)
    return cpm.init_random_culture(gen_cfg, rng)


def generate_one(system: str, gen_cfg, seed: int, split: str, index: int):
    """Returns (array, cell_types or None) for one trajectory."""
    rng = stream(seed, split, index)
    x0 = None
    if split == "ensemble":
        x0 = _ensemble_x0(system, gen_cfg, seed)
    if system == "celestial":
        traj = nbody.generate_trajectory(gen_cfg, rng, x0=x0)
        return nbody.trajectory_array(traj), None
    traj = cpm.generate_cell_sorting_trajectory(gen_cfg, rng, x0=x0)
    sites = np.stack([f.sites for f in traj.frames]).astype(np.uint16)
    return sites, traj.frames[0].cell_types.tolist()


def _job(args):
    return generate_one(*args)


def generate_dataset(cfg: dict, out_dir, workers: int | None = None, splits=None) -> dict:
    """Write every trajectory file plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    system, seed = cfg["system"], int(cfg["seed"])
    gen_cfg = C.generator_config(cfg)
    splits = splits or [s for s in SPLITS if int(cfg["dataset"].get(s, 0)) > 0]
    jobs = [(system, gen_cfg, seed, s, i) for s in splits for i in range(int(cfg["dataset"][s]))]
    workers = workers or default_workers()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_job, jobs, chunksize=1))
    else:
        results = [_job(j) for j in jobs]
    entries = []
    for (_, _, _, split, idx), (arr, types) in zip(jobs, results):
        name = f"{split}_{idx:04d}.traj"
        digest = fileio.write_trajectory_file(out / name, arr)
        e = {"name": name, "split": split, "index": idx, "stream": [seed, SPLITS[split], idx], "sha256": digest}
        if types is not None:
            e["cell_types"] = types
        entries.append(e)
    manifest = {
        "format_version": fileio.FORMAT_VERSION,
        "system": system,
        "counts": {s: int(cfg["dataset"][s]) for s in splits},
        "frame_interval": gen_cfg.frame_interval if system == "celestial" else float(gen_cfg.mcs_per_frame),
        "generator": cfg["generator"],
        "seed": seed,
        "config_hash": C.data_hash(cfg),
        "files": entries,
    }
    fileio.write_json(out / "manifest.json", manifest)
    log.info("wrote %d trajectories to %s", len(entries), out)
    return manifest


@dataclass
class Split:
    system: str
    arrays: np.ndarray            # [traj, frames, ...]
    cell_types: np.ndarray | None

    def training_view(self):
        if self.system == "celestial":
            return CelestialData(self.arrays)
        return CellularData(self.arrays, self.cell_types)

    def frames(self, k: int) -> list:
        """Trajectory ``k`` as a list of BodyState or Lattice frames."""
        if self.system == "celestial":
            return [nbody.BodyState.from_array(f) for f in self.arrays[k]]
        return [cpm.Lattice(f.astype(np.int64), self.cell_types[k], t) for t, f in enumerate(self.arrays[k])]

    def __len__(self) -> int:
        return self.arrays.shape[0]


def load_split(data_dir, split: str, verify: bool = True) -> Split:
    data_dir = Path(data_dir)
    man = fileio.read_manifest(data_dir)
    entries = sorted((e for e in man["files"] if e["split"] == split), key=lambda e: e["index"])
    if not entries:
        raise KeyError(f"split {split!r} not in dataset {data_dir}")
    arrays = [fileio.read_trajectory_file(data_dir / e["name"], e["sha256"] if verify else None) for e in entries]
    types = None
    if man["system"] == "cellular":
        types = np.array([e["cell_types"] for e in entries], dtype=np.int64)
    return Split(man["system"], np.stack(arrays), types)
