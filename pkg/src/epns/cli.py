"""Command-line entry point: ``epns <subcommand> [options]``.

Exit codes: 0 success, 1 usage error (bad flags), 2 runtime error (including
a malformed config), 3 validation failure (checksum mismatch, gradient check
over tolerance).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import config as C
from . import datasets, evaluation, experiments, fileio, plotting, training

log = logging.getLogger("epns")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2, 3
ROLLOUT_SPLIT = "rollout"
U16_MISSING = np.iinfo(np.uint16).max   # truncated cellular frames in rollout files


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="run-config YAML file")
    p.add_argument("--system", choices=C.SYSTEMS, help="system, when the config does not name one")
    p.add_argument("--preset", choices=C.PRESETS, help="scale preset (default: desk)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--split", help="dataset split to read")
    p.add_argument("--workers", type=int, help=f"worker processes (default: ${datasets.WORKERS_ENV} or 1)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry, e.g. training.epochs=5 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="epns", description="Equivariant probabilistic simulators for n-body and cell sorting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a ground-truth dataset")
    _common(p)

    p = sub.add_parser("train", help="train a simulator on a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in --out")

    p = sub.add_parser("simulate", help="roll out an ensemble from one dataset state")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset holding the initial state")
    p.add_argument("--index", type=int, default=0, help="trajectory index of the initial state")
    p.add_argument("--frame", type=int, default=0, help="frame of the initial state")
    p.add_argument("--count", type=int, help="ensemble size (default: evaluation.rollouts)")
    p.add_argument("--steps", type=int, help="rollout length (default: evaluation.rollout_steps)")

    p = sub.add_parser("evaluate", help="D_KS table, test ELBO and quantile-band plot")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="ground-truth dataset (uses its ensemble split)")
    p.add_argument("--rollouts", type=Path, required=True, help="simulate output, or any dataset directory")
    p.add_argument("--checkpoint", type=Path, help="also report the test-set ELBO of this model")

    p = sub.add_parser("verify-equivariance", help="statistical equivariance test of a model or generator")
    _common(p)
    p.add_argument("--target", choices=("model", "generator", "dummy"), default="model",
                   help="dummy: the n-body generator with an x-shift that breaks rotation equivariance")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, help="dataset supplying test initial states (model target)")
    p.add_argument("--repetitions", type=int, default=1)

    p = sub.add_parser("stability", help="fraction of rollouts still within the stability criterion")
    _common(p)
    p.add_argument("--rollouts", type=Path, required=True, help="simulate output, or any dataset directory")
    p.add_argument("--data", type=Path, required=True, help="training dataset (volume range for cellular)")

    p = sub.add_parser("gradcheck", help="finite-difference check of both models' gradients")
    p.add_argument("--system", choices=C.SYSTEMS, help="check only this system")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="also write the report here")
    p.add_argument("--entries", type=int, default=4, help="entries probed per parameter block")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------- helpers


def _overrides(items: list[str]) -> dict:
    out: dict = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _config(args, system: str | None = None) -> dict:
    over = _overrides(args.set)
    if args.seed is not None:
        over["seed"] = args.seed
    return C.load_config(args.config, preset=args.preset, system=args.system or system, overrides=over)


def _dataset_system(path: Path) -> str:
    return fileio.read_manifest(path)["system"]


def _write_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = f"# config_hash: {C.config_hash(cfg)}\n" + C.dump_config(cfg)
    fileio.atomic_write_bytes(out / "config.yaml", text.encode())


def _write_csv(path: Path, header: list[str], rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def _ensemble(path: Path, split: str | None) -> tuple[np.ndarray, np.ndarray | None]:
    """Arrays of a rollout or dataset directory; truncated cellular frames come back as -1."""
    man = fileio.read_manifest(path)
    if split is None:
        names = {e["split"] for e in man["files"]}
        split = ROLLOUT_SPLIT if ROLLOUT_SPLIT in names else "ensemble"
    s = datasets.load_split(path, split)
    arr = s.arrays
    if s.system == "cellular":
        arr = np.where(arr == U16_MISSING, -1, arr.astype(np.int64))
    return arr, s.cell_types


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    cfg = _config(args)
    splits = [args.split] if args.split else None
    if splits and splits[0] not in datasets.SPLITS:
        raise UsageError(f"unknown split {args.split!r}; choose one of {sorted(datasets.SPLITS)}")
    man = datasets.generate_dataset(cfg, args.out, args.workers, splits)
    _write_config(args.out, cfg)
    print(f"wrote {len(man['files'])} trajectories to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, _dataset_system(args.data))
    train = datasets.load_split(args.data, args.split or "train").training_view()
    val = datasets.load_split(args.data, "val").training_view()
    model = experiments.build_model(cfg, int(cfg["seed"]))
    meta = {"equivariant": getattr(model, "equivariant", True), "system": cfg["system"],
            "config_hash": C.config_hash(cfg)}
    _write_config(args.out, cfg)

    def progress(row):
        log.info("epoch %d recon %.3f kl %.3f beta %.3f val_elbo %.3f", row["epoch"], row["recon"], row["kl"],
                 row["beta"], row["val_elbo"])

    res = training.train(model, train, val, C.train_config(cfg), args.out, resume=args.resume, meta=meta,
                         progress=progress)
    print(f"best validation ELBO {res.best_val:.4f} at epoch {res.best_epoch}; checkpoints in {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args, _dataset_system(args.data))
    model = experiments.load_model(cfg, args.checkpoint)
    split = datasets.load_split(args.data, args.split or "ensemble")
    if not 0 <= args.index < len(split):
        raise UsageError(f"--index {args.index} outside split of {len(split)} trajectories")
    count = args.count or int(cfg["evaluation"]["rollouts"])
    steps = args.steps or int(cfg["evaluation"]["rollout_steps"])
    x0 = experiments.initial_state(split, args.index, args.frame)
    arr = experiments.ensemble_rollout(model, x0, count, steps, int(cfg["seed"]))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, member in enumerate(arr):
        if cfg["system"] == "cellular":
            member = np.where(member < 0, U16_MISSING, member).astype(np.uint16)
        name = f"{ROLLOUT_SPLIT}_{k:04d}.traj"
        e = {"name": name, "split": ROLLOUT_SPLIT, "index": k, "sha256": fileio.write_trajectory_file(out / name,
                                                                                                       member)}
        if cfg["system"] == "cellular":
            e["cell_types"] = split.cell_types[args.index].tolist()
        entries.append(e)
    fileio.write_json(out / "manifest.json", {
        "format_version": fileio.FORMAT_VERSION, "system": cfg["system"], "counts": {ROLLOUT_SPLIT: count},
        "steps": steps, "initial_state": {"data": str(args.data), "split": args.split or "ensemble",
                                          "index": args.index, "frame": args.frame},
        "checkpoint_sha256": fileio.file_sha256(args.checkpoint), "seed": int(cfg["seed"]),
        "config_hash": C.config_hash(cfg), "files": entries})
    _write_config(out, cfg)
    print(f"wrote {count} rollouts of {steps} steps to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args, _dataset_system(args.data))
    gt_arr, gt_types = _ensemble(args.data, "ensemble")
    m_arr, m_types = _ensemble(args.rollouts, args.split)
    gt_vals = experiments.rollout_values(cfg, gt_arr, gt_types)
    m_vals = experiments.rollout_values(cfg, m_arr, m_types)
    horizon = min(gt_vals.shape[1], m_vals.shape[1]) - 1
    times = [int(t) for t in cfg["evaluation"]["dks_times"] if int(t) <= horizon] or [horizon]
    dks = evaluation.dks_at_times(m_vals, gt_vals, times)
    obs = cfg["evaluation"]["observable"]
    _write_csv(args.out / "dks.csv", ["frame", "observable", "dks", "model_members", "gt_members"],
               [[t, obs, f"{dks[t]:.6f}", m_vals.shape[0], gt_vals.shape[0]] for t in times])
    if args.checkpoint is not None:
        model = experiments.load_model(cfg, args.checkpoint)
        test = datasets.load_split(args.data, "test").training_view()
        traj, t = np.meshgrid(np.arange(test.n_traj), np.arange(test.n_frames - 1), indexing="ij")
        bs = int(cfg["training"]["batch_size"])
        with torch.no_grad():
            elbo = training.mean_elbo(model, test, traj.ravel(), t.ravel(), bs, int(cfg["seed"]))
        _write_csv(args.out / "elbo.csv", ["split", "elbo", "pairs"], [["test", f"{elbo:.6f}", traj.size]])
    try:
        n = min(gt_vals.shape[1], m_vals.shape[1])
        plotting.band_plot(args.out / "bands.svg", {"ground truth": gt_vals[:, :n], "model": m_vals[:, :n]}, obs)
    except ValueError as err:   # too few members for quantile bands
        log.warning("no band plot: %s", err)
    _write_config(args.out, cfg)
    print("\n".join(f"D_KS({obs}) at frame {t}: {dks[t]:.4f}" for t in times))
    return EXIT_OK


def cmd_verify_equivariance(args) -> int:
    if args.target == "model":
        if args.checkpoint is None or args.data is None:
            raise UsageError("--target model needs --checkpoint and --data")
        cfg = _config(args, _dataset_system(args.data))
    else:
        cfg = _config(args, args.system or "celestial")
    if args.target == "dummy" and cfg["system"] != "celestial":
        raise UsageError("the dummy target exists for the celestial system only")
    ev = cfg["evaluation"]
    rng = np.random.default_rng([int(cfg["seed"]), 7])
    model = x0s = None
    if args.target == "model":
        model = experiments.load_model(cfg, args.checkpoint)
        split = datasets.load_split(args.data, args.split or "test")
        x0s = _protocol_states(split, int(ev["equivariance_x0s"]))
    rows = []
    for rep in range(args.repetitions):
        if args.target == "model":
            res = experiments.model_protocol(model, cfg, x0s, int(ev["equivariance_steps"]), rng,
                                             int(ev["rollouts_per_x0"]))
        elif cfg["system"] == "celestial":
            res = experiments.celestial_generator_protocol(
                rng, C.generator_config(cfg), int(ev["equivariance_x0s"]), int(ev["equivariance_steps"]),
                int(ev["rollouts_per_x0"]), dummy=args.target == "dummy")
        else:
            res = experiments.cellular_generator_protocol(
                rng, C.generator_config(cfg), int(ev["equivariance_x0s"]), int(ev["equivariance_steps"]),
                int(ev["rollouts_per_x0"]))
        rows.append([rep, args.target, cfg["system"], f"{res.d_ks:.6f}", f"{res.p_value:.6g}", res.n_samples,
                     int(res.low_sample_warning)])
        print(f"repetition {rep}: D_KS {res.d_ks:.4f}  p {res.p_value:.4g}  n {res.n_samples}")
    _write_csv(args.out / "equivariance.csv",
               ["repetition", "target", "system", "dks", "p_value", "samples_per_side", "low_sample_warning"], rows)
    _write_config(args.out, cfg)
    return EXIT_OK


def _protocol_states(split: datasets.Split, count: int) -> list:
    """``count`` initial states spread over the split's trajectories and frames."""
    n_traj, n_frames = split.arrays.shape[:2]
    per = -(-count // n_traj)
    stride = max(1, (n_frames - 1) // per)
    states = []
    for i in range(count):
        k, t = i % n_traj, (i // n_traj) * stride
        states.append(split.frames(k)[t])
    return states


def cmd_stability(args) -> int:
    cfg = _config(args, _dataset_system(args.data))
    arr, types = _ensemble(args.rollouts, args.split)
    crit = experiments.stability_criterion(cfg, datasets.load_split(args.data, "train"))
    frames = experiments.rollout_frames(cfg, arr, types)
    frac = evaluation.stability_fraction(frames, crit, arr.shape[1])
    _write_csv(args.out / "stability.csv", ["frame", "fraction_stable"],
               [[t, f"{f:.6f}"] for t, f in enumerate(frac)])
    plotting.stability_plot(args.out / "stability.svg", {crit.kind: frac})
    _write_config(args.out, cfg)
    print(f"fraction stable at frame {len(frac) - 1}: {frac[-1]:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    systems = [args.system] if args.system else list(C.SYSTEMS)
    lines, ok = [], True
    for system in systems:
        rep = experiments.model_gradcheck(system, args.seed, max_entries=args.entries)
        ok &= rep.passed
        lines.append(f"[{system}] max relative error {rep.worst:.3e} (tolerance {rep.tolerance:g}) "
                     f"{'PASS' if rep.passed else 'FAIL'}")
        lines.extend("  " + line for line in rep.lines())
    text = "\n".join(lines)
    print(text)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        fileio.atomic_write_bytes(args.out / "gradcheck.txt", (text + "\n").encode())
    if not ok:
        raise ValidationFailure("gradient check exceeded tolerance")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "simulate": cmd_simulate, "evaluate": cmd_evaluate,
    "verify-equivariance": cmd_verify_equivariance, "stability": cmd_stability, "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("usage error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except C.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except fileio.IntegrityError as err:
        print(f"checksum mismatch: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValidationFailure as err:
        print(f"validation failed: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, KeyError, ValueError, FloatingPointError, fileio.FormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
