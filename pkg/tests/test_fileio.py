import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from epns import datasets, fileio
from epns import config as C


# ---------------------------------------------------------------- trajectory files


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_float_trajectory_roundtrip_is_bitwise(arr):
    back = fileio.decode_trajectory(fileio.encode_trajectory(arr))
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_uint16_roundtrip_and_exact_size(tmp_path, rng):
    arr = rng.integers(0, 65536, size=(7, 12, 12)).astype(np.uint16)
    digest = fileio.write_trajectory_file(tmp_path / "a.traj", arr)
    blob = (tmp_path / "a.traj").read_bytes()
    assert len(blob) == 12 + 4 * 2 + arr.nbytes
    assert blob[:4] == b"EPNS"
    assert np.array_equal(fileio.read_trajectory_file(tmp_path / "a.traj", digest), arr)


def test_header_layout_is_little_endian():
    blob = fileio.encode_trajectory(np.zeros((3, 2, 5)))
    assert struct.unpack("<4sHBBI2I", blob[:20]) == (b"EPNS", fileio.FORMAT_VERSION, 0, 2, 3, 2, 5)


@pytest.mark.parametrize("cut", [3, 12, 19, 40])
def test_truncated_file_is_a_clean_error(cut):
    blob = fileio.encode_trajectory(np.ones((2, 3)))
    with pytest.raises(fileio.FormatError):
        fileio.decode_trajectory(blob[:cut])


def test_bad_magic_dtype_and_version():
    good = bytearray(fileio.encode_trajectory(np.ones((2, 3))))
    with pytest.raises(fileio.FormatError, match="magic"):
        fileio.decode_trajectory(b"NOPE" + bytes(good[4:]))
    bumped = bytearray(good)
    struct.pack_into("<H", bumped, 4, fileio.FORMAT_VERSION + 1)
    with pytest.raises(fileio.FormatError, match="regenerate"):
        fileio.decode_trajectory(bytes(bumped))
    with pytest.raises(fileio.FormatError):
        fileio.encode_trajectory(np.ones(3, dtype=np.float32))


def test_checksum_mismatch(tmp_path):
    fileio.write_trajectory_file(tmp_path / "a.traj", np.ones((2, 2)))
    with pytest.raises(fileio.IntegrityError):
        fileio.read_trajectory_file(tmp_path / "a.traj", "0" * 64)


def test_failed_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    def boom(*_):
        raise OSError("disk full")
    monkeypatch.setattr(fileio.os, "replace", boom)
    with pytest.raises(OSError):
        fileio.write_trajectory_file(tmp_path / "a.traj", np.ones((2, 2)))
    assert list(tmp_path.iterdir()) == []


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"a.weight": rng.normal(size=(3, 4)), "b": rng.normal(size=2).astype(np.float32)}
    opt = {"m": {"a.weight": rng.normal(size=(3, 4))}, "step": 7}
    fileio.save_checkpoint(tmp_path / "c.ckpt", params, opt, {"epoch": 3})
    p2, o2, meta = fileio.load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"epoch": 3} and o2["step"] == 7
    for k, v in params.items():
        assert p2[k].dtype == v.dtype and p2[k].tobytes() == v.tobytes()
    assert np.array_equal(o2["m"]["a.weight"], opt["m"]["a.weight"])
    fileio.save_checkpoint(tmp_path / "d.ckpt", params)
    assert fileio.load_checkpoint(tmp_path / "d.ckpt")[1] is None


def test_truncated_checkpoint_and_version_hint(tmp_path):
    fileio.save_checkpoint(tmp_path / "c.ckpt", {"w": np.ones(3)})
    blob = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(fileio.FormatError):
        fileio.load_checkpoint(tmp_path / "t.ckpt")
    info = json.dumps({"version": 99, "meta": {}, "opt_scalars": {}}).encode()
    np.savez(tmp_path / "v.npz", __info__=np.frombuffer(info, dtype=np.uint8))
    with pytest.raises(fileio.FormatError, match="retrain"):
        fileio.load_checkpoint(tmp_path / "v.npz")


# ---------------------------------------------------------------- datasets


def small_cfg(system):
    over = {"dataset": {"train": 2, "val": 1, "test": 1, "ensemble": 2}}
    if system == "celestial":
        over["generator"] = {"frames": 5}
    else:
        over["generator"] = {"h": 16, "w": 16, "n_cells": 4, "target_volume": 16, "frames": 4, "burn_in": 1,
                             "mcs_per_frame": 1}
    return C.load_config(system=system, overrides=over)


@pytest.mark.parametrize("system", ["celestial", "cellular"])
def test_dataset_bytes_do_not_depend_on_workers(tmp_path, system):
    cfg = small_cfg(system)
    m1 = datasets.generate_dataset(cfg, tmp_path / "one", workers=1)
    m2 = datasets.generate_dataset(cfg, tmp_path / "two", workers=2)
    assert m1 == m2
    for e in m1["files"]:
        assert (tmp_path / "one" / e["name"]).read_bytes() == (tmp_path / "two" / e["name"]).read_bytes()
    assert (tmp_path / "one" / "manifest.json").read_bytes() == (tmp_path / "two" / "manifest.json").read_bytes()


def test_dataset_load_and_integrity(tmp_path):
    cfg = small_cfg("cellular")
    man = datasets.generate_dataset(cfg, tmp_path)
    assert man["config_hash"] == C.data_hash(cfg) and man["counts"]["train"] == 2
    train = datasets.load_split(tmp_path, "train")
    assert train.arrays.shape == (2, 5, 16, 16) and train.cell_types.shape == (2, 5)
    frames = train.frames(0)
    assert frames[0].sites.shape == (16, 16) and frames[0].n_cells == 4
    ens = datasets.load_split(tmp_path, "ensemble")
    assert np.array_equal(ens.arrays[0, 0], ens.arrays[1, 0])          # shared initial condition
    assert not np.array_equal(ens.arrays[0, -1], ens.arrays[1, -1])
    victim = tmp_path / man["files"][0]["name"]
    blob = victim.read_bytes()
    victim.write_bytes(blob[:-1] + bytes([blob[-1] ^ 1]))
    with pytest.raises(fileio.IntegrityError):
        datasets.load_split(tmp_path, "train")
    with pytest.raises(KeyError):
        datasets.load_split(tmp_path, "holdout")


def test_manifest_version_refused(tmp_path):
    fileio.write_json(tmp_path / "manifest.json", {"format_version": 0, "files": []})
    with pytest.raises(fileio.FormatError, match="regenerate"):
        fileio.read_manifest(tmp_path)


def test_worker_env_override(monkeypatch):
    monkeypatch.setenv(datasets.WORKERS_ENV, "3")
    assert datasets.default_workers() == 3
    monkeypatch.setenv(datasets.WORKERS_ENV, "many")
    assert datasets.default_workers() == 1
