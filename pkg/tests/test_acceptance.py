"""Acceptance suite: one test, and one summary line, per criterion.

Criteria 6 and 7 train desk-scale models (hours on one CPU).  Their results
are cached under ``$EPNS_ACCEPTANCE_DIR`` (default ``~/.cache/epns/acceptance``)
keyed by the run-config hash; set ``EPNS_ACCEPTANCE_FRESH=1`` to retrain.
"""
import math
import time

import numpy as np
import pytest
import torch

import oracles
from acceptance_report import record
from epns import config as C
from epns import cpm, datasets, evaluation, experiments, nbody, nets
from epns import numerics as nx
from epns.models.celestial import BodyBatch, CelestialEPNS
from epns.models.cellular import CellBatch, CellularEPNS, node_permutation


def worst(pairs):
    return max(float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) for a, b in pairs)


# ---------------------------------------------------------------- 1. exact equivariance


def test_criterion_1_exact_equivariance():
    t0 = time.time()
    rng = np.random.default_rng(101)
    torch.manual_seed(0)
    p = torch.as_tensor(rng.normal(size=(6, 3)) * 2)
    v = torch.as_tensor(rng.normal(size=(6, 3)))
    s = torch.as_tensor(rng.normal(size=(6, 2)))
    equi = nets.FAGNN(scalar_in=2, edge_in=2, hidden=16, layers=2, n_vectors=2, point_outputs=(False, True)).double()
    inv = nets.FAGNN(scalar_in=2, edge_in=2, hidden=16, layers=2).double()
    fagnn_err = 0.0
    with torch.no_grad():
        a_inv, a_vec = equi(s, p, v, nets.edge_scalars(p, v))
        b_inv, _ = inv(s, p, v, nets.edge_scalars(p, v))
        for _ in range(100):
            R = torch.as_tensor(nbody.random_rotation(rng, reflections=True))
            t = torch.as_tensor(rng.normal(size=3) * 3)
            p2, v2 = p @ R.T + t, v @ R.T
            e2 = nets.edge_scalars(p2, v2)
            c_inv, c_vec = equi(s, p2, v2, e2)
            d_inv, _ = inv(s, p2, v2, e2)
            fagnn_err = max(fagnn_err, worst([(c_inv, a_inv), (c_vec[:, 0], a_vec[:, 0] @ R.T),
                                              (c_vec[:, 1], a_vec[:, 1] @ R.T + t), (d_inv, b_inv)]))

    # full SpatialConv stack of the cellular model, float64
    cell_model = CellularEPNS(embed=4, message=3, unet_widths=(3, 4, 4), encoder_width=3, latent=3,
                              message_kernel=3, unet_kernel=3, encoder_kernel=3, latent_channels=2,
                              dtype=torch.float64)
    gen = cpm.CPMConfig(h=16, w=16, n_cells=6, target_volume=16, burn_in=2, mcs_per_frame=1)
    x = CellBatch.from_lattices([cpm.init_random_culture(gen, rng)])
    conv_err = 0.0
    with torch.no_grad():
        emb = cell_model.forward_embed(x)
        for _ in range(100):
            perm = rng.permutation(6)
            emb2 = cell_model.forward_embed(x.relabeled(perm))
            conv_err = max(conv_err, worst([(emb2.h, emb.h[:, node_permutation(perm)])]))

    # one-step matched-randomness sampling of both full models
    cel = CelestialEPNS(hidden=12, latent=4, forward_layers=2, prior_layers=1, decoder_layers=1)
    with torch.no_grad():
        for q in cel.parameters():
            q.add_(0.05 * torch.randn_like(q))
    states = [nbody.sample_initial_condition(nbody.NBodyConfig(), rng) for _ in range(3)]
    xb = BodyBatch.from_array(np.stack([st.to_array() for st in states]))
    step_err, cell_exact = 0.0, True
    with torch.no_grad():
        for _ in range(20):
            noise = cel.draw_noise(xb, torch.Generator().manual_seed(int(rng.integers(1 << 30))))
            R, t, perm = nbody.random_rotation(rng, reflections=True), rng.normal(size=3), rng.permutation(5)
            Rt = torch.as_tensor(R)
            moved = {"z": noise["z"], "x": torch.cat([noise["x"][..., :3] @ Rt.T, noise["x"][..., 3:] @ Rt.T],
                                                     -1)[:, perm]}
            y = cel.one_step_sample(xb, noise).transformed(R, t, perm)
            y2 = cel.one_step_sample(xb.transformed(R, t, perm), moved)
            step_err = max(step_err, worst([(y2.positions, y.positions), (y2.velocities, y.velocities)]))
        for mode in ("argmax", "categorical"):
            cell_model.sample_mode = mode
            for _ in range(20):
                noise = cell_model.draw_noise(x, torch.Generator().manual_seed(int(rng.integers(1 << 30))))
                perm = rng.permutation(6)
                idx = node_permutation(perm)
                y = cell_model.one_step_sample(x, noise).relabeled(perm)
                y2 = cell_model.one_step_sample(x.relabeled(perm), {k: val[:, idx] for k, val in noise.items()})
                cell_exact &= bool(torch.equal(y.sites, y2.sites))
    elapsed = time.time() - t0
    ok = fagnn_err < 1e-8 and conv_err < 1e-12 and step_err < 1e-6 and cell_exact and elapsed < 120
    record(1, ok, f"FA-GNN {fagnn_err:.1e} (<1e-8), SpatialConv {conv_err:.1e} (<1e-12), celestial step "
                  f"{step_err:.1e} (<1e-6), cellular step exact={cell_exact}, {elapsed:.0f}s (<120s)")
    assert ok


# ---------------------------------------------------------------- 2. gradients


def test_criterion_2_gradient_correctness():
    t0 = time.time()
    reports = {s: experiments.model_gradcheck(s, seed=0, max_entries=4) for s in C.SYSTEMS}
    rng = np.random.default_rng(202)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 4))
    x, w = rng.normal(size=(3, 9, 8)), rng.normal(size=(4, 3, 3, 3))
    oracle_err = max(
        worst([(nx.matmul(nx.tensor(a), nx.tensor(b)).numpy(), oracles.matmul_loop(a, b))]),
        worst([(nx.conv2d(nx.tensor(x), nx.tensor(w), stride=s, padding=pd).numpy(),
                oracles.conv2d_loop(x, w, s, pd)) for s, pd in ((1, 1), (2, 0), (2, 1))]),
        worst([(nx.pool2d(nx.tensor(x), kind, 2).numpy(), oracles.pool2d_loop(x, kind, 2)) for kind in ("max",
                                                                                                    "mean")]))
    elapsed = time.time() - t0
    ok = all(r.passed for r in reports.values()) and oracle_err < 1e-12 and elapsed < 300
    grad = ", ".join(f"{s} worst rel {r.worst:.1e} over {len(r.max_rel_err)} blocks" for s, r in reports.items())
    record(2, ok, f"{grad} (<1e-4); conv/pool/matmul vs loops {oracle_err:.1e} (<1e-12), {elapsed:.0f}s (<300s)")
    assert ok, "\n".join(line for r in reports.values() for line in r.lines())


# ---------------------------------------------------------------- 3. generator oracles


def test_criterion_3_generator_oracles():
    rng = np.random.default_rng(303)
    gen = cpm.CPMConfig(h=16, w=16, n_cells=5, target_volume=20, burn_in=3, mcs_per_frame=1)
    lat = cpm.init_random_culture(gen, rng)
    types = {i: int(t) for i, t in enumerate(lat.cell_types) if i}
    base = oracles.hamiltonian_loop(lat.sites, types, gen.J, gen.volume_weight, gen.target_volume)
    dh_err, tried = 0.0, 0
    while tried < 10_000:
        r, c = int(rng.integers(16)), int(rng.integers(16))
        dr, dc = oracles.MOORE[int(rng.integers(8))]
        if not (0 <= r + dr < 16 and 0 <= c + dc < 16):
            continue
        new = int(lat.sites[r + dr, c + dc])
        trial = lat.sites.copy()
        trial[r, c] = new
        full = oracles.hamiltonian_loop(trial, types, gen.J, gen.volume_weight, gen.target_volume) - base
        dh_err = max(dh_err, abs(cpm.delta_h(lat, (r, c), new, gen) - full))
        tried += 1

    ncfg = nbody.NBodyConfig()
    state = nbody.sample_initial_condition(ncfg, rng)
    acc_err = worst([(nbody.pairwise_acceleration(state, ncfg),
                      oracles.acceleration_loop(state.positions.tolist(), state.masses.tolist(), ncfg.grav_const,
                                                ncfg.softening))])

    u = rng.random(100_000)
    rate = float(np.mean([cpm.metropolis_accept(1.0, 1.0, ui) for ui in u]))
    rate_ok = abs(rate / math.exp(-1) - 1) < 0.02

    quiet = nbody.NBodyConfig(noise_scale=0.0)
    s1 = nbody.simulate(state, quiet, 5, np.random.default_rng(1))[-1]
    s2 = nbody.simulate(state, quiet, 5, np.random.default_rng(2))[-1]
    deterministic = np.array_equal(s1.positions, s2.positions) and np.array_equal(s1.velocities, s2.velocities)

    def integrate(dt, t_end=0.5):
        s = state
        c = nbody.NBodyConfig(noise_scale=0.0, dt=dt)
        for _ in range(int(round(t_end / dt))):
            s = nbody.euler_maruyama_step(s, c)
        return s.positions

    ref = integrate(1e-6)
    errs = [np.abs(integrate(dt) - ref).max() for dt in (1e-2, 1e-3, 1e-4)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    conv_ok = all(8 <= q <= 12 for q in ratios)
    ok = dh_err < 1e-9 and acc_err < 1e-12 and rate_ok and deterministic and conv_ok
    record(3, ok, f"dH {dh_err:.1e} over {tried} proposals (<1e-9), acceleration {acc_err:.1e} (<1e-12), "
                  f"acceptance {rate:.4f} vs e^-1 {math.exp(-1):.4f} (2%), sigma=0 deterministic={deterministic}, "
                  f"error ratios {ratios[0]:.2f}/{ratios[1]:.2f} per tenfold dt cut (8..12)")
    assert ok


# ---------------------------------------------------------------- 4. KS machinery


def test_criterion_4_statistical_machinery():
    d_hand = evaluation.ks_statistic([1, 2, 3, 4], [3, 4, 5, 6])
    crit = 1.36 * math.sqrt(2 / 100)
    p_crit = evaluation.ks_two_sample_pvalue(crit, 100, 100)
    # one 200-member ground-truth ensemble of final kinetic energies from a fixed x0
    ncfg = nbody.NBodyConfig()
    rng = np.random.default_rng(404)
    x0 = nbody.sample_initial_condition(ncfg, rng)
    batch = nbody.BodyState(np.repeat(x0.masses[None], 200, 0), np.repeat(x0.positions[None], 200, 0),
                            np.repeat(x0.velocities[None], 200, 0))
    ke = nbody.kinetic_energy(nbody.simulate(batch, ncfg, 20, rng)[-1])
    below = 0
    for _ in range(100):
        order = rng.permutation(200)
        below += evaluation.ks_statistic(ke[order[:100]], ke[order[100:]]) < crit
    ok = d_hand == 0.5 and abs(p_crit - 0.05) <= 0.01 and below >= 90
    record(4, ok, f"hand case {d_hand} (=0.5), p(0.192; 100, 100) = {p_crit:.4f} (0.05+-0.01), "
                  f"self-test below 0.192 in {below}/100 (>=90)")
    assert ok


# ---------------------------------------------------------------- 5. equivariance protocol sanity


def test_criterion_5_protocol_sanity():
    t0 = time.time()
    cel = [experiments.celestial_generator_protocol(np.random.default_rng([505, k])).p_value for k in range(10)]
    dummy = [experiments.celestial_generator_protocol(np.random.default_rng([506, k]), dummy=True).p_value
             for k in range(10)]
    cell = [experiments.cellular_generator_protocol(np.random.default_rng([507, k]), n_x0=20, steps=2).p_value
            for k in range(10)]
    elapsed = time.time() - t0
    n_cel, n_cell = sum(p > 0.01 for p in cel), sum(p > 0.01 for p in cell)
    n_dummy = sum(p < 0.01 for p in dummy)
    ok = n_cel >= 9 and n_cell >= 9 and n_dummy >= 9 and elapsed < 600
    record(5, ok, f"n-body generator p>0.01 in {n_cel}/10, CPM generator p>0.01 in {n_cell}/10, "
                  f"dummy p<0.01 in {n_dummy}/10 (each >=9), {elapsed:.0f}s (<600s)")
    assert ok


# ---------------------------------------------------------------- 6, 7. training smoke runs


def _seed_summary(rows, keys):
    return "; ".join(f"seed {r['seed']}: " + ", ".join(f"{k}={r[k]:.4g}" for k in keys) +
                     f" -> {'pass' if r['passed'] else 'fail'}" for r in rows)


@pytest.mark.slow
def test_criterion_6_celestial_smoke():
    res = experiments.celestial_smoke()
    detail = _seed_summary(res["seeds"], ["val_init", "val_quarter", "kl_final", "dks_trained", "dks_untrained",
                                          "dks_pns"])
    record(6, res["passed"], f"best of {len(res['seeds'])} seed(s): {detail}")
    assert res["passed"]


@pytest.mark.slow
def test_criterion_7_cellular_smoke():
    res = experiments.cellular_smoke()
    detail = _seed_summary(res["seeds"], ["val_init", "val_best", "clusters_frame0", "clusters_frame40",
                                          "stability_at_2k"])
    record(7, res["passed"], f"best of {len(res['seeds'])} seed(s): {detail}")
    assert res["passed"]


# ---------------------------------------------------------------- 8. stability semantics


def test_criterion_8_stability_on_ground_truth():
    work = experiments.acceptance_dir()
    minima = {}
    for system in C.SYSTEMS:
        cfg = C.load_config(system=system)
        data_dir = work / f"{system}_data_{C.data_hash(cfg)}"
        experiments.ensure_dataset(cfg, data_dir)
        train = datasets.load_split(data_dir, "train")
        crit = experiments.stability_criterion(cfg, train)
        splits = ("train", "val", "test", "ensemble") if system == "celestial" else ("train",)
        for split in splits:
            data = datasets.load_split(data_dir, split)
            frac = evaluation.stability_fraction([data.frames(k) for k in range(len(data))], crit)
            minima[f"{system}/{split}"] = float(frac.min())
    ok = all(m == 1.0 for m in minima.values())
    record(8, ok, "minimum fraction stable: " + ", ".join(f"{k} {v:.3f}" for k, v in minima.items()) + " (=1.0)")
    assert ok
