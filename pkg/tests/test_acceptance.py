"""Acceptance gate: one test per numbered criterion, at the stated tolerance.

Each test prints a single summary line (visible with -s; pytest -v shows the
pass/fail status per criterion either way).  Tolerances and sizes are fixed;
do not loosen them here.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import stats

import reference
from glss.clt import (CltModel, FixedPointProvider, TestFunction, glss,
                      glss_contour, theta)
from glss.experiments import ExperimentConfig, run_model, run_scenario
from glss.fptest import _shrink_vector, delta_stat, fp_zscores, shrink_estimate, \
    spike_forward
from glss.functionals import (FunctionalWorkspace, SpikedSums,
                              isotropic_limits, spiked_functionals,
                              spiked_one_point, stieltjes_derivative)
from glss.models import (CovMatrix, build_ancillary, build_population,
                         replication_rng, sample_covariance, sample_data)
from glss.stieltjes import (closed_form_isotropic_m, contour_build,
                            contour_nodes, empirical_stieltjes,
                            mp_fixed_point, mp_inverse_map, support_interval)

TestFunction.__test__ = False

PAIR_FIELDS = ["v1_12", "v1_21", "v2_12", "v2_21", "v3", "u1_12", "u1_21",
               "u2", "a", "dv1_12", "dv1_21", "dv2_12", "dv2_21", "dv3",
               "du1_12", "du1_21", "du2", "da"]


def _scalar(x) -> complex:
    return complex(np.asarray(x).reshape(()))


def _random_population(rng, n):
    kind = rng.choice(["identity", "ar1", "diag_ramp", "custom"])
    if kind == "custom":
        A = rng.standard_normal((n, n))
        return build_population("custom", n, matrix=A @ A.T / n + 0.4 * np.eye(n))
    return build_population(kind, n)


def _random_positive_ancillary(rng, n):
    kind = rng.choice(["diagonal", "dense", "lowrank"])
    if kind == "diagonal":
        return build_ancillary("diagonal", n, diagonal=rng.uniform(0.5, 2.0, n))
    if kind == "dense":
        A = rng.standard_normal((n, n))
        return build_ancillary("dense", n, matrix=A @ A.T / n + 0.3 * np.eye(n))
    Q, _ = np.linalg.qr(rng.standard_normal((n, 3)))
    return build_ancillary("lowrank", n, weights=rng.uniform(0.5, 2.0, 3),
                           vectors=Q)


def test_criterion_01_isotropic_closed_form_and_inverse_round_trip():
    t0 = time.perf_counter()
    H = build_population("identity", 1).spectral_measure()
    # 49 interior nodes per edge plus the 4 duplicated corners = 200 points
    z_pts, _ = contour_nodes(contour_build(0.0, 4.0, nodes_per_edge=49))
    assert z_pts.size == 200
    worst_m = worst_rt = 0.0
    for zk in z_pts:
        val = mp_fixed_point(zk, 1.0, H)
        ref = closed_form_isotropic_m(zk, 1.0)
        worst_m = max(worst_m, abs(val.m - ref) / abs(ref))
        worst_rt = max(worst_rt, abs(mp_inverse_map(val.m_under, 1.0, H) - zk))
    elapsed = time.perf_counter() - t0
    assert worst_m <= 1e-10
    assert worst_rt <= 1e-7
    assert elapsed < 1.0
    print(f"criterion 1: PASS (closed-form dev {worst_m:.2e}, "
          f"round trip {worst_rt:.2e}, {elapsed:.2f}s)")


def test_criterion_02_spectral_and_contour_glss_agree():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20260815)
    fs = [TestFunction.from_name(s) for s in ("z", "z^2", "z^3")]
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 51))
        N = int(rng.integers(max(3, n // 2), 2 * n + 1))
        pop = _random_population(rng, n)
        anc = _random_positive_ancillary(rng, n)
        X = sample_data("gaussian", n, N, rng)
        S = sample_covariance(pop, X)
        for f in fs:
            spectral = glss(S, anc, f)
            contour = glss_contour(S, anc, f)
            worst = max(worst, abs(spectral - contour) / abs(spectral))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-6
    assert elapsed < 30.0
    print(f"criterion 2: PASS (worst rel dev {worst:.2e} over 100 instances, "
          f"{elapsed:.1f}s)")


def test_criterion_03_constant_function_vanishes_identically():
    rng = np.random.default_rng(3)
    one = TestFunction.from_name("1")
    worst_theta = worst_delta = 0.0
    for _ in range(50):
        n = int(rng.integers(20, 61))
        N = int(rng.integers(max(10, n // 2), 2 * n + 1))
        pop = _random_population(rng, n)
        anc = _random_positive_ancillary(rng, n)
        X = sample_data("gaussian", n, N, rng)
        S = sample_covariance(pop, X)
        c_n = n / N
        d_minus, d_plus = support_interval(pop.eigenvalues, c_n)
        contour = contour_build(d_minus, d_plus, nodes_per_edge=128)
        provider = FixedPointProvider(pop.spectral_measure(), c_n)
        worst_theta = max(worst_theta,
                          abs(theta(S, anc, one, contour, pop, provider)))

        r = int(rng.integers(1, 4))
        Q, _ = np.linalg.qr(rng.standard_normal((n, r)))
        cov = CovMatrix.from_matrix(S, N)
        worst_delta = max(worst_delta, abs(delta_stat(cov, Q, one)))
    assert worst_theta <= 1e-5
    assert worst_delta <= 1e-5
    print(f"criterion 3: PASS (max |theta(1)| {worst_theta:.2e}, "
          f"max |delta(1)| {worst_delta:.2e} over 50 configs)")


def test_criterion_04_functionals_match_dense_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0

    def track(got, want):
        nonlocal worst
        worst = max(worst, abs(got - want) / max(1.0, abs(want)))
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))

    for trial in range(50):
        n = int(rng.integers(4, 9))
        N = int(rng.integers(n, 2 * n + 4))
        z1 = complex(rng.uniform(-2, 2), rng.uniform(0.3, 2))
        z2 = complex(rng.uniform(-2, 2), -rng.uniform(0.3, 2))
        mu1 = complex(rng.uniform(-1, 1), rng.uniform(0.2, 1))
        mu2 = complex(rng.uniform(-1, 1), -rng.uniform(0.2, 1))

        pop = _random_population(rng, n)
        anc = _random_positive_ancillary(rng, n)
        ws = FunctionalWorkspace(pop, anc, N)
        sigma, B = pop.matrix(), anc.matrix()

        got_pair = ws.pair(z1, mu1, z2, mu2)
        want_pair = reference.dense_pair(sigma, B, z1, mu1, z2, mu2, N)
        for key in PAIR_FIELDS:
            track(_scalar(getattr(got_pair, key)), want_pair[key])

        got_one = ws.one_point([z1], [mu1])
        want_one = reference.dense_one_point(sigma, B, z1, mu1, N)
        for key in ("p", "q", "g", "gamma2", "gamma3"):
            track(complex(getattr(got_one, key)[0]), want_one[key])

        if anc.is_lowrank:
            h1, h2 = ws.lowrank_pair_grid([z1], [mu1], [z2], [mu2])
            w1, w2 = reference.dense_lowrank(sigma, B, z1, mu1, z2, mu2, N,
                                             anc.k)
            track(complex(h1[0, 0]), w1)
            track(complex(h2[0, 0]), w2)

        r = int(rng.integers(1, min(4, n)))
        d = np.sort(rng.uniform(1.0, 6.0, r))[::-1].copy()
        Q, _ = np.linalg.qr(rng.standard_normal((n, r)))
        spiked_sigma = reference.spiked_sigma(Q, d, n)
        B1 = reference.spiked_weight_matrix(Q, z1, mu1, n, N, r)
        B2 = reference.spiked_weight_matrix(Q, z2, mu2, n, N, r)
        got_sp = spiked_functionals([z1], [mu1], [z2], [mu2], n, N, r, d,
                                    SpikedSums.from_projection(Q))
        want_sp = reference.dense_pair(spiked_sigma, None, z1, mu1, z2, mu2,
                                       N, B1=B1, B2=B2)
        for key in PAIR_FIELDS:
            if key == "a":  # closed form replaces the trace by its exact limit
                continue
            track(_scalar(getattr(got_sp, key)), want_sp[key])

        p, q, g, _ = spiked_one_point([z1], [mu1], n, N, r, d)
        want_sp1 = reference.dense_one_point(spiked_sigma, B1, z1, mu1, N)
        for got, key in ((p[0], "p"), (q[0], "q"), (g[0], "g")):
            track(complex(got), want_sp1[key])
    print(f"criterion 4: PASS (worst rel dev {worst:.2e} over 50 instances)")


def test_criterion_05_finite_size_functionals_converge_to_limits():
    c = 0.5
    z1, z2 = 1.2 + 0.8j, 0.9 - 0.6j
    H = build_population("identity", 4).spectral_measure()
    mu1 = mp_fixed_point(z1, c, H).m_under
    mu2 = mp_fixed_point(z2, c, H).m_under
    lim = isotropic_limits(z1, z2, mu1, mu2,
                           stieltjes_derivative(z1, c, H),
                           stieltjes_derivative(z2, c, H))
    reps = 6
    errors = {}
    for n in (500, 1000, 2000):
        N = 2 * n
        pop = build_population("identity", n)
        ws = FunctionalWorkspace(pop, build_ancillary("identity", n), N)
        acc = np.zeros(3)
        for rep in range(reps):
            X = sample_data("gaussian", n, N, replication_rng(0, rep, stream=0))
            lam = np.linalg.eigvalsh(sample_covariance(pop, X))
            _, e1 = empirical_stieltjes(lam, n, N, z1)
            _, e2 = empirical_stieltjes(lam, n, N, z2)
            one = ws.one_point([z1], [e1])
            pair = ws.pair(z1, e1, z2, e2)
            acc += [abs(complex(one.p[0]) - lim["p1"]) / abs(lim["p1"]),
                    abs(_scalar(pair.u1_12) - lim["u1"]) / abs(lim["u1"]),
                    abs(_scalar(pair.v3) - lim["v3"]) / abs(lim["v3"])]
        errors[n] = acc / reps
    for j, name in enumerate(("P", "U1", "V3")):
        assert errors[2000][j] <= 0.05, name
        assert errors[500][j] > errors[1000][j] > errors[2000][j], name
    table = "; ".join(
        f"{name} {errors[500][j]:.2%} > {errors[1000][j]:.2%} > "
        f"{errors[2000][j]:.2%}" for j, name in enumerate(("P", "U1", "V3")))
    print(f"criterion 5: PASS ({table})")


def test_criterion_06_model_suite_desk_scale_moments():
    t0 = time.perf_counter()
    lines = []
    problems = []
    for k in range(1, 9):
        cfg = ExperimentConfig(experiment=f"model_{k}", seed=0, figures=False)
        mom = run_model(k, cfg).moments["z^2"]
        lines.append(f"model {k}: mean {mom.mean_hat:+.4f} "
                     f"var {mom.var_hat:.4f} ks_p {mom.ks_p:.3f}")
        if abs(mom.mean_hat) > 0.15:
            problems.append(f"model {k} mean {mom.mean_hat:+.4f}")
        if abs(mom.var_hat - 1.0) > 0.2:
            problems.append(f"model {k} var {mom.var_hat:.4f}")
        if mom.ks_p < 0.01:
            problems.append(f"model {k} ks_p {mom.ks_p:.4f}")
    elapsed = time.perf_counter() - t0
    assert not problems, problems
    assert elapsed < 900.0
    print(f"criterion 6: PASS ({'; '.join(lines)}; {elapsed:.0f}s)")


def test_criterion_07_projection_test_sizes_desk_scale():
    sizes = {}
    runs = [
        ("I-gaussian", "I", dict(phi_grid=(0.0,))),
        ("I-student_t", "I", dict(phi_grid=(0.0,), dist="student_t")),
        ("II", "II", dict(r_grid=(7, 11))),
    ]
    for label, which, extra in runs:
        cfg = ExperimentConfig(experiment=f"scenario_{which}", seed=0,
                               fs=("z^2", "z^3"), alpha=0.1, figures=False,
                               **extra)
        res = run_scenario(which, cfg)
        for cell in res.power:
            key = f"{label}" + (f" r={cell.r}" if which == "II" else "")
            sizes[f"{key} {cell.f}"] = cell.power
    bad = {k: v for k, v in sizes.items() if not 0.06 <= v <= 0.14}
    assert not bad, bad
    table = "; ".join(f"{k} {v:.3f}" for k, v in sizes.items())
    print(f"criterion 7: PASS ({table})")


def test_criterion_08_projection_test_power_trend():
    cfg = ExperimentConfig(experiment="scenario_I", M=300, seed=0,
                           fs=("z^3",), alpha=0.1,
                           phi_grid=(0.1, 0.4, 0.8), figures=False)
    res = run_scenario("I", cfg)
    power = {cell.grid: cell.power for cell in res.power}
    assert power[0.4] - power[0.1] >= 0.2
    assert power[0.8] >= 0.95
    print(f"criterion 8: PASS (power 0.1->{power[0.1]:.3f}, "
          f"0.4->{power[0.4]:.3f}, 0.8->{power[0.8]:.3f})")


def test_criterion_09_shrinkage_inverts_spike_map_and_thresholds():
    worst = 0.0
    for c in (0.5, 1.0, 2.0):
        for d in (1.5, 2.0, 5.0, 9.0):
            lam = float(spike_forward(np.array([d]), c)[0])
            back = shrink_estimate(np.array([lam]), c, delta=1e-3)
            assert back.size == 1
            worst = max(worst, abs(float(back[0]) - d))
        edge = (1.0 + np.sqrt(c)) ** 2
        below = edge + 0.1 - 1e-9
        above = edge + 0.1 + 1e-6
        assert shrink_estimate(np.array([below]), c, delta=0.1).size == 0
        vec = _shrink_vector(np.array([above, below]), c, delta=0.1)
        assert vec[1] == 0.0 and vec[0] > 0.0
    assert worst <= 1e-10
    print(f"criterion 9: PASS (worst round-trip dev {worst:.2e}; "
          f"sub-threshold eigenvalues map to exactly 0)")


def test_criterion_10_byte_identical_csvs_across_thread_counts(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(
        {"n": 60, "N": 60, "M": 12, "seed": 5, "fs": ["z^2", "z^3"]}))
    blobs = []
    for threads in ("1", "2", "4"):
        out = tmp_path / f"t{threads}"
        proc = subprocess.run(
            [sys.executable, "-m", "glss.cli", "model", "2",
             "--config", str(cfg_path), "--out", str(out),
             "--threads", threads, "--no-figures"],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        blobs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert blobs[0] == blobs[1] == blobs[2]
    assert set(blobs[0]) == {"summary.csv", "hist.csv", "hist_z3.csv",
                             "qq.csv", "qq_z3.csv", "failures.csv"}
    print("criterion 10: PASS (6 CSVs byte-identical at threads 1, 2, 4)")
