"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Every random quantity derives from ``SEED``; nothing is re-drawn on failure.
Runtime limits are part of the pass condition.
"""
import itertools
import json
import time

import numpy as np

from conftest import random_panel
from ctpanel.cli import main as cli_main
from ctpanel.dag import (
    Dag,
    Node,
    builtin_dag,
    check_scia,
    d_separated,
)
from ctpanel.estimands import EstimandSpec, acr_at, acrw_star, acrw_t
from ctpanel.estimators import ModelSpec, estimate_gmm, estimate_twfe, fit
from ctpanel.inference import ParamTarget, analytical_variance, bootstrap, parameter_se
from ctpanel.panel import PanelDataset, cross_demean, first_difference, within_two_way
from ctpanel.simulate import DgpSpec, McConfig, mc_experiment, simulate_panel
from ctpanel.tau import BUILTIN_FAMILIES
from test_estimators import dummy_ols, iv_closed_form

SEED = 1
STAR = EstimandSpec("ACRW_star")

# feedback design: treatment responds to the previous error, no persistence
# and no unit loading in the latent index
REFERENCE = dict(persistence=0.0, unit_loading=0.0, feedback=0.15)

NOISELESS_PARAMS = {
    "homogeneous": (0.5,),
    "quadratic": (1.0, -0.1),
    "quadratic-interaction": (1.0, -0.1, 0.2),
    "additive-lag": (0.8, 0.3),
    "nonlinear-additive-lag": (-0.1, 0.05),
    "multiplicative-lag": (0.2,),
    "nonlinear-multiplicative-lag": (0.2, -0.03),
}
NOISELESS_MODELS = (("sti", None, "FEC-STI"), ("sti", None, "FEC-SEI"),
                    ("dynamic", 0.5, "DPFEC-SEI"), ("dynamic", 0.5, "DPFEC-STI"))


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {n}: {detail}"


def info(capsys, text):
    with capsys.disabled():
        print(f"\n    info: {text}")


def run_cli(argv, capsys):
    code = cli_main([str(a) for a in argv])
    out, err = capsys.readouterr()
    assert code == 0, err
    return out


# --------------------------------------------------------------------------

def test_criterion_01_transform_annihilation(capsys):
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        N, T = int(rng.integers(2, 21)), int(rng.integers(2, 11))
        a, b = rng.normal(size=N) * 10, rng.normal(size=T) * 10
        p = PanelDataset(rng.normal(size=(N, T)), rng.uniform(0, 4, (N, T)), np.zeros((N, T, 0)))
        s = a[:, None] + b[None, :]
        w = within_two_way(p, s).values
        fd = cross_demean(first_difference(p, s)).values[:, 1:]
        worst = max(worst, np.abs(w).max(), np.abs(fd).max())
    dt = time.perf_counter() - t0
    verdict(capsys, 1, worst <= 1e-10 and dt < 1.0, f"max |residual| = {worst:.2e}, {dt:.2f}s")


def test_criterion_02_estimator_oracles(capsys):
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    worst_twfe = worst_iv = 0.0
    for j in range(100):
        p = random_panel(rng, N=int(rng.integers(6, 15)), T=int(rng.integers(4, 7)),
                         k=int(rng.integers(0, 3)), balanced=bool(j % 2), z=True)
        spec = ModelSpec("FEC-STI", ("homogeneous", "quadratic")[j % 2])
        worst_twfe = max(worst_twfe, np.abs(estimate_twfe(p, spec).params - dummy_ols(p, spec)).max())
        q = random_panel(rng, N=int(rng.integers(8, 30)), T=2, k=1)
        g = estimate_gmm(q, ModelSpec("FEC-SEI", "homogeneous"), weighting="identity")
        worst_iv = max(worst_iv, np.abs(g.params - iv_closed_form(q)).max())
    dt = time.perf_counter() - t0
    ok = worst_twfe <= 1e-8 and worst_iv <= 1e-8 and dt < 5.0
    verdict(capsys, 2, ok, f"TWFE vs dummy OLS {worst_twfe:.2e}, GMM vs IV {worst_iv:.2e}, {dt:.2f}s")


def _noiseless_spec(family, dgp, gamma):
    return DgpSpec(family=dgp, gamma=gamma, tau=family, tau_params=NOISELESS_PARAMS[family],
                   e_sd=0.0, N=200, T=6, seed=SEED)


def test_criterion_03_noiseless_recovery(capsys):
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    for family in sorted(BUILTIN_FAMILIES):
        for dgp, gamma, model in NOISELESS_MODELS:
            s = _noiseless_spec(family, dgp, gamma)
            panel, _ = simulate_panel(s)
            f = fit(panel, ModelSpec(model, family))
            err = float(np.abs(f.params - s.true_phi).max())
            if err >= worst:
                worst, where = err, f"{family}/{model}"
    dt = time.perf_counter() - t0
    verdict(capsys, 3, worst <= 1e-8 and dt < 5.0,
            f"7 families x 4 models, max |phi error| = {worst:.2e} ({where}), {dt:.2f}s")


def _bias_ok(row):
    return abs(row["bias"]) <= 3 * row["mcse_bias"]


def test_criterion_04_consistency(capsys):
    designs = {
        "a: TWFE, STI": (DgpSpec(N=500, T=6, seed=SEED), "FEC-STI"),
        "b: GMM, SEI": (DgpSpec(family="sei", N=500, T=6, seed=SEED, **REFERENCE), "FEC-SEI"),
        "c: dynamic GMM": (DgpSpec(family="dynamic", gamma=0.5, N=500, T=6, seed=SEED, **REFERENCE),
                           "DPFEC-SEI"),
    }
    parts, ok = [], True
    for name, (spec, model) in designs.items():
        t0 = time.perf_counter()
        row = mc_experiment(spec, McConfig(model=model, inference="none"), R=200).estimands["ACRW*"]
        dt = time.perf_counter() - t0
        good = _bias_ok(row) and dt < 120
        ok &= good
        parts.append(f"({name}) bias/MCSE = {row['bias'] / row['mcse_bias']:+.2f} in {dt:.0f}s")
    verdict(capsys, 4, ok, "; ".join(parts))


def test_criterion_05_sei_sti_separation(capsys):
    spec = DgpSpec(family="sei", N=500, T=6, seed=SEED, **REFERENCE)
    t0 = time.perf_counter()
    tw = mc_experiment(spec, McConfig(model="FEC-STI", inference="none"), R=200).estimands["ACRW*"]
    gm = mc_experiment(spec, McConfig(model="FEC-SEI", inference="none"), R=200).estimands["ACRW*"]
    dt = time.perf_counter() - t0
    ok = abs(tw["bias"]) > 5 * tw["mcse_bias"] and _bias_ok(gm) and dt < 120
    verdict(capsys, 5, ok, f"TWFE bias/MCSE = {tw['bias'] / tw['mcse_bias']:+.1f}, "
                           f"GMM bias/MCSE = {gm['bias'] / gm['mcse_bias']:+.2f}, {dt:.0f}s")


def test_criterion_06_bootstrap_coverage(capsys, tmp_path):
    spec = DgpSpec(N=500, T=6, seed=SEED)
    cfg = McConfig(model="FEC-STI", inference="bootstrap", B=500)
    t0 = time.perf_counter()
    full = mc_experiment(spec, cfg, R=500).estimands["ACRW*"]
    dt_full = time.perf_counter() - t0
    # smoke variant through the CLI
    path = tmp_path / "smoke.toml"
    path.write_text(f"N = 500\nT = 6\nseed = {SEED}\n[mc]\nR = 50\nmodel = 'FEC-STI'\n"
                    "inference = 'bootstrap'\nB = 500\n")
    t0 = time.perf_counter()
    smoke = json.loads(run_cli(["mc", "--spec", path, "--no-timestamp"], capsys))
    dt_smoke = time.perf_counter() - t0
    cs = smoke["estimands"]["ACRW*"]["coverage"]
    ok = (0.91 <= full["coverage"] <= 0.99 and dt_full < 1200
          and 0.84 <= cs <= 1.0 and dt_smoke < 120)
    verdict(capsys, 6, ok, f"coverage {full['coverage']:.3f} (R=500, {dt_full:.0f}s); "
                           f"smoke {cs:.3f} (R=50, {dt_smoke:.0f}s)")


def test_criterion_07_normality(capsys):
    runs = {
        "TWFE": (DgpSpec(N=500, T=6, seed=SEED), "FEC-STI"),
        "GMM": (DgpSpec(family="sei", N=500, T=6, seed=SEED, **REFERENCE), "FEC-SEI"),
    }
    parts, ok = [], True
    t0 = time.perf_counter()
    for name, (spec, model) in runs.items():
        row = mc_experiment(spec, McConfig(model=model, inference="analytical"), R=500).estimands["ACRW*"]
        ok &= row["ks_pvalue"] > 0.01
        parts.append(f"{name} KS p = {row['ks_pvalue']:.3f}")
    dt = time.perf_counter() - t0
    ok &= dt < 600
    verdict(capsys, 7, ok, ", ".join(parts) + f", {dt:.0f}s")


def test_criterion_08_variance_paths(capsys):
    spec = DgpSpec(N=500, T=6, seed=SEED)
    panel, _ = simulate_panel(spec)
    model = ModelSpec("FEC-STI", "quadratic")
    a = analytical_variance(fit(panel, model), STAR, panel).se
    b = bootstrap(panel, model, STAR, B=1000, seed=SEED).se
    rel = a / b - 1
    gspec = DgpSpec(family="sei", N=500, T=6, seed=SEED, **REFERENCE)
    gp, _ = simulate_panel(gspec)
    gm = ModelSpec("FEC-SEI", "quadratic")
    ga = analytical_variance(fit(gp, gm), STAR, gp).se
    gb = bootstrap(gp, gm, STAR, B=1000, seed=SEED).se
    info(capsys, f"two-step GMM on the feedback design: analytical {ga:.4f}, bootstrap {gb:.4f} "
                 f"({ga / gb - 1:+.1%})")
    verdict(capsys, 8, abs(rel) <= 0.15,
            f"TWFE analytical SE {a:.4f} vs bootstrap SE {b:.4f} ({rel:+.1%})")


def test_criterion_09_homogeneous_collapse(capsys):
    spec = DgpSpec(tau="homogeneous", tau_params=(0.5,), N=500, T=6, seed=SEED)
    panel, _ = simulate_panel(spec)
    model = ModelSpec("FEC-STI", "homogeneous")
    f = fit(panel, model)
    tau1 = f.params[f.labels.index("d")]
    rng = np.random.default_rng(SEED)
    values = [acrw_star(f, panel)]
    for t in range(1, panel.n_periods + 1):
        values.append(acrw_t(f, panel, t))
        values.append(acr_at(f, panel, t, rng.uniform(0, 4, t)))
    bitwise = all(v == tau1 for v in values)
    star, d = bootstrap(panel, model, [STAR, ParamTarget("d")], B=1000, seed=SEED)
    rel = star.se / d.se - 1
    se_a = parameter_se(f)[f.labels.index("d")]
    same_analytical = analytical_variance(f, STAR, panel).se == se_a
    info(capsys, f"analytical SE of tau_1 {se_a:.5f} vs bootstrap SE of ACRW* {star.se:.5f} "
                 f"({star.se / se_a - 1:+.1%})")
    ok = bitwise and abs(rel) <= 0.02 and same_analytical
    verdict(capsys, 9, ok, f"{len(values)} estimands bitwise equal to tau_1: {bitwise}; "
                           f"bootstrap SE ACRW* / SE tau_1 - 1 = {rel:+.2%}; "
                           f"analytical SEs identical: {same_analytical}")


def test_criterion_10_dag_fixtures(capsys):
    t0 = time.perf_counter()
    s1 = builtin_dag("two_period")
    s2 = builtin_dag("two_period_unit_effect")
    s3 = builtin_dag("two_period_two_way_effects")
    cut = [("Y1", "D2")]
    checks = {
        "two_period SCIA-I holds": check_scia(s1, "scia1").holds,
        "two_period - Y1->D2 SCIA-II holds": check_scia(s1.without_edges(cut), "scia2").holds,
        "unit_effect SCIA-I holds": check_scia(s2, "scia1").holds,
        "unit_effect - Y1->D2 SCIA-II holds": check_scia(s2.without_edges(cut), "scia2").holds,
        "two_way_effects SCIA-I holds": check_scia(s3, "scia1").holds,
        "two_way_effects - Y1->D2 SCIA-II holds": check_scia(s3.without_edges(cut), "scia2").holds,
    }
    for edge in (("V1", "D1"), ("V2", "D2")):
        for g, a in ((s3, "scia1"), (s3.without_edges(cut), "scia2")):
            rep = check_scia(g.with_edges([edge]), a)
            key = f"two_way_effects + {edge[0]}->{edge[1]} {rep.assumption} fails with witness"
            checks[key] = (not rep.holds and all(c.witness for c in rep.failures()))
    dt = time.perf_counter() - t0
    bad = [k for k, v in checks.items() if not v]
    verdict(capsys, 10, not bad and dt < 1.0,
            f"{len(checks) - len(bad)}/{len(checks)} fixture verdicts as stated, {dt:.2f}s"
            + (f"; failing: {bad}" if bad else ""))


def test_criterion_11_dsep_agreement(capsys):
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    queries = disagree = 0
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        names = [f"v{i}" for i in range(n)]
        order = rng.permutation(n)
        p = float(rng.uniform(0.1, 0.6))
        edges = [(names[order[i]], names[order[j]])
                 for i, j in itertools.combinations(range(n), 2) if rng.random() < p]
        g = Dag([Node(v, "latent") for v in names], edges)
        for _ in range(3):
            perm = list(rng.permutation(names))
            k = int(rng.integers(0, n - 1))
            A, B, Z = {perm[0]}, {perm[1]}, set(perm[2:2 + k])
            queries += 1
            if (d_separated(g, A, B, Z, method="enumerate")
                    != d_separated(g, A, B, Z, method="reachability")):
                disagree += 1
    dt = time.perf_counter() - t0
    verdict(capsys, 11, disagree == 0 and dt < 10.0,
            f"{disagree} disagreements over {queries} queries on 1000 DAGs, {dt:.2f}s")


def test_criterion_12_determinism(capsys, tmp_path):
    diffs = []
    # criterion 3 through the CLI: simulate then estimate, twice
    for family in sorted(BUILTIN_FAMILIES):
        for dgp, gamma, model in NOISELESS_MODELS:
            s = _noiseless_spec(family, dgp, gamma)
            spec_path = tmp_path / f"{family}-{model}.json"
            spec_path.write_text(json.dumps(s.to_dict()))
            outs = []
            for rep in range(2):
                data = tmp_path / f"{family}-{model}-{rep}.csv"
                truth = run_cli(["simulate", "--spec", spec_path, "--out", data,
                                 "--no-timestamp"], capsys)
                est = run_cli(["estimate", "--data", data, "--model", model, "--tau", family,
                               "--se", "none", "--no-timestamp"], capsys)
                outs.append((data.read_bytes(), truth, est.replace(str(data), "DATA")))
            if outs[0] != outs[1]:
                diffs.append(f"3:{family}/{model}")
    # criterion 6 smoke
    path = tmp_path / "smoke.toml"
    path.write_text(f"N = 500\nT = 6\nseed = {SEED}\n[mc]\nR = 50\nmodel = 'FEC-STI'\n"
                    "inference = 'bootstrap'\nB = 500\n")
    argv = ["mc", "--spec", path, "--no-timestamp"]
    if run_cli(argv, capsys) != run_cli(argv, capsys):
        diffs.append("6")
    # criterion 10
    for g in ("two_period", "two_period_unit_effect", "two_period_two_way_effects"):
        for a in ("scia1", "scia2"):
            argv = ["dag-check", "--graph", g, "--assumption", a, "--format", "json",
                    "--no-timestamp"]
            if run_cli(argv, capsys) != run_cli(argv, capsys):
                diffs.append(f"10:{g}/{a}")
    verdict(capsys, 12, not diffs, "byte-identical JSON for criteria 3 (28 runs), 6 smoke "
                                   "and 10 (6 runs)" + (f"; differing: {diffs}" if diffs else ""))
