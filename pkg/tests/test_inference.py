import warnings

import numpy as np
import pytest

import ctpanel.inference as inf
from ctpanel.errors import (
    DegenerateVarianceWarning,
    EstimationError,
    NotApplicableError,
    ResamplingFragilityError,
    SpecificationError,
    WrongPathError,
)
from ctpanel.estimands import EstimandSpec, acrw_star
from ctpanel.estimators import ModelSpec, fit
from ctpanel.inference import (
    ParamTarget,
    analytical_variance,
    bootstrap,
    hansen_j,
    parameter_se,
)
from ctpanel.panel import PanelDataset
from ctpanel.simulate import DgpSpec, simulate_panel

STAR = EstimandSpec("ACRW_star")


def sei_reference(seed, N=500, T=6, tau="homogeneous", params=(1.0,)):
    return DgpSpec(family="sei", tau=tau, tau_params=params, persistence=0.0,
                   unit_loading=0.0, feedback=0.15, N=N, T=T, seed=seed)


def noiseless_panel(rng, N=40, T=5, tau=0.7, beta=1.3):
    D = rng.uniform(0, 4, (N, T))
    X = rng.normal(size=(N, T, 1))
    Y = beta * X[..., 0] + tau * D + rng.normal(size=(N, 1)) + rng.normal(size=(1, T))
    return PanelDataset(Y, D, X, covariate_names=("x1",))


@pytest.fixture(scope="module")
def sti_panel():
    return simulate_panel(DgpSpec(N=200, T=5, seed=3))[0]


@pytest.mark.parametrize("model,panel_kw", [
    ("FEC-STI", dict(seed=3)),
    ("FEC-SEI", dict(family="sei", persistence=0.0, unit_loading=0.0, feedback=0.15, seed=4)),
])
def test_homogeneous_acrw_star_se_is_parameter_se(model, panel_kw):
    p, _ = simulate_panel(DgpSpec(tau="homogeneous", tau_params=(0.5,), N=200, T=5, **panel_kw))
    f = fit(p, ModelSpec(model, "homogeneous"))
    rep = analytical_variance(f, STAR, p)
    i = f.labels.index("d")
    assert rep.estimate == f.params[i]
    assert rep.se == pytest.approx(parameter_se(f)[i], rel=1e-12)


def test_ci_is_estimate_pm_z_se(sti_panel):
    f = fit(sti_panel, ModelSpec("FEC-STI", "quadratic"))
    rep = analytical_variance(f, STAR, sti_panel, level=0.9)
    z = 1.6448536269514722
    assert rep.ci[0] == pytest.approx(rep.estimate - z * rep.se, rel=1e-12)
    assert rep.ci[1] == pytest.approx(rep.estimate + z * rep.se, rel=1e-12)
    assert rep.variance > 0 and rep.se == pytest.approx(np.sqrt(rep.variance / 200))
    for key in ("U", "Xi", "C", "J", "grad"):
        assert key in rep.matrices


def test_noiseless_se_vanishes(rng):
    p = noiseless_panel(rng)
    f = fit(p, ModelSpec("FEC-STI", "homogeneous"))
    assert f.params[f.labels.index("d")] == pytest.approx(0.7, abs=1e-10)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateVarianceWarning)
        rep = analytical_variance(f, STAR, p)
    assert rep.se < 1e-9
    boot = bootstrap(p, ModelSpec("FEC-STI", "homogeneous"), STAR, B=20, seed=1)
    assert np.ptp(boot.replicates) < 1e-10 and boot.se < 1e-10


def test_degenerate_variance_warns(monkeypatch, sti_panel):
    f = fit(sti_panel, ModelSpec("FEC-STI", "homogeneous"))
    real = inf._sandwich

    def zero(fit_, Q):
        core, mats = real(fit_, Q)
        return np.zeros_like(core), mats

    monkeypatch.setattr(inf, "_sandwich", zero)
    with pytest.warns(DegenerateVarianceWarning):
        rep = analytical_variance(f, STAR, sti_panel)
    assert rep.degenerate and rep.se == 0.0


def test_analytical_needs_balanced(rng, sti_panel):
    present = np.ones(sti_panel.outcome.shape, dtype=bool)
    present[0, 2] = False
    p = PanelDataset(sti_panel.outcome, sti_panel.treatment, sti_panel.covariates, present,
                     covariate_names=sti_panel.covariate_names)
    f = fit(p, ModelSpec("FEC-STI", "homogeneous"))
    with pytest.raises(NotApplicableError):
        analytical_variance(f, STAR, p)
    # the bootstrap still works on unbalanced panels
    rep = bootstrap(p, ModelSpec("FEC-STI", "homogeneous"), STAR, B=10, seed=0)
    assert rep.se > 0


def test_bootstrap_deterministic(sti_panel):
    spec = ModelSpec("FEC-STI", "quadratic")
    a = bootstrap(sti_panel, spec, STAR, B=30, seed=42)
    b = bootstrap(sti_panel, spec, STAR, B=30, seed=42)
    c = bootstrap(sti_panel, spec, STAR, B=30, seed=42, n_jobs=3)
    assert a.replicates.tobytes() == b.replicates.tobytes() == c.replicates.tobytes()
    assert a.to_dict() == b.to_dict()
    d = bootstrap(sti_panel, spec, STAR, B=30, seed=43)
    assert d.replicates.tobytes() != a.replicates.tobytes()
    assert a.rng == "numpy.random.Philox" and a.seed == 42 and a.B == 30
    assert a.se == pytest.approx(np.std(a.replicates, ddof=1))
    lo, hi = np.quantile(a.replicates, [0.025, 0.975])
    assert a.ci == pytest.approx((lo, hi)) and a.ci_percentile == a.ci
    assert a.ci_normal[1] - a.estimate == pytest.approx(1.959963984540054 * a.se)


def test_bootstrap_threads_env(monkeypatch, sti_panel):
    spec = ModelSpec("FEC-STI", "homogeneous")
    base = bootstrap(sti_panel, spec, STAR, B=12, seed=5)
    monkeypatch.setenv("CTPANEL_THREADS", "4")
    assert bootstrap(sti_panel, spec, STAR, B=12, seed=5).replicates.tobytes() == \
        base.replicates.tobytes()


def test_identical_units_fail_before_resampling():
    # every unit equal: the within transform annihilates the treatment, so
    # the original-sample fit already fails and no replicate is drawn
    rng = np.random.default_rng(0)
    row = rng.normal(size=(1, 4))
    p = PanelDataset(np.repeat(row, 6, 0), np.repeat(np.abs(row), 6, 0), np.zeros((6, 4, 0)))
    with pytest.raises(EstimationError):
        bootstrap(p, ModelSpec("FEC-STI", "homogeneous"), STAR, B=5)


def test_param_target_shares_draws(sti_panel):
    spec = ModelSpec("FEC-STI", "homogeneous")
    star, d = bootstrap(sti_panel, spec, [STAR, ParamTarget("d")], B=25, seed=9)
    assert star.replicates.tobytes() == d.replicates.tobytes()
    assert d.label == "d"
    with pytest.raises(SpecificationError):
        bootstrap(sti_panel, spec, ParamTarget("nope"), B=5)


def test_bootstrap_argument_errors(sti_panel):
    spec = ModelSpec("FEC-STI", "homogeneous")
    with pytest.raises(SpecificationError):
        bootstrap(sti_panel, spec, STAR, B=1)
    with pytest.raises(SpecificationError):
        bootstrap(sti_panel, spec, STAR, B=5, ci="bca")
    with pytest.raises(SpecificationError):
        bootstrap(sti_panel, spec, STAR, B=5, level=1.5)


def test_fragile_resampling_raises():
    # only unit 0 departs from the common time path, so any resample that
    # misses it (about a third of them) has no within-treatment variation
    rng = np.random.default_rng(2)
    N, T = 8, 4
    D = np.tile(np.arange(T, dtype=float), (N, 1))
    D[0] = [3.0, 0.0, 2.0, 1.0]
    Y = D + rng.normal(size=(N, T))
    p = PanelDataset(Y, D, np.zeros((N, T, 0)))
    with pytest.raises(ResamplingFragilityError):
        bootstrap(p, ModelSpec("FEC-STI", "homogeneous"), STAR, B=50, seed=0)


def test_hansen_j_errors_and_noiseless(rng):
    p, _ = simulate_panel(sei_reference(7, N=200, T=5))
    with pytest.raises(WrongPathError):
        hansen_j(fit(p, ModelSpec("FEC-STI")))
    with pytest.raises(NotApplicableError):
        hansen_j(fit(p, ModelSpec("FEC-SEI"), weighting="identity"))
    two = simulate_panel(sei_reference(7, N=200, T=2))[0]
    f2 = fit(two, ModelSpec("FEC-SEI", "homogeneous"))
    assert f2.n_moments == len(f2.params)
    with pytest.raises(NotApplicableError):
        hansen_j(f2)

    # noiseless SEI data: exact moment conditions give J = 0
    N, T = 60, 5
    X = rng.normal(size=(N, T, 1))
    D = rng.uniform(0, 4, (N, T))
    Y = 1.0 * X[..., 0] + 0.4 * D + rng.normal(size=(N, 1)) + rng.normal(size=(1, T))
    q = PanelDataset(Y, D, X, covariate_names=("x1",))
    f = fit(q, ModelSpec("FEC-SEI", "homogeneous"))
    J, dof, pv = hansen_j(f)
    assert J < 1e-12 and dof == f.n_moments - 2 and pv == pytest.approx(1.0)


@pytest.mark.slow
def test_hansen_j_size():
    rej = 0
    R = 500
    for r in range(R):
        p, _ = simulate_panel(sei_reference(20_000 + r))
        _, dof, pv = hansen_j(fit(p, ModelSpec("FEC-SEI", "homogeneous", collapse=True)))
        rej += pv < 0.05
    assert dof > 0
    assert abs(rej / R - 0.05) <= 0.03


def test_acrw_star_value_matches_report(sti_panel):
    f = fit(sti_panel, ModelSpec("FEC-STI", "quadratic"))
    rep = analytical_variance(f, STAR, sti_panel)
    assert rep.estimate == acrw_star(f, sti_panel)
