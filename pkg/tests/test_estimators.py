import numpy as np
import pytest

from conftest import random_panel
from ctpanel.errors import (
    CollinearityError,
    IdentificationError,
    InsufficientPeriodsError,
    SpecificationError,
    WeightingError,
    WrongPathError,
)
from ctpanel.estimators import (
    ModelSpec,
    build_instruments,
    canonical_model,
    estimate_gmm,
    estimate_twfe,
    fit,
    residual_moments,
)
from ctpanel.panel import PanelDataset
from ctpanel.simulate import DgpSpec, simulate_panel
from ctpanel.tau import eval_basis, resolve_tau


def dummy_ols(panel, spec):
    """Oracle: OLS on regressors plus unit and period dummies."""
    tau = resolve_tau(spec.tau).bind(panel.z_names)
    B = eval_basis(tau, panel)
    m = B.mask & panel.present
    i, t = np.nonzero(m)
    R = np.column_stack([panel.covariates[m], B.values[m]])
    units = np.unique(i)
    periods = np.unique(t)
    U = (i[:, None] == units[None]).astype(float)
    P = (t[:, None] == periods[None, 1:]).astype(float)
    coef, *_ = np.linalg.lstsq(np.column_stack([R, U, P]), panel.outcome[m], rcond=None)
    return coef[:R.shape[1]]


def iv_closed_form(panel):
    """Oracle for T = 2 static SEI with homogeneous τ: one differenced,
    cross-demeaned equation instrumented by (X_1, D_1)."""
    dY = panel.outcome[:, 1] - panel.outcome[:, 0]
    dR = np.column_stack([panel.covariates[:, 1] - panel.covariates[:, 0],
                          panel.treatment[:, 1] - panel.treatment[:, 0]])
    dY = dY - dY.mean()
    dR = dR - dR.mean(axis=0)
    Z = np.column_stack([panel.covariates[:, 0], panel.treatment[:, 0]])
    return np.linalg.solve(Z.T @ dR, Z.T @ dY)


def test_model_aliases():
    assert canonical_model("sei") == "FEC-SEI" and canonical_model("dp-sti") == "DPFEC-STI"
    assert ModelSpec("sti").path == "twfe" and ModelSpec("dp-sei").path == "gmm"
    with pytest.raises(SpecificationError):
        canonical_model("ols")


@pytest.mark.parametrize("balanced", [True, False])
@pytest.mark.parametrize("tau", ["homogeneous", "quadratic", "additive-lag", "quadratic-interaction"])
def test_twfe_equals_dummy_ols(rng, balanced, tau):
    for _ in range(10):
        p = random_panel(rng, N=int(rng.integers(6, 10)), T=int(rng.integers(4, 6)),
                         k=int(rng.integers(1, 3)), balanced=balanced, z=True)
        spec = ModelSpec("FEC-STI", tau)
        f = estimate_twfe(p, spec)
        np.testing.assert_allclose(f.params, dummy_ols(p, spec), atol=1e-8, rtol=0)
        assert len(f.params) == p.k + spec.tau.S


def test_twfe_pure_fixed_effects_and_small_noiseless(rng):
    N, T = 6, 4
    U, V = rng.normal(size=N), rng.normal(size=T)
    D, X = rng.uniform(0, 4, (N, T)), rng.normal(size=(N, T))
    p = PanelDataset(U[:, None] + V[None], D, X)
    assert np.abs(estimate_twfe(p, ModelSpec("FEC-STI", "homogeneous")).params).max() < 1e-12
    N = T = 3
    D, X = rng.uniform(0, 4, (N, T)), rng.normal(size=(N, T))
    Y = X + 0.5 * D + rng.normal(size=N)[:, None] + rng.normal(size=T)[None]
    f = estimate_twfe(PanelDataset(Y, D, X), ModelSpec("FEC-STI", "homogeneous"))
    np.testing.assert_allclose(f.params, [1.0, 0.5], atol=1e-10)


def test_twfe_collinearity_names_columns(rng):
    p = random_panel(rng, N=6, T=4, k=1)
    with pytest.raises(CollinearityError) as ei:
        estimate_twfe(p, ModelSpec("FEC-STI", "d, 2*d"))
    assert set(ei.value.columns) == {"d", "2*d"}
    with pytest.raises(WrongPathError):
        estimate_twfe(p, ModelSpec("FEC-SEI", "d"))


def test_instrument_block_shapes(rng):
    for k in (0, 1, 2):
        p = random_panel(rng, N=8, T=3, k=k)
        W = build_instruments(p, ModelSpec("FEC-SEI", "homogeneous"))
        assert W.block_widths == (k + 1, 2 * (k + 1)) and W.eq_periods == (2, 3)
        p4 = random_panel(rng, N=8, T=4, k=k)
        W = build_instruments(p4, ModelSpec("DPFEC-SEI", "homogeneous"))
        assert W.eq_periods == (3, 4)
        assert W.block_widths == (1 + 2 * (k + 1), 2 + 3 * (k + 1))
        W = build_instruments(p4, ModelSpec("DPFEC-STI", "homogeneous"))
        assert W.block_widths == (1 + 3 * (k + 1), 2 + 3 * (k + 1))
    with pytest.raises(InsufficientPeriodsError, match="3"):
        build_instruments(random_panel(rng, N=8, T=2, k=1), ModelSpec("DPFEC-SEI", "homogeneous"))


def test_instrument_block_is_block_diagonal(rng):
    p = random_panel(rng, N=5, T=4, k=1)
    W = build_instruments(p, ModelSpec("FEC-SEI", "homogeneous"))
    Wi = W.unit_matrix(0)
    col = 0
    for e, w in enumerate(W.block_widths):
        other = np.delete(Wi[:, col:col + w], e, axis=0)
        assert np.all(other == 0)
        col += w
    # second block holds (X1, X2, D1, D2) of unit 0 in some order
    w0, w1 = W.block_widths[:2]
    assert sorted(Wi[1, w0:w0 + w1]) == sorted([*p.covariates[0, :2, 0], *p.treatment[0, :2]])


def test_collapse_reduces_moments(rng):
    p = random_panel(rng, N=30, T=6, k=1)
    full = build_instruments(p, ModelSpec("FEC-SEI", "homogeneous"))
    col = build_instruments(p, ModelSpec("FEC-SEI", "homogeneous", collapse=True))
    assert col.collapsed and col.n_moments < full.n_moments
    assert col.n_moments == 2 * 5


def test_gmm_exactly_identified_equals_iv(rng):
    for _ in range(20):
        N = int(rng.integers(6, 40))
        p = random_panel(rng, N=N, T=2, k=1)
        spec = ModelSpec("FEC-SEI", "homogeneous")
        f = estimate_gmm(p, spec, "identity")
        assert f.n_moments == len(f.params)
        np.testing.assert_allclose(f.params, iv_closed_form(p), atol=1e-8, rtol=1e-8)
        A = rng.normal(size=(2, 2))
        g = estimate_gmm(p, spec, A @ A.T + 0.1 * np.eye(2))
        np.testing.assert_allclose(g.params, f.params, atol=1e-8, rtol=1e-8)
        assert np.abs(residual_moments(f).mean(axis=0)).max() < 1e-8


def test_gmm_noiseless_recovery_and_moments():
    spec = DgpSpec(N=50, T=4, family="sei", feedback=0.5, e_sd=0.0, seed=4)
    p, _ = simulate_panel(spec)
    f = estimate_gmm(p, ModelSpec("FEC-SEI", "quadratic"))
    np.testing.assert_allclose(f.params, spec.true_phi, atol=1e-8)
    assert np.abs(residual_moments(f)).max() < 1e-8


def test_gmm_pure_fixed_effects(rng):
    N, T = 40, 4
    p = PanelDataset(rng.normal(size=N)[:, None] + rng.normal(size=T)[None],
                     rng.uniform(0, 4, (N, T)), rng.normal(size=(N, T)))
    f = estimate_gmm(p, ModelSpec("FEC-SEI", "quadratic"))
    assert np.abs(f.tau_params).max() < 1e-8


def test_gmm_overidentified_moments_nonzero(rng):
    spec = DgpSpec(N=100, T=5, family="sei", feedback=0.3, seed=2)
    p, _ = simulate_panel(spec)
    f = estimate_gmm(p, ModelSpec("FEC-SEI", "homogeneous"))
    assert f.n_moments > len(f.params)
    assert np.abs(residual_moments(f).mean(axis=0)).max() > 1e-6
    with pytest.raises(WrongPathError):
        residual_moments(estimate_twfe(p, ModelSpec("FEC-STI", "homogeneous")))


def test_gmm_weighting_errors(rng):
    p = random_panel(rng, N=20, T=3, k=1)
    spec = ModelSpec("FEC-SEI", "homogeneous")
    with pytest.raises(WeightingError):
        estimate_gmm(p, spec, "optimal")
    with pytest.raises(WeightingError):
        estimate_gmm(p, spec, -np.eye(6))
    with pytest.raises(WeightingError):
        estimate_gmm(p, spec, np.eye(3))
    with pytest.raises(IdentificationError):
        estimate_gmm(p, ModelSpec("FEC-SEI", "d, 2*d"))


def test_fit_dispatch_and_dynamic_recovery():
    spec = DgpSpec(N=80, T=6, family="dynamic", gamma=0.5, e_sd=0.0, seed=1)
    p, _ = simulate_panel(spec)
    for model in ("DPFEC-SEI", "DPFEC-STI"):
        f = fit(p, ModelSpec(model, "quadratic"))
        assert f.estimator == "gmm" and f.labels[0] == "lag(y,1)"
        np.testing.assert_allclose(f.params, spec.true_phi, atol=1e-8)
    assert fit(p, ModelSpec("FEC-STI", "quadratic")).estimator == "twfe"
