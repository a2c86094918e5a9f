"""Standard errors for parameters and plug-in estimands.

Two routes are available. The analytical route is a delta-method sandwich
built from the stacked per-unit vector (moment contribution, instruments,
residuals, Q_i); the bootstrap re-estimates everything on panels made of
resampled units.
"""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import (
    EstimationError,
    NotApplicableError,
    ResamplingFragilityError,
    SpecificationError,
    WrongPathError,
    DegenerateVarianceWarning,
    IdentificationError,
)
from .estimands import EstimandForm, EstimandSpec, build_form
from .estimators import FitResult, ModelSpec, fit_prepared, prepare
from .panel import PanelDataset

__all__ = [
    "VarianceReport",
    "analytical_variance",
    "parameter_covariance",
    "parameter_se",
    "bootstrap",
    "ParamTarget",
    "hansen_j",
    "RNG_ALGORITHM",
    "THREADS_ENV",
]

RNG_ALGORITHM = "numpy.random.Philox"
THREADS_ENV = "CTPANEL_THREADS"
MAX_FAILURE_SHARE = 0.10


@dataclass
class VarianceReport:
    """Variance, standard error and confidence interval for one estimate.

    ``variance`` is the asymptotic variance of √N(ĈE − CE); ``se`` is the
    standard error of ĈE itself.
    """

    method: str
    label: str
    estimate: float
    variance: float
    se: float
    level: float
    ci: tuple
    n_units: int
    degenerate: bool = False
    matrices: dict = field(default_factory=dict, repr=False)
    # bootstrap only
    B: int | None = None
    seed: int | None = None
    rng: str | None = None
    replicates: np.ndarray | None = field(default=None, repr=False)
    failures: int = 0
    ci_percentile: tuple | None = None
    ci_normal: tuple | None = None
    notes: tuple = ()

    def to_dict(self, include_replicates: bool = False) -> dict:
        d = {
            "method": self.method, "label": self.label, "estimate": self.estimate,
            "se": self.se, "variance": self.variance, "level": self.level,
            "ci": list(self.ci), "n_units": self.n_units, "degenerate": self.degenerate,
        }
        if self.method == "bootstrap":
            d.update({"B": self.B, "seed": self.seed, "rng": self.rng, "failures": self.failures,
                      "ci_percentile": list(self.ci_percentile), "ci_normal": list(self.ci_normal)})
            if include_replicates:
                d["replicates"] = [float(v) for v in self.replicates]
        if self.notes:
            d["notes"] = list(self.notes)
        return d


def _z(level: float) -> float:
    if not 0 < level < 1:
        raise SpecificationError(f"confidence level must be in (0, 1), got {level}")
    return float(stats.norm.ppf(0.5 + level / 2))


# --------------------------------------------------------------------------
# analytical sandwich

def _require_balanced(fit: FitResult):
    if not fit.balanced:
        raise NotApplicableError(
            "analytical variance needs a balanced estimation sample; use the bootstrap"
        )


def _gmm_pieces(fit: FitResult, Q: np.ndarray):
    """Return (bread H, Jacobian B, meat Σ) for the GMM path."""
    W = fit.design["W"]
    R = fit.design["dR"]
    e = fit.residuals
    N, n_e, m = W.shape
    p = R.shape[2]
    q = Q.shape[1]
    Wbar = W.mean(axis=0)                                     # (n_e, m)
    G = np.einsum("iem,iep->mp", W, R) / N - Wbar.T @ R.mean(axis=0)
    omega = fit.omega
    GtO = G.T @ omega
    M = GtO @ G
    if np.linalg.matrix_rank(M, tol=1e-10 * np.abs(M).max()) < p:
        raise IdentificationError("G'ΩG is singular")
    Hp = np.linalg.solve(M, GtO)                             # (p, m)
    H = np.zeros((p + q, m + q))
    H[:p, :m] = Hp
    H[p:, m:] = np.eye(q)
    stacked = np.concatenate(
        [np.einsum("iem,ie->im", W, e), W.transpose(0, 2, 1).reshape(N, -1), e, Q], axis=1)
    dim_v = m * n_e
    B = np.zeros((m + q, stacked.shape[1]))
    B[:m, :m] = np.eye(m)
    B[:m, m + dim_v:m + dim_v + n_e] = -Wbar.T
    B[m:, m + dim_v + n_e:] = np.eye(q)
    c = stacked - stacked.mean(axis=0)
    Sigma = c.T @ c / N
    return H, B, Sigma, {"G": G, "Omega": omega}


def _twfe_pieces(fit: FitResult, Q: np.ndarray):
    """Return (J, C, Ξ) for the TWFE path."""
    Ddot = fit.design["Rdot"]
    e = fit.residuals
    N, T, p = Ddot.shape
    q = Q.shape[1]
    Dbar = Ddot.mean(axis=0)                                  # (T, p)
    U = np.einsum("itp,itr->pr", Ddot, Ddot) / N - Dbar.T @ Dbar
    if np.linalg.matrix_rank(U, tol=1e-10 * np.abs(U).max()) < p:
        raise IdentificationError("U matrix is singular")
    J = np.zeros((p + q, p + q))
    J[:p, :p] = np.linalg.solve(U, np.eye(p))
    J[p:, p:] = np.eye(q)
    stacked = np.concatenate(
        [np.einsum("itp,it->ip", Ddot, e), Ddot.transpose(0, 2, 1).reshape(N, -1), e, Q], axis=1)
    dim_v = p * T
    C = np.zeros((p + q, stacked.shape[1]))
    C[:p, :p] = np.eye(p)
    C[:p, p + dim_v:p + dim_v + T] = -Dbar.T
    C[p:, p + dim_v + T:] = np.eye(q)
    c = stacked - stacked.mean(axis=0)
    Xi = c.T @ c / N
    return J, C, Xi, {"U": U}


def _sandwich(fit: FitResult, Q: np.ndarray):
    _require_balanced(fit)
    if fit.estimator == "gmm":
        H, B, S, extra = _gmm_pieces(fit, Q)
        names = {"H": H, "B": B, "Sigma": S}
    else:
        H, B, S, extra = _twfe_pieces(fit, Q)
        names = {"J": H, "C": B, "Xi": S}
    HB = H @ B
    core = HB @ S @ HB.T
    return core, {**extra, **names}


def parameter_covariance(fit: FitResult) -> np.ndarray:
    """Asymptotic covariance of φ̂ (already divided by N)."""
    core, _ = _sandwich(fit, np.zeros((fit.n_units, 0)))
    return core / fit.n_units


def parameter_se(fit: FitResult) -> np.ndarray:
    return np.sqrt(np.clip(np.diag(parameter_covariance(fit)), 0.0, None))


def analytical_variance(fit: FitResult, estimand: EstimandSpec | EstimandForm,
                        panel: PanelDataset, level: float = 0.95) -> VarianceReport:
    """Delta-method sandwich variance for a plug-in estimand."""
    form = estimand if isinstance(estimand, EstimandForm) else build_form(fit.spec.tau, estimand, panel)
    if panel.n_units != fit.n_units:
        raise SpecificationError("panel and fit have different numbers of units")
    if form.q_units is None:
        raise NotApplicableError(
            "analytical variance needs every Q_i observed for every unit; use the bootstrap")
    tau = fit.tau_params
    Q = form.q_units
    core, mats = _sandwich(fit, Q)
    p = len(fit.params)
    grad = np.zeros(p + Q.shape[1])
    grad[fit.tau_offset:p] = form.grad_tau()
    grad[p:] = form.grad_q(tau)
    V = float(grad @ core @ grad)
    est = form.value(tau)
    degenerate = not V > 0
    if degenerate:
        warnings.warn(f"non-positive sandwich variance ({V:.3g}) for {form.spec.label}",
                      DegenerateVarianceWarning, stacklevel=2)
    se = float(np.sqrt(max(V, 0.0) / fit.n_units))
    z = _z(level)
    mats["grad"] = grad
    return VarianceReport("analytical", form.spec.label, est, V, se, level,
                          (est - z * se, est + z * se), fit.n_units, degenerate, mats)


# --------------------------------------------------------------------------
# bootstrap

@dataclass(frozen=True)
class ParamTarget:
    """Bootstrap target: one coordinate of φ̂, by label."""

    name: str

    @property
    def label(self) -> str:
        return self.name


def _n_threads(n_jobs):
    if n_jobs is None:
        n_jobs = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(n_jobs))


def bootstrap(panel: PanelDataset, spec: ModelSpec, estimand, B: int = 1000, seed: int = 0,
              level: float = 0.95, weighting="two-step", ci: str = "percentile",
              n_jobs: int | None = None, fit_kw: dict | None = None):
    """Cross-sectional bootstrap: resample whole units with replacement.

    Each replicate redoes the transforms, the fit (including the two-step
    weight matrix) and the estimand on the resampled units. Indices are
    drawn as one (B, N) block from a Philox generator seeded with ``seed``,
    so results do not depend on ``n_jobs``.

    Parameters
    ----------
    estimand : EstimandSpec, ParamTarget or a sequence of them
        A sequence returns a list of reports computed from the same draws.

    Returns
    -------
    VarianceReport or list of VarianceReport
    """
    if B < 2:
        raise SpecificationError("bootstrap needs B >= 2")
    if ci not in ("percentile", "normal"):
        raise SpecificationError("ci must be 'percentile' or 'normal'")
    single = isinstance(estimand, (EstimandSpec, EstimandForm, ParamTarget))
    specs = [estimand] if single else list(estimand)
    fit_kw = dict(fit_kw or {})
    prep = prepare(panel, spec)
    base = fit_prepared(prep, weighting, **fit_kw)
    forms = []
    for s in specs:
        if isinstance(s, ParamTarget):
            if s.name not in base.labels:
                raise SpecificationError(f"unknown parameter {s.name!r}")
            forms.append(_ParamForm(s, base.labels.index(s.name)))
        elif isinstance(s, EstimandForm):
            forms.append(s)
        else:
            forms.append(build_form(base.spec.tau, s, panel))
    estimates = [f.value(base.tau_params) if not isinstance(f, _ParamForm) else f.pick(base)
                 for f in forms]

    N = panel.n_units
    rng = np.random.Generator(np.random.Philox(seed))
    draws = rng.integers(0, N, size=(B, N))
    out = np.full((B, len(forms)), np.nan)
    failed = np.zeros(B, dtype=bool)

    def one(b):
        idx = draws[b]
        try:
            f = fit_prepared(prep.take(idx), weighting, **fit_kw)
        except (EstimationError, np.linalg.LinAlgError):
            return b, None
        return b, [form.pick(f) if isinstance(form, _ParamForm)
                   else form.value(f.tau_params, form.resample_q(idx)) for form in forms]

    threads = _n_threads(n_jobs)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, range(B)))
    else:
        results = [one(b) for b in range(B)]
    for b, vals in results:
        if vals is None or not np.all(np.isfinite(vals)):
            failed[b] = True
        else:
            out[b] = vals
    n_fail = int(failed.sum())
    if n_fail > MAX_FAILURE_SHARE * B:
        raise ResamplingFragilityError(
            f"{n_fail} of {B} bootstrap replicates failed (limit {MAX_FAILURE_SHARE:.0%})")
    z = _z(level)
    alpha = 1 - level
    reports = []
    for j, form in enumerate(forms):
        reps = out[~failed, j]
        se = float(np.std(reps, ddof=1))
        est = estimates[j]
        lo, hi = np.quantile(reps, [alpha / 2, 1 - alpha / 2])
        pct = (float(lo), float(hi))
        nrm = (est - z * se, est + z * se)
        notes = (f"{n_fail} replicate(s) failed and were dropped",) if n_fail else ()
        label = form.label if isinstance(form, _ParamForm) else form.spec.label
        reports.append(VarianceReport(
            "bootstrap", label, est, se ** 2 * N, se, level,
            pct if ci == "percentile" else nrm, N, not se > 0, {},
            B=B, seed=seed, rng=RNG_ALGORITHM, replicates=out[:, j].copy(), failures=n_fail,
            ci_percentile=pct, ci_normal=nrm, notes=notes,
        ))
    return reports[0] if single else reports


@dataclass(frozen=True)
class _ParamForm:
    target: ParamTarget
    index: int

    @property
    def label(self) -> str:
        return self.target.name

    def pick(self, fit: FitResult) -> float:
        return float(fit.params[self.index])


# --------------------------------------------------------------------------
# overidentification

def hansen_j(fit: FitResult) -> tuple:
    """Hansen's J = N ḡ'Ω̂ḡ at the two-step estimate.

    Returns
    -------
    (statistic, dof, p_value)
    """
    if fit.estimator != "gmm":
        raise WrongPathError("the J statistic needs a GMM fit")
    p = len(fit.params)
    dof = fit.n_moments - p
    if dof <= 0:
        raise NotApplicableError("exactly identified fit: no overidentifying restrictions")
    if fit.weighting != "two-step":
        raise NotApplicableError("the J statistic needs two-step weighting")
    gbar = np.einsum("iem,ie->m", fit.design["W"], fit.residuals) / fit.n_units
    J = float(fit.n_units * gbar @ fit.omega @ gbar)
    J = max(J, 0.0)
    return J, dof, float(stats.chi2.sf(J, dof))
