"""Synthetic panels with known parameters and estimand values.

Treatment process
-----------------
A Gaussian latent index drives the treatment::

    A_it = ρ A_i,t-1 + c_e ε̃_i,t-1 + η_it          (stationary start)
    L_it = μ_t + (c_u Ũ_i + A_it) / s               (s makes the noise part N(0, 1))
    D_it = d_max · F⁻¹(Φ(L_it))                     (F: Beta(a, b) cdf)

``c_u`` ties treatment to the unit effect (harmless for both estimators),
``c_e`` lets treatment respond to the previous error (feedback: fine for
GMM under sequential exogeneity, biases TWFE), and a non-zero ``trend``
moves the treatment distribution over time.

Covariates are independent Gaussian AR(1) processes. Outcomes follow
``Y_it = γ Y_i,t-1 + β'X_it + τ(D̄_it, Z_it) + U_i + V_t + ε_it`` with zero
pre-sample treatment; dynamic panels start from a 50-period burn-in.

True average responses are computed by Gauss-Hermite quadrature over the
latent index (closed form up to quadrature error) or, when the latent is
not Gaussian, by a large simulated sample.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import special, stats

from .errors import DgpSpecError, EstimationError, NotApplicableError
from .estimands import EstimandSpec, build_form, default_estimands
from .estimators import ModelSpec, fit_prepared, prepare, LAG_Y_LABEL
from .panel import PanelDataset
from .tau import D0, TauSpec, history_arrays, resolve_tau

__all__ = [
    "DgpSpec",
    "OracleTruth",
    "McConfig",
    "McSummary",
    "generate",
    "simulate_panel",
    "oracle_truth",
    "simulated_truth",
    "mc_experiment",
    "replicate_seed",
]

FAMILIES = ("sti", "sei", "dynamic")
_FAMILY_ALIASES = {"fec-sti": "sti", "fec-sei": "sei", "sti-compatible": "sti",
                   "sei-compatible": "sei", "dp": "dynamic", "dpfec": "dynamic"}


@dataclass(frozen=True)
class DgpSpec:
    """Declarative data-generating process.

    ``family`` is ``"sti"`` (errors independent of all treatments),
    ``"sei"`` (treatment may react to past errors) or ``"dynamic"``
    (lagged outcome with coefficient ``gamma``).
    """

    N: int = 500
    T: int = 6
    family: str = "sti"
    tau: str = "quadratic"
    tau_params: tuple = (1.0, -0.1)
    beta: tuple = (1.0,)
    gamma: float | None = None
    d_max: float = 4.0
    treatment: str = "beta"
    a: float = 2.0
    b: float = 2.0
    persistence: float = 0.5
    unit_loading: float = 0.5
    feedback: float = 0.0
    trend: float = 0.0
    x_mean: float = 1.0
    x_sd: float = 1.0
    x_rho: float = 0.5
    u_sd: float = 1.0
    v_sd: float = 1.0
    e_sd: float = 1.0
    error: str = "normal"
    error_df: float = 5.0
    burn_in: int = 50
    seed: int = 0

    def __post_init__(self):
        fam = _FAMILY_ALIASES.get(str(self.family).lower(), str(self.family).lower())
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "tau_params", tuple(float(v) for v in self.tau_params))
        object.__setattr__(self, "beta", tuple(float(v) for v in self.beta))
        if fam not in FAMILIES:
            raise DgpSpecError(f"family must be one of {FAMILIES}")
        if (fam == "dynamic") != (self.gamma is not None):
            raise DgpSpecError("gamma must be given exactly when the family is dynamic")
        if self.gamma is not None and not abs(self.gamma) < 1:
            raise DgpSpecError("dynamic panels need |gamma| < 1")
        if fam == "sti" and self.feedback != 0:
            raise DgpSpecError("an STI-compatible process cannot feed errors back into treatment")
        try:
            tau = resolve_tau(self.tau)
        except Exception as exc:
            raise DgpSpecError(f"bad treatment-effect spec: {exc}") from None
        if len(self.tau_params) != tau.S:
            raise DgpSpecError(f"tau_params has {len(self.tau_params)} entries, spec needs {tau.S}")
        if tau.uses_z and not self.beta:
            raise DgpSpecError("interaction terms need at least one covariate (set beta)")
        if self.treatment not in ("beta", "uniform"):
            raise DgpSpecError("treatment must be 'beta' or 'uniform'")
        if self.treatment == "beta" and not (self.a > 0 and self.b > 0):
            raise DgpSpecError("beta shape parameters must be positive")
        if not self.d_max > 0:
            raise DgpSpecError("d_max must be positive")
        for name in ("x_sd", "u_sd", "v_sd", "e_sd", "unit_loading"):
            if getattr(self, name) < 0:
                raise DgpSpecError(f"{name} must be non-negative")
        for name in ("persistence", "x_rho"):
            if not abs(getattr(self, name)) < 1:
                raise DgpSpecError(f"{name} must lie in (-1, 1)")
        if self.error not in ("normal", "t"):
            raise DgpSpecError("error must be 'normal' or 't'")
        if self.error == "t" and not self.error_df > 2:
            raise DgpSpecError("t errors need df > 2")
        if self.N < 2 or self.T < 2 or self.burn_in < 0:
            raise DgpSpecError("need N >= 2, T >= 2 and burn_in >= 0")

    @property
    def tau_spec(self) -> TauSpec:
        return resolve_tau(self.tau).bind(self.z_names)

    @property
    def k(self) -> int:
        return len(self.beta)

    @property
    def covariate_names(self) -> tuple:
        return tuple(f"x{j + 1}" for j in range(self.k))

    @property
    def z_names(self) -> tuple:
        return self.covariate_names[:1]

    @property
    def dynamic(self) -> bool:
        return self.family == "dynamic"

    @property
    def default_model(self) -> str:
        return {"sti": "FEC-STI", "sei": "FEC-SEI", "dynamic": "DPFEC-SEI"}[self.family]

    @property
    def true_phi(self) -> np.ndarray:
        head = (self.gamma,) if self.dynamic else ()
        return np.array(head + self.beta + self.tau_params)

    @property
    def labels(self) -> tuple:
        head = (LAG_Y_LABEL,) if self.dynamic else ()
        return head + self.covariate_names + self.tau_spec.labels

    @classmethod
    def from_mapping(cls, m: Mapping) -> "DgpSpec":
        """Build from a (possibly nested) key-value tree, e.g. a parsed TOML file."""
        flat = {}
        for k, v in m.items():
            if isinstance(v, Mapping):
                flat.update(v)
            else:
                flat[k] = v
        names = {f.name for f in fields(cls)}
        unknown = set(flat) - names
        if unknown:
            raise DgpSpecError(f"unknown DGP keys: {sorted(unknown)}")
        for key in ("tau_params", "beta"):
            if key in flat and not isinstance(flat[key], (list, tuple)):
                flat[key] = (flat[key],)
        try:
            return cls(**flat)
        except TypeError as exc:
            raise DgpSpecError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tau_params"] = list(self.tau_params)
        d["beta"] = list(self.beta)
        return d

    # moments of the latent index -----------------------------------------
    def _var_a(self) -> float:
        return (1.0 + self.feedback ** 2) / (1.0 - self.persistence ** 2)

    def _scale(self) -> float:
        return math.sqrt(self.unit_loading ** 2 + self._var_a())

    def latent_mean(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.T == 1:
            return np.zeros_like(t)
        return self.trend * (2.0 * (t - 1) / (self.T - 1) - 1.0)

    def latent_corr(self, lag: int) -> float:
        va = self._var_a()
        return (self.unit_loading ** 2 + self.persistence ** abs(lag) * va) / self._scale() ** 2

    def dose(self, latent: np.ndarray) -> np.ndarray:
        u = special.ndtr(latent)
        if self.treatment == "uniform":
            return self.d_max * u
        return self.d_max * special.betaincinv(self.a, self.b, u)


def _errors(spec: DgpSpec, rng, shape):
    if spec.error == "normal":
        z = rng.standard_normal(shape)
    else:
        df = spec.error_df
        z = rng.standard_t(df, shape) * math.sqrt((df - 2) / df)
    return spec.e_sd * z, z


def simulate_panel(spec: DgpSpec, return_latent: bool = False):
    """Draw one panel. Deterministic in ``spec.seed``."""
    rng = np.random.Generator(np.random.Philox(spec.seed))
    N, T, k = spec.N, spec.T, spec.k
    B = spec.burn_in if spec.dynamic else 0
    TT = T + B
    U = spec.u_sd * rng.standard_normal(N)
    V = spec.v_sd * rng.standard_normal(TT)
    eps, eps_std = _errors(spec, rng, (N, TT))
    if spec.e_sd == 0:
        eps_std = rng.standard_normal((N, TT))
    X = np.empty((N, TT, k))
    x0 = rng.standard_normal((N, k))
    innov = rng.standard_normal((N, TT, k))
    X[:, 0] = x0
    r = spec.x_rho
    for t in range(1, TT):
        X[:, t] = r * X[:, t - 1] + math.sqrt(1 - r * r) * innov[:, t]
    X = spec.x_mean + spec.x_sd * X
    # treatment on observed periods only (zero during burn-in / pre-sample)
    eta = rng.standard_normal((N, T))
    A = np.empty((N, T))
    a = math.sqrt(spec._var_a()) * rng.standard_normal(N)
    u_std = U / spec.u_sd if spec.u_sd > 0 else np.zeros(N)
    for t in range(T):
        if t > 0:
            a = spec.persistence * a + spec.feedback * eps_std[:, B + t - 1] + eta[:, t]
        A[:, t] = a
    latent = spec.latent_mean(np.arange(1, T + 1))[None] + (spec.unit_loading * u_std[:, None] + A) / spec._scale()
    D = spec.dose(latent)
    clipped = int(((D < 0) | (D > spec.d_max)).sum())
    D = np.clip(D, 0.0, spec.d_max)
    tau = spec.tau_spec
    Dfull = np.concatenate([np.zeros((N, B)), D], axis=1)
    L = tau.max_lag
    Dpad = np.concatenate([np.zeros((N, L)), Dfull], axis=1)
    hist = {key: val[:, L:] for key, val in history_arrays(Dpad, tau.lags).items()}
    for z in {z for t in tau.terms for z in t.z_names}:
        hist[("z", z)] = X[:, :, spec.covariate_names.index(z)]
    effect = np.zeros((N, TT))
    for coef, term in zip(spec.tau_params, tau.terms):
        effect = effect + coef * term.poly.evaluate(hist)
    base = X @ np.asarray(spec.beta) if k else np.zeros((N, TT))
    base = base + effect + U[:, None] + V[None] + eps
    if spec.dynamic:
        Y = np.empty((N, TT))
        prev = np.zeros(N)
        for t in range(TT):
            prev = spec.gamma * prev + base[:, t]
            Y[:, t] = prev
    else:
        Y = base
    panel = PanelDataset(Y[:, B:], D, X[:, B:], covariate_names=spec.covariate_names,
                         z_names=spec.z_names)
    info = {"clipped": clipped, "clip_rate": clipped / D.size}
    if return_latent:
        info["latent"] = latent
    return panel, info


# --------------------------------------------------------------------------
# oracle

@dataclass
class OracleTruth:
    phi: np.ndarray
    labels: tuple
    acrw_t: dict
    acrw_star: float
    atew_t: dict
    atew_star: dict
    method: str = "closed-form"
    oracle_size: int | None = None
    mc_se: dict = field(default_factory=dict)
    clip_rate: float = 0.0

    def value(self, spec: EstimandSpec) -> float:
        k = spec.kind
        if k == "ACRW_t":
            return self.acrw_t[spec.t]
        if k == "ACRW_star":
            return self.acrw_star
        bench = spec.benchmark if isinstance(spec.benchmark, str) else None
        if bench not in ("zero", "mean"):
            raise NotApplicableError("oracle ATEW values exist for zero and mean benchmarks only")
        if k == "ATEW_t":
            return self.atew_t[bench][spec.t]
        if k == "ATEW_star":
            return self.atew_star[bench]
        raise NotApplicableError(f"no oracle value for {k}")

    def to_dict(self) -> dict:
        return {
            "phi": dict(zip(self.labels, (float(v) for v in self.phi))),
            "acrw_t": {str(t): v for t, v in self.acrw_t.items()},
            "acrw_star": self.acrw_star,
            "atew_t": {b: {str(t): v for t, v in d.items()} for b, d in self.atew_t.items()},
            "atew_star": dict(self.atew_star),
            "method": self.method,
            "oracle_size": self.oracle_size,
            "mc_se": dict(self.mc_se),
        }


def _split(mono):
    return (tuple((v, p) for v, p in mono if v[0] == "d"),
            tuple((v, p) for v, p in mono if v[0] == "z"))


def _z_moment(spec: DgpSpec, zm) -> float:
    out = 1.0
    for (_, name), p in zm:
        out *= float(stats.norm.moment(p, loc=spec.x_mean, scale=spec.x_sd))
    return out


def _d_moment(spec: DgpSpec, dm, t: int, nodes: int = 48) -> float:
    """E[Π_l D_{t-l}^{p_l}] by Gauss-Hermite quadrature over the latent index."""
    if not dm:
        return 1.0
    lags = [v[1] for v, _ in dm]
    pw = np.array([p for _, p in dm], dtype=float)
    periods = [t - l for l in lags]
    if min(periods) < 1:
        return 0.0
    dim = len(periods)
    C = np.array([[spec.latent_corr(a - b) for b in periods] for a in periods])
    chol = np.linalg.cholesky(C + 1e-300 * np.eye(dim))
    x, w = hermegauss(nodes)
    w = w / math.sqrt(2 * math.pi)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    Z = np.stack([g.ravel() for g in grids], axis=0)
    Wt = np.ones(Z.shape[1])
    for g in np.meshgrid(*([w] * dim), indexing="ij"):
        Wt = Wt * g.ravel()
    lat = spec.latent_mean(np.array(periods))[:, None] + chol @ Z
    D = spec.dose(lat)
    return float(Wt @ np.prod(D ** pw[:, None], axis=0))


def _period_values(spec: DgpSpec, moment_d, moment_z):
    """ACRW_t and ATEW_t (zero/mean benchmarks) from moment functions."""
    tau = spec.tau_spec
    th = spec.tau_params
    acrw, atew_zero, atew_mean = {}, {}, {}
    for t in range(tau.max_lag + 1, spec.T + 1):
        acr = ate0 = atem = 0.0
        for s, term in enumerate(tau.terms):
            for mono, c in term.partial().items():
                dm, zm = _split(mono)
                acr += th[s] * c * moment_d(dm, t) * moment_z(zm)
            for mono, c in term.poly.items():
                dm, zm = _split(mono)
                if not dm:
                    continue
                ed, ez = moment_d(dm, t), moment_z(zm)
                ate0 += th[s] * c * ed * ez
                bench = 1.0
                for (_, lag), p in dm:
                    bench *= moment_d(((D0, 1),), t - lag) ** p
                atem += th[s] * c * (ed - bench) * ez
        acrw[t], atew_zero[t], atew_mean[t] = acr, ate0, atem
    return acrw, atew_zero, atew_mean


def oracle_truth(spec: DgpSpec, oracle_size: int = 1_000_000) -> OracleTruth:
    """True parameters and estimand values for ``spec``.

    Quadrature is used when the latent index is Gaussian; otherwise the
    values come from a simulated sample of ``oracle_size`` units.
    """
    gaussian = spec.error == "normal" or spec.feedback == 0
    if not gaussian:
        return simulated_truth(spec, oracle_size)
    cache = {}

    def md(dm, t):
        key = (dm, t)
        if key not in cache:
            cache[key] = _d_moment(spec, dm, t)
        return cache[key]

    acrw, a0, am = _period_values(spec, md, lambda zm: _z_moment(spec, zm))
    return OracleTruth(
        spec.true_phi, spec.labels, acrw, float(np.mean(list(acrw.values()))),
        {"zero": a0, "mean": am},
        {"zero": float(np.mean(list(a0.values()))), "mean": float(np.mean(list(am.values())))},
    )


def simulated_truth(spec: DgpSpec, oracle_size: int = 1_000_000, chunk: int = 100_000) -> OracleTruth:
    """Oracle values from a large simulated cross-section, with Monte Carlo SEs.

    Only the treatment and covariate processes are simulated; expectations
    of products of treatment and Z monomials use their independence.
    """
    tau = spec.tau_spec
    th = spec.tau_params
    periods = list(range(tau.max_lag + 1, spec.T + 1))
    n_done = 0
    # per-unit contributions: ACRW_t for each t, and ACRW*
    mean = np.zeros(len(periods) + 1)
    m2 = np.zeros(len(periods) + 1)
    draws = []
    c = 0
    while n_done < oracle_size:
        n = min(chunk, oracle_size - n_done)
        sub = replace(spec, N=n, seed=spec.seed + 7919 * (c + 1), burn_in=0,
                      family="sei" if spec.family == "dynamic" else spec.family,
                      gamma=None)
        panel, _ = simulate_panel(sub)
        hist = history_arrays(panel.treatment, tau.lags)
        for z in {z for t in tau.terms for z in t.z_names}:
            hist[("z", z)] = panel.covariate(z)
        contrib = np.zeros((n, len(periods)))
        for j, t in enumerate(periods):
            vals = {k: v[:, t - 1] for k, v in hist.items()}
            for s, term in enumerate(tau.terms):
                contrib[:, j] += th[s] * term.partial().evaluate(vals)
        star = contrib.mean(axis=1)
        allc = np.column_stack([contrib, star])
        # pairwise (Chan et al.) update of running mean and centered sum of squares
        cm = allc[0] + (allc - allc[0]).mean(axis=0)
        cm2 = ((allc - cm) ** 2).sum(axis=0)
        tot = n_done + n
        delta = cm - mean
        mean = mean + delta * (n / tot)
        m2 = m2 + cm2 + delta ** 2 * (n_done * n / tot)
        draws.append(panel.treatment)
        n_done += n
        c += 1
    se = np.sqrt(m2 / n_done / n_done)
    acrw = {t: float(mean[j]) for j, t in enumerate(periods)}
    # ATEW values via simulated monomial means
    dm_cache = {}

    def md(dm, t):
        if (dm, t) not in dm_cache:
            dm_cache[(dm, t)] = _sim_d_moment(draws, dm, t)
        return dm_cache[(dm, t)]

    _, a0, am = _period_values(spec, md, lambda zm: _z_moment(spec, zm))
    return OracleTruth(
        spec.true_phi, spec.labels, acrw, float(mean[-1]),
        {"zero": a0, "mean": am},
        {"zero": float(np.mean(list(a0.values()))), "mean": float(np.mean(list(am.values())))},
        method="simulation", oracle_size=oracle_size,
        mc_se={"acrw_star": float(se[-1]), **{f"acrw_{t}": float(se[j]) for j, t in enumerate(periods)}},
    )


def _sim_d_moment(draws, dm, t):
    """Sample mean of Π_l D_{t-l}^{p_l} over the stored treatment draws."""
    if not dm:
        return 1.0
    total, size = 0.0, 0
    for D in draws:
        val = np.ones(D.shape[0])
        for (_, lag), p in dm:
            val = val * (D[:, t - lag - 1] ** p if t - lag >= 1 else 0.0)
        total += math.fsum(val)
        size += D.shape[0]
    return total / size


def generate(spec: DgpSpec, truth: bool = True):
    """Panel plus its :class:`OracleTruth` (``None`` if ``truth=False``)."""
    panel, info = simulate_panel(spec)
    if not truth:
        return panel, None
    tr = oracle_truth(spec)
    tr.clip_rate = info["clip_rate"]
    return panel, tr


# --------------------------------------------------------------------------
# Monte Carlo harness

def replicate_seed(master: int, r: int) -> int:
    """Seed for replicate ``r``: a counter-derived stream independent of scheduling."""
    return int(np.random.SeedSequence([int(master), int(r)]).generate_state(1, dtype=np.uint64)[0]
               >> np.uint64(1))


@dataclass(frozen=True)
class McConfig:
    """Estimator and inference settings for :func:`mc_experiment`."""

    model: str | None = None
    tau: str | None = None
    weighting: str = "two-step"
    inference: str = "analytical"
    B: int = 500
    level: float = 0.95
    estimands: tuple = ("ACRW_star",)
    collapse: bool = False

    def __post_init__(self):
        if self.inference not in ("analytical", "bootstrap", "none"):
            raise DgpSpecError("inference must be 'analytical', 'bootstrap' or 'none'")
        object.__setattr__(self, "estimands", tuple(self.estimands))


@dataclass
class McSummary:
    R: int
    n_ok: int
    n_failed: int
    estimands: dict
    params: dict
    config: dict
    replicates: dict = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        return {"R": self.R, "n_ok": self.n_ok, "n_failed": self.n_failed,
                "estimands": self.estimands, "params": self.params, "config": self.config}


def _ks(z):
    z = z[np.isfinite(z)]
    if z.size < 2:
        return float("nan"), float("nan")
    res = stats.kstest(z, "norm")
    return float(res.statistic), float(res.pvalue)


def mc_experiment(spec: DgpSpec, config: McConfig | None = None, R: int = 100,
                  truth: OracleTruth | None = None, progress=None) -> McSummary:
    """Repeat generate → fit → estimand → SE ``R`` times.

    Replicate ``r`` uses the seed :func:`replicate_seed` ``(spec.seed, r)``;
    the bootstrap inside it is seeded from the same stream.
    """
    from .inference import analytical_variance, bootstrap

    if R < 2:
        raise DgpSpecError("need R >= 2 replications")
    config = config or McConfig()
    truth = truth or oracle_truth(spec)
    model = ModelSpec(config.model or spec.default_model, config.tau or spec.tau,
                      collapse=config.collapse)
    est_specs = None
    labels = None
    est = se = cover = None
    phis = []
    failed = 0
    for r in range(R):
        rs = replicate_seed(spec.seed, r)
        panel, _ = simulate_panel(replace(spec, seed=rs))
        if est_specs is None:
            est_specs = []
            for k in config.estimands:
                est_specs += default_estimands(model.tau, panel, kinds=(k,), benchmark="zero")
            labels = [s.label for s in est_specs]
            est = np.full((R, len(est_specs)), np.nan)
            se = np.full_like(est, np.nan)
            cover = np.full_like(est, np.nan)
        try:
            prep = prepare(panel, model)
            f = fit_prepared(prep, config.weighting)
        except EstimationError:
            failed += 1
            continue
        phis.append(f.params)
        ok = True
        for j, s in enumerate(est_specs):
            form = build_form(f.spec.tau, s, panel)
            est[r, j] = form.value(f.tau_params)
            try:
                if config.inference == "analytical":
                    vr = analytical_variance(f, form, panel, config.level)
                elif config.inference == "bootstrap":
                    vr = bootstrap(panel, model, form, B=config.B, seed=rs, level=config.level,
                                   weighting=config.weighting)
                else:
                    continue
            except EstimationError:
                ok = False
                continue
            se[r, j] = vr.se
            lo, hi = vr.ci
            cover[r, j] = float(lo <= truth.value(s) <= hi)
        if not ok:
            failed += 1
        if progress is not None:
            progress(r)
    summary = {}
    for j, s in enumerate(est_specs):
        tv = truth.value(s)
        e = est[:, j]
        good = np.isfinite(e)
        n = int(good.sum())
        err = e[good] - tv
        sd = float(np.std(e[good], ddof=1)) if n > 1 else float("nan")
        zs = err / se[good, j] if config.inference != "none" else np.array([])
        ks, ksp = _ks(zs)
        cv = cover[good, j]
        summary[labels[j]] = {
            "truth": tv,
            "mean": float(e[good].mean()),
            "bias": float(err.mean()),
            "mcse_bias": sd / math.sqrt(n) if n > 1 else float("nan"),
            "rmse": float(np.sqrt(np.mean(err ** 2))),
            "sd": sd,
            "mean_se": float(np.nanmean(se[good, j])) if config.inference != "none" else None,
            "coverage": float(np.nanmean(cv)) if config.inference != "none" else None,
            "ks_stat": ks,
            "ks_pvalue": ksp,
            "n": n,
        }
    P = np.array(phis)
    params = {}
    for j, lab in enumerate(truth.labels):
        if P.size == 0:
            break
        d = P[:, j] - truth.phi[j]
        params[lab] = {"truth": float(truth.phi[j]), "bias": float(d.mean()),
                       "mcse_bias": float(np.std(P[:, j], ddof=1) / math.sqrt(len(d))) if len(d) > 1 else float("nan"),
                       "rmse": float(np.sqrt(np.mean(d ** 2)))}
    cfg = {"dgp": spec.to_dict(), "model": model.model, "tau": model.tau.to_text(),
           "weighting": config.weighting, "inference": config.inference, "B": config.B,
           "level": config.level, "collapse": config.collapse}
    return McSummary(R, R - failed, failed, summary, params, cfg,
                     {"estimates": est, "se": se, "covered": cover, "labels": labels})
