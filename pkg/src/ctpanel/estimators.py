"""TWFE and first-difference GMM estimation of φ = (γ, β', τ')'.

Model names follow the four model/assumption pairs:

========== ======= ==========================================
model      path    instruments at equation t
========== ======= ==========================================
FEC-STI    TWFE    (none: two-way within transform + OLS)
FEC-SEI    GMM     X_1..X_{t-1}, D_1..D_{t-1}
DPFEC-SEI  GMM     Y_1..Y_{t-2}, X_1..X_{t-1}, D_1..D_{t-1}
DPFEC-STI  GMM     Y_1..Y_{t-2}, X_1..X_{T-1}, D_1..D_{T-1}
========== ======= ==========================================

Estimation is split in two steps. :func:`prepare` builds per-unit arrays
(levels for TWFE; differences and instruments for GMM). The fit functions
then apply the cross-sectional transforms and solve. Resampling units is a
row selection on the prepared arrays, which is what the bootstrap uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    CollinearityError,
    IdentificationError,
    InsufficientPeriodsError,
    NumericalError,
    SpecificationError,
    WeightingError,
    WrongPathError,
)
from .panel import PanelDataset, within_array
from .tau import TauSpec, eval_basis, resolve_tau

__all__ = [
    "MODELS",
    "ModelSpec",
    "InstrumentBlock",
    "FitResult",
    "prepare",
    "estimate_twfe",
    "estimate_gmm",
    "build_instruments",
    "residual_moments",
    "fit",
    "fit_prepared",
    "Prepared",
]

MODELS = ("FEC-SEI", "FEC-STI", "DPFEC-SEI", "DPFEC-STI")
MODEL_ALIASES = {"sei": "FEC-SEI", "sti": "FEC-STI", "dp-sei": "DPFEC-SEI", "dp-sti": "DPFEC-STI"}
RANK_TOL = 1e-10
LAG_Y_LABEL = "lag(y,1)"


def canonical_model(name: str) -> str:
    s = str(name).strip()
    s = MODEL_ALIASES.get(s.lower(), s.upper())
    if s not in MODELS:
        raise SpecificationError(f"unknown model {name!r}; choose from {list(MODEL_ALIASES)}")
    return s


@dataclass(frozen=True)
class ModelSpec:
    """Model/assumption pair, treatment-effect spec and covariate selection.

    ``covariates=None`` uses every covariate of the panel.
    """

    model: str
    tau: TauSpec | str = "homogeneous"
    covariates: tuple | None = None
    collapse: bool = False

    def __post_init__(self):
        object.__setattr__(self, "model", canonical_model(self.model))
        object.__setattr__(self, "tau", resolve_tau(self.tau))
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def dynamic(self) -> bool:
        return self.model.startswith("DP")

    @property
    def path(self) -> str:
        return "twfe" if self.model == "FEC-STI" else "gmm"

    def covariate_names(self, panel: PanelDataset) -> tuple:
        if self.covariates is None:
            return panel.covariate_names
        for c in self.covariates:
            if c not in panel.covariate_names:
                raise SpecificationError(f"covariate {c!r} not in panel")
        return self.covariates

    def labels(self, panel: PanelDataset) -> tuple:
        head = (LAG_Y_LABEL,) if self.dynamic else ()
        return head + self.covariate_names(panel) + self.tau.labels


# --------------------------------------------------------------------------
# instruments

@dataclass(frozen=True, eq=False)
class InstrumentBlock:
    """Per-unit instrument matrices stacked as W[i, e, c].

    Row ``e`` is the differenced equation for period ``eq_periods[e]``.
    ``columns[c]`` describes column c as ``(variable, source period)`` for the
    block-diagonal layout, or ``(variable, "lag", distance)`` /
    ``(variable, "period", s)`` when collapsed. ``block_widths`` gives the
    number of columns per equation in the block-diagonal layout.
    """

    W: np.ndarray
    available: np.ndarray
    eq_periods: tuple
    columns: tuple
    block_widths: tuple
    collapsed: bool = False

    @property
    def n_moments(self) -> int:
        return self.W.shape[2]

    def unit_matrix(self, i: int) -> np.ndarray:
        return self.W[i]


def _eq_periods(spec: ModelSpec, T: int) -> list:
    L = spec.tau.max_lag
    first = max(3, L + 2) if spec.dynamic else L + 2
    if T < first:
        need = first
        raise InsufficientPeriodsError(
            f"{spec.model} with max lag {L} needs at least {need} periods (panel has {T})"
        )
    return list(range(first, T + 1))


def _block_sources(spec: ModelSpec, t: int, T: int, cov_idx) -> list:
    """(variable, column index, source period, collapse key) for the block at t."""
    src = []
    if spec.dynamic:
        src += [("y", None, s, ("y", "lag", t - s)) for s in range(1, t - 1)]
    horizon = T - 1 if spec.model == "DPFEC-STI" else t - 1
    full = spec.model == "DPFEC-STI"
    for j in cov_idx:
        src += [("x", j, s, ("x", j, "period", s) if full else ("x", j, "lag", t - s))
                for s in range(1, horizon + 1)]
    src += [("d", None, s, ("d", "period", s) if full else ("d", "lag", t - s))
            for s in range(1, horizon + 1)]
    return src


def build_instruments(panel: PanelDataset, spec: ModelSpec) -> InstrumentBlock:
    """Instrument matrices for the GMM path (block diagonal unless ``spec.collapse``)."""
    if spec.path != "gmm":
        raise WrongPathError("instruments are only defined for the GMM models")
    N, T = panel.shape
    names = spec.covariate_names(panel)
    cov_idx = [panel.covariate_names.index(c) for c in names]
    periods = _eq_periods(spec, T)
    blocks = [_block_sources(spec, t, T, cov_idx) for t in periods]
    if spec.collapse:
        keys = []
        for b in blocks:
            for *_, key in b:
                if key not in keys:
                    keys.append(key)
        col_of = {k: c for c, k in enumerate(keys)}
        m = len(keys)
    else:
        m = sum(len(b) for b in blocks)
    W = np.zeros((N, len(periods), m))
    avail = np.ones((N, len(periods)), dtype=bool)
    columns = []
    c0 = 0
    for e, b in enumerate(blocks):
        for c, (var, j, s, key) in enumerate(b):
            if var == "y":
                v = panel.outcome[:, s - 1]
            elif var == "x":
                v = panel.covariates[:, s - 1, j]
            else:
                v = panel.treatment[:, s - 1]
            col = col_of[key] if spec.collapse else c0 + c
            W[:, e, col] = np.nan_to_num(v)
            avail[:, e] &= panel.present[:, s - 1]
            if not spec.collapse:
                label = {"y": "y", "d": "d"}.get(var) or panel.covariate_names[j]
                columns.append((label, s))
        c0 += len(b)
    if spec.collapse:
        for k in keys:
            label = panel.covariate_names[k[1]] if k[0] == "x" else k[0]
            columns.append((label,) + tuple(k[-2:]))
    W[~avail] = 0.0
    return InstrumentBlock(W, avail, tuple(periods), tuple(columns),
                           tuple(len(b) for b in blocks), spec.collapse)


# --------------------------------------------------------------------------
# prepared arrays

@dataclass(frozen=True, eq=False)
class Prepared:
    """Per-unit arrays needed by a fit; ``take`` resamples units."""

    spec: ModelSpec
    labels: tuple
    n_periods: int
    # TWFE: levels on the grid
    Y: np.ndarray | None = None
    R: np.ndarray | None = None
    mask: np.ndarray | None = None
    # GMM: differenced equations and instruments
    dY: np.ndarray | None = None
    dR: np.ndarray | None = None
    W: np.ndarray | None = None
    usable: np.ndarray | None = None
    eq_periods: tuple = ()
    instruments: InstrumentBlock | None = None

    @property
    def n_units(self) -> int:
        return (self.Y if self.Y is not None else self.dY).shape[0]

    def take(self, idx) -> "Prepared":
        kw = {}
        for name in ("Y", "R", "mask", "dY", "dR", "W", "usable"):
            a = getattr(self, name)
            if a is not None:
                kw[name] = a[idx]
        return replace(self, instruments=None, **kw)


def _levels(panel: PanelDataset, spec: ModelSpec):
    names = spec.covariate_names(panel)
    tau = spec.tau.bind(panel.z_names)
    M = eval_basis(tau, panel)
    X = np.stack([panel.covariate(c) for c in names], axis=2) if names else np.zeros(panel.shape + (0,))
    parts = []
    mask = M.mask.copy()
    if spec.dynamic:
        ylag = np.full(panel.shape, np.nan)
        ylag[:, 1:] = panel.outcome[:, :-1]
        parts.append(ylag[:, :, None])
        mask[:, 0] = False
        mask[:, 1:] &= panel.present[:, :-1]
    parts += [X, M.values]
    R = np.concatenate(parts, axis=2)
    return panel.outcome, R, mask, tau


def prepare(panel: PanelDataset, spec: ModelSpec) -> Prepared:
    Y, R, mask, tau = _levels(panel, spec)
    spec = replace(spec, tau=tau)
    labels = spec.labels(panel)
    if spec.path == "twfe":
        if spec.dynamic:
            raise SpecificationError("dynamic models are estimated by GMM only")
        return Prepared(spec, labels, panel.n_periods, Y=np.nan_to_num(Y),
                        R=np.nan_to_num(R), mask=mask)
    inst = build_instruments(panel, spec)
    cols = np.array(inst.eq_periods) - 1
    dY = Y[:, cols] - Y[:, cols - 1]
    dR = R[:, cols] - R[:, cols - 1]
    usable = mask[:, cols] & mask[:, cols - 1] & inst.available
    dY = np.where(usable, dY, 0.0)
    dR = np.where(usable[:, :, None], dR, 0.0)
    return Prepared(spec, labels, panel.n_periods, dY=dY, dR=dR, W=inst.W, usable=usable,
                    eq_periods=inst.eq_periods, instruments=inst)


# --------------------------------------------------------------------------
# results

@dataclass(frozen=True, eq=False)
class FitResult:
    """Estimated parameters plus what inference needs.

    For the TWFE path ``residuals`` holds ε̈ on the grid (zero where unused);
    for GMM it holds Δε* per unit and equation. ``design`` keeps the per-unit
    arrays (transformed regressors, instruments) used by the variance code.
    """

    params: np.ndarray
    labels: tuple
    spec: ModelSpec
    estimator: str
    weighting: str
    n_units: int
    n_periods: int
    n_obs: int
    n_moments: int
    residuals: np.ndarray
    usable: np.ndarray
    design: dict
    omega: np.ndarray | None = None
    stage1_params: np.ndarray | None = None
    stage1_residuals: np.ndarray | None = None
    eq_periods: tuple = ()
    balanced: bool = True
    notes: tuple = ()
    stats: dict = field(default_factory=dict)

    @property
    def tau(self) -> TauSpec:
        return self.spec.tau

    @property
    def tau_params(self) -> np.ndarray:
        return self.params[len(self.params) - self.spec.tau.S:]

    @property
    def tau_offset(self) -> int:
        return len(self.params) - self.spec.tau.S

    def param(self, label: str) -> float:
        return float(self.params[self.labels.index(label)])

    def summary(self) -> dict:
        return {
            "estimator": self.estimator,
            "model": self.spec.model,
            "weighting": self.weighting,
            "labels": list(self.labels),
            "params": [float(v) for v in self.params],
            "n_units": self.n_units,
            "n_periods": self.n_periods,
            "n_obs": self.n_obs,
            "n_moments": self.n_moments,
            "balanced": self.balanced,
            "notes": list(self.notes),
            **{k: v for k, v in self.stats.items()},
        }


def _rank_checked_lstsq(A, b, labels, err_cls, what):
    """Least squares with a relative singular-value rank check."""
    if A.shape[0] < A.shape[1]:
        raise err_cls(f"{what}: {A.shape[0]} rows for {A.shape[1]} parameters")
    x, _, _, sv = np.linalg.lstsq(A, b, rcond=None)
    smax = sv[0] if sv.size else 0.0
    if smax == 0.0 or sv[-1] <= RANK_TOL * smax:
        _, s, vt = np.linalg.svd(A, full_matrices=False)
        null = vt[-1]
        cols = [labels[j] for j in np.flatnonzero(np.abs(null) > 1e-6 * np.abs(null).max())]
        msg = f"{what}: rank deficient (dependent columns: {', '.join(cols)})"
        if err_cls is CollinearityError:
            raise CollinearityError(msg, cols)
        raise err_cls(msg)
    return x


def _check_absorbed(transformed, levels, labels, err_cls, what):
    """Flag regressors that the transform reduces to rounding noise."""
    t = np.sqrt((transformed ** 2).sum(axis=0))
    lv = np.sqrt((levels ** 2).sum(axis=0))
    gone = np.flatnonzero(t <= 1e-10 * np.maximum(lv, 1e-300))
    if gone.size:
        cols = [labels[j] for j in gone]
        msg = f"{what}: no variation left in {', '.join(cols)} after the transform"
        if err_cls is CollinearityError:
            raise CollinearityError(msg, cols)
        raise err_cls(msg)


# --------------------------------------------------------------------------
# TWFE

def _fit_twfe(prep: Prepared, iterate_unbalanced: bool = True) -> FitResult:
    Y, R, mask = prep.Y, prep.R, prep.mask
    N = Y.shape[0]
    cols = mask.any(axis=0)
    Y, R, mask = Y[:, cols], R[:, cols], mask[:, cols]
    balanced = bool(mask.all())
    p = R.shape[2]
    notes = []
    if balanced:
        Ydot = Y - Y.mean(axis=1, keepdims=True)
        Rdot = R - R.mean(axis=1, keepdims=True)
        Ydd = Ydot - Ydot.mean(axis=0, keepdims=True)
        Rdd = Rdot - Rdot.mean(axis=0, keepdims=True)
    else:
        Ydd = within_array(Y, mask, iterate=iterate_unbalanced)
        Rdd = within_array(R, mask, iterate=iterate_unbalanced)
        Rdot = None
        notes.append("unbalanced: within transform by alternating projections" if iterate_unbalanced
                     else "unbalanced: one-pass present-cell means")
    A = Rdd[mask]
    b = Ydd[mask]
    _check_absorbed(A, R[mask], prep.labels, CollinearityError, "TWFE design")
    phi = _rank_checked_lstsq(A, b, prep.labels, CollinearityError, "TWFE design")
    resid = np.where(mask, Ydd - Rdd @ phi, 0.0)
    tss = float(b @ b)
    rss = float((resid ** 2).sum())
    stats = {"r2_within": 1.0 - rss / tss if tss > 0 else float("nan")}
    periods = tuple(int(t) + 1 for t in np.flatnonzero(cols))
    design = {"Rdd": Rdd, "Ydd": Ydd, "Rdot": Rdot, "mask": mask}
    return FitResult(
        params=phi, labels=prep.labels, spec=prep.spec, estimator="twfe", weighting="none",
        n_units=N, n_periods=prep.n_periods, n_obs=int(mask.sum()), n_moments=p,
        residuals=resid, usable=mask, design=design, eq_periods=periods,
        balanced=balanced, notes=tuple(notes), stats=stats,
    )


def estimate_twfe(panel: PanelDataset, spec: ModelSpec, iterate_unbalanced: bool = True) -> FitResult:
    """OLS after the two-way within transform (model FEC-STI).

    On unbalanced samples the within transform is computed by alternating
    projections so that the estimate equals the unit+period dummy regression.
    """
    if spec.path != "twfe":
        raise WrongPathError(f"{spec.model} is estimated by GMM, not TWFE")
    return _fit_twfe(prepare(panel, spec), iterate_unbalanced)


# --------------------------------------------------------------------------
# GMM

def _cross_demean_eq(a, usable):
    """Demean each equation over its usable units; unusable rows stay 0."""
    u = usable if a.ndim == 2 else usable[:, :, None]
    n = usable.sum(axis=0)
    n = np.where(n > 0, n, 1)
    mu = np.where(u, a, 0.0).sum(axis=0) / (n if a.ndim == 2 else n[:, None])
    return np.where(u, a - mu[None], 0.0)


def _whitener_from_meat(S, notes):
    """Return (A, Omega) with A'A = Omega = S^{-1} (pseudo-inverse if singular)."""
    lam, V = np.linalg.eigh(S)
    top = lam[-1] if lam.size else 0.0
    if top <= 0:
        raise NumericalError("two-step meat matrix is zero or negative")
    if lam[0] < -1e-10 * top:
        raise NumericalError(f"two-step meat matrix has a negative eigenvalue ({lam[0]:.3g})")
    keep = lam > RANK_TOL * top
    if not keep.all():
        notes.append(f"two-step meat matrix rank {int(keep.sum())} of {lam.size}: pseudo-inverse used")
    Vk, lk = V[:, keep], lam[keep]
    A = (Vk / np.sqrt(lk)).T
    return A, (Vk / lk) @ Vk.T


def _solve_gmm(W, dRs, dYs, A, labels):
    N = W.shape[0]
    G = np.einsum("iem,iep->mp", W, dRs) / N
    g = np.einsum("iem,ie->m", W, dYs) / N
    phi = _rank_checked_lstsq(A @ G if A is not None else G, A @ g if A is not None else g,
                              labels, IdentificationError, "GMM moment Jacobian")
    return phi, G, g


def _fit_gmm(prep: Prepared, weighting="two-step", center_meat: bool = True) -> FitResult:
    W, usable = prep.W, prep.usable
    N, n_e, _ = W.shape
    p = prep.dR.shape[2]
    notes = []
    dYs = _cross_demean_eq(prep.dY, usable)
    dRs = _cross_demean_eq(prep.dR, usable)
    # instrument columns that are constant over usable units carry no information
    Wc = _cross_demean_eq(W, usable)
    scale = np.abs(W).max(axis=(0, 1))
    live = (np.abs(Wc).max(axis=(0, 1)) > 1e-12 * np.maximum(scale, 1.0))
    if not live.all():
        notes.append(f"dropped {int((~live).sum())} instrument column(s) constant across units")
        W, Wc = W[:, :, live], Wc[:, :, live]
    _check_absorbed(dRs[usable], prep.dR[usable], prep.labels, IdentificationError,
                    "GMM design")
    m = W.shape[2]
    if m < p:
        raise IdentificationError(f"{m} usable moment conditions for {p} parameters")
    if not usable.any(axis=0).all():
        raise IdentificationError("an equation period has no usable units")

    if isinstance(weighting, str):
        wname = weighting.lower()
        if wname not in ("identity", "two-step"):
            raise WeightingError(f"unknown weighting {weighting!r}")
        A1 = None
        omega = np.eye(m)
    else:
        wname = "user"
        omega = np.asarray(weighting, dtype=float)
        if omega.shape != (m, m):
            raise WeightingError(f"weighting matrix must be {m}x{m}")
        if not np.allclose(omega, omega.T, rtol=1e-10, atol=1e-12 * np.abs(omega).max()):
            raise WeightingError("weighting matrix is not symmetric")
        try:
            Lc = np.linalg.cholesky((omega + omega.T) / 2)
        except np.linalg.LinAlgError:
            raise WeightingError("weighting matrix is not positive definite") from None
        A1 = Lc.T
    phi1, G, g = _solve_gmm(W, dRs, dYs, A1, prep.labels)
    e1 = np.where(usable, dYs - dRs @ phi1, 0.0)
    phi, e = phi1, e1
    stage1 = None
    if wname == "two-step":
        stage1 = phi1
        scale_y = max(1.0, float(np.abs(dYs).max(initial=0.0)))
        if float(np.abs(e1).max(initial=0.0)) <= 1e-10 * scale_y:
            notes.append("first-stage residuals are zero: first stage kept")
        else:
            Z = Wc if center_meat else W
            h = np.einsum("iem,ie->im", Z, e1)
            S = h.T @ h / N
            A2, omega = _whitener_from_meat(S, notes)
            phi, G, g = _solve_gmm(W, dRs, dYs, A2, prep.labels)
            e = np.where(usable, dYs - dRs @ phi, 0.0)
    design = {"W": W, "Wc": Wc, "dR": prep.dR, "dRs": dRs, "dYs": dYs, "G": G, "g": g}
    return FitResult(
        params=phi, labels=prep.labels, spec=prep.spec, estimator="gmm", weighting=wname,
        n_units=N, n_periods=prep.n_periods, n_obs=int(usable.sum()), n_moments=m,
        residuals=e, usable=usable, design=design, omega=omega, stage1_params=stage1,
        stage1_residuals=e1 if stage1 is not None else None, eq_periods=prep.eq_periods,
        balanced=bool(usable.all()), notes=tuple(notes),
    )


def estimate_gmm(panel: PanelDataset, spec: ModelSpec, weighting="two-step",
                 center_meat: bool = True) -> FitResult:
    """First-difference GMM on cross-demeaned equations.

    Parameters
    ----------
    weighting : {"identity", "two-step"} or ndarray
        ``"two-step"`` re-weights with the inverse of the first-stage moment
        covariance. A user matrix must be symmetric positive definite.
    center_meat : bool
        Centre the instruments across units when forming the two-step meat
        matrix (the moment contributions are then mean-zero under the model).
    """
    if spec.path != "gmm":
        raise WrongPathError("FEC-STI is estimated by TWFE")
    return _fit_gmm(prepare(panel, spec), weighting, center_meat)


def fit(panel: PanelDataset, spec: ModelSpec, weighting="two-step", **kw) -> FitResult:
    """Dispatch on the model: TWFE for FEC-STI, GMM otherwise."""
    if spec.path == "twfe":
        return estimate_twfe(panel, spec, **kw)
    return estimate_gmm(panel, spec, weighting, **kw)


def fit_prepared(prep: Prepared, weighting="two-step", **kw) -> FitResult:
    if prep.spec.path == "twfe":
        return _fit_twfe(prep, **kw)
    return _fit_gmm(prep, weighting, **kw)


def residual_moments(fit: FitResult) -> np.ndarray:
    """Per-unit moment contributions W_i'Δε*_i, shape (N, m)."""
    if fit.estimator != "gmm":
        raise WrongPathError("moment contributions exist only for GMM fits")
    return np.einsum("iem,ie->im", fit.design["W"], fit.residuals)
