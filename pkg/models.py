from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, root_validator, validator

from errors import InvalidShape

DEFAULT_TAU = 0.15
DEFAULT_KAPPA_MIN = 0.2
DEFAULT_KAPPA_MAX = 20.0
# floor applied to the smoothed absolute value before log / negative powers
A_FLOOR = 1e-12
# x'alpha is clipped to this range before exponentiation
ETA_CLIP = 700.0
INTERCEPT = "(Intercept)"


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


# ────────────────────────── distribution ────────────────────────────────────

@dataclass(frozen=True)
class SgndShape:
    kappa: float
    tau: float = DEFAULT_TAU
    kappa_min: float = DEFAULT_KAPPA_MIN
    kappa_max: float = DEFAULT_KAPPA_MAX

    def __post_init__(self):
        if not (self.tau > 0):
            raise InvalidShape("tau must be positive", tau=self.tau)
        if not (self.kappa_min > 0):
            raise InvalidShape("kappa_min must be positive", kappa_min=self.kappa_min)
        if not (self.kappa_min < self.kappa <= self.kappa_max):
            raise InvalidShape(
                "kappa must lie in (kappa_min, kappa_max]",
                kappa=self.kappa, kappa_min=self.kappa_min, kappa_max=self.kappa_max,
            )

    @property
    def nu0(self) -> float:
        return math.log(self.kappa - self.kappa_min)

    @classmethod
    def from_nu0(cls, nu0: float, tau: float = DEFAULT_TAU, kappa_min: float = DEFAULT_KAPPA_MIN,
                 kappa_max: float = DEFAULT_KAPPA_MAX) -> "SgndShape":
        return cls(kappa=kappa_min + math.exp(nu0), tau=tau, kappa_min=kappa_min, kappa_max=kappa_max)


@dataclass(frozen=True)
class NormConstEval:
    """log c~ and its first two derivatives in nu0, all at one (kappa, tau, kappa_min)."""
    log_c: float
    dlogc_dnu: float
    d2logc_dnu2: float
    abs_tol: float


# ────────────────────────── data & parameters ───────────────────────────────

@dataclass(frozen=True)
class Dataset:
    y: np.ndarray
    X: np.ndarray
    col_sd: np.ndarray
    names: Tuple[str, ...]
    scaled: bool = False
    response: str = "y"

    def __post_init__(self):
        y = _frozen(self.y)
        X = _frozen(self.X)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"design {X.shape} does not match response {y.shape}")
        if not np.all(X[:, 0] == 1.0):
            raise ValueError("first design column must be the intercept")
        n, k = X.shape
        if n <= k:
            raise ValueError(f"need n > p+1 rows, got n={n}, p+1={k}")
        if len(self.names) != k - 1 or len(self.col_sd) != k - 1:
            raise ValueError("names / col_sd must have one entry per covariate")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "col_sd", _frozen(self.col_sd))
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1] - 1

    @classmethod
    def from_arrays(cls, y, covariates, names: Optional[Sequence[str]] = None,
                    response: str = "y") -> "Dataset":
        Z = np.asarray(covariates, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        n, p = Z.shape
        if names is None:
            names = [f"x{j + 1}" for j in range(p)]
        X = np.column_stack([np.ones(n), Z])
        col_sd = Z.std(axis=0, ddof=1) if n > 1 else np.zeros(p)
        return cls(y=np.asarray(y, dtype=float), X=X, col_sd=col_sd, names=tuple(names),
                   scaled=False, response=response)

    def take(self, rows) -> "Dataset":
        """Row subset with covariate SDs recomputed (used for resampling)."""
        if self.scaled:
            raise ValueError("take() works on unscaled data")
        rows = np.asarray(rows)
        return Dataset.from_arrays(self.y[rows], self.X[rows, 1:], self.names, self.response)


@dataclass(frozen=True)
class ThetaVector:
    beta: np.ndarray
    alpha: np.ndarray
    nu0: float

    def __post_init__(self):
        beta = _frozen(self.beta)
        alpha = _frozen(self.alpha)
        if beta.ndim != 1 or beta.shape != alpha.shape:
            raise ValueError("beta and alpha must be vectors of equal length")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "nu0", float(self.nu0))

    @property
    def p(self) -> int:
        return self.beta.shape[0] - 1

    @property
    def size(self) -> int:
        return 2 * (self.p + 1) + 1

    def kappa(self, kappa_min: float) -> float:
        return kappa_min + math.exp(self.nu0)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.beta, self.alpha, [self.nu0]])

    @classmethod
    def from_array(cls, arr) -> "ThetaVector":
        arr = np.asarray(arr, dtype=float)
        if arr.ndim != 1 or arr.size % 2 != 1 or arr.size < 3:
            raise ValueError(f"parameter vector of length {arr.size} is not 2(p+1)+1")
        k = (arr.size - 1) // 2
        return cls(beta=arr[:k], alpha=arr[k:2 * k], nu0=arr[-1])

    @classmethod
    def zeros(cls, p: int, nu0: float = 0.0) -> "ThetaVector":
        return cls(beta=np.zeros(p + 1), alpha=np.zeros(p + 1), nu0=nu0)


def beta_index(p: int) -> slice:
    return slice(0, p + 1)


def alpha_index(p: int) -> slice:
    return slice(p + 1, 2 * (p + 1))


def nu_index(p: int) -> int:
    return 2 * (p + 1)


def param_labels(names: Sequence[str]) -> List[Tuple[str, str]]:
    """(component, variable) for every entry of the full parameter vector."""
    cols = [INTERCEPT, *names]
    return [("beta", c) for c in cols] + [("alpha", c) for c in cols] + [("nu", "nu0")]


def penalized_mask(p: int) -> np.ndarray:
    mask = np.zeros(2 * (p + 1) + 1, dtype=bool)
    mask[1:p + 1] = True
    mask[p + 2:2 * (p + 1)] = True
    return mask


# ────────────────────────── penalty / derivatives ───────────────────────────

@dataclass(frozen=True)
class PenaltySpec:
    lam: float
    epsilon: float
    penalize_mask: np.ndarray

    def __post_init__(self):
        if not (self.lam >= 0):
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        mask = _frozen(self.penalize_mask, dtype=bool)
        p = (mask.size - 3) // 2
        if mask[0] or mask[p + 1] or mask[-1]:
            raise ValueError("intercepts and nu0 are never penalized")
        object.__setattr__(self, "penalize_mask", mask)

    @classmethod
    def for_design(cls, p: int, lam: float, epsilon: float) -> "PenaltySpec":
        return cls(lam=float(lam), epsilon=float(epsilon), penalize_mask=penalized_mask(p))

    def with_epsilon(self, epsilon: float) -> "PenaltySpec":
        return replace(self, epsilon=float(epsilon))

    @staticmethod
    def resolve_lambda(criterion: Union[str, float], n: int) -> float:
        if isinstance(criterion, str):
            key = criterion.lower()
            if key == "bic":
                return math.log(n)
            if key == "aic":
                return 2.0
            return float(key)
        return float(criterion)


@dataclass(frozen=True)
class ScoreBlocks:
    grad_beta: np.ndarray
    grad_alpha: np.ndarray
    grad_nu: float
    z_beta: np.ndarray
    z_alpha: np.ndarray
    z_nu: np.ndarray
    xi_beta: np.ndarray
    xi_alpha: np.ndarray

    @property
    def gradient(self) -> np.ndarray:
        return np.concatenate([self.grad_beta, self.grad_alpha, [self.grad_nu]])


@dataclass(frozen=True)
class InfoBlocks:
    Wb: np.ndarray
    Wa: np.ndarray
    Wn: np.ndarray
    Wba: np.ndarray
    Wbn: np.ndarray
    Wan: np.ndarray
    Sigma_beta: np.ndarray
    Sigma_alpha: np.ndarray
    unpenalized: np.ndarray          # I0
    assembled_full: np.ndarray       # I = I0 + penalty curvature
    assembled_block_diag: np.ndarray
    eta_clipped: bool = False


# ────────────────────────── configuration ───────────────────────────────────

class TelescopeConfig(BaseModel):
    eps_start: float = 10.0
    eps_end: float = 1e-4
    steps: int = 100
    omega: float = 1e-8
    zero_tol: float = 1e-5
    max_inner_iter: int = 1000
    max_halvings: int = 20
    warm_start: bool = True
    nu_floor: float = math.log(1e-4)

    class Config:
        allow_mutation = False
        extra = "forbid"

    @validator("eps_end", "omega", "zero_tol")
    def _positive(cls, v):
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @validator("steps")
    def _enough_steps(cls, v):
        if v < 2:
            raise ValueError("telescope needs at least two steps")
        return v

    @validator("max_inner_iter", "max_halvings")
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    @root_validator(skip_on_failure=True)
    def _ordered(cls, values):
        if not values["eps_start"] > values["eps_end"]:
            raise ValueError("eps_start must exceed eps_end")
        return values

    @property
    def decay(self) -> float:
        return (self.eps_end / self.eps_start) ** (1.0 / (self.steps - 1))

    def epsilons(self) -> np.ndarray:
        eps = np.geomspace(self.eps_start, self.eps_end, self.steps)
        eps[0], eps[-1] = self.eps_start, self.eps_end
        return eps

    @classmethod
    def parse(cls, triple: str, **overrides) -> "TelescopeConfig":
        """Parse the ``start:end:steps`` CLI syntax, e.g. ``10:1e-4:100``."""
        parts = triple.split(":")
        if len(parts) != 3:
            raise ValueError(f"telescope must look like start:end:steps, got {triple!r}")
        return cls(eps_start=float(parts[0]), eps_end=float(parts[1]), steps=int(parts[2]), **overrides)


Mode = Literal["mpr", "spr"]
Family = Literal["sgnd", "normal-fixed", "laplace-fixed"]


class FitConfig(BaseModel):
    tau: float = DEFAULT_TAU
    kappa_min: float = DEFAULT_KAPPA_MIN
    kappa_max: float = DEFAULT_KAPPA_MAX
    criterion: Union[float, str] = "bic"
    mode: Mode = "mpr"
    family: Family = "sgnd"
    fixed_nu: Optional[float] = None
    telescope: TelescopeConfig = TelescopeConfig()

    class Config:
        allow_mutation = False
        extra = "forbid"

    @validator("criterion")
    def _criterion(cls, v):
        if isinstance(v, str):
            if v.lower() in ("bic", "aic"):
                return v.lower()
            v = float(v)
        if v < 0:
            raise ValueError("numeric penalty weight must be non-negative")
        return v

    @root_validator(skip_on_failure=True)
    def _shape_bounds(cls, values):
        tau, kmin, kmax = values["tau"], values["kappa_min"], values["kappa_max"]
        if not (tau > 0 and kmin > 0 and kmax > kmin):
            raise ValueError("need tau > 0 and 0 < kappa_min < kappa_max")
        family = values["family"]
        if values.get("fixed_nu") is None and family != "sgnd":
            target = 2.0 if family == "normal-fixed" else 1.0
            if target <= kmin:
                raise ValueError(f"{family} needs kappa_min < {target}")
            values["fixed_nu"] = math.log(target - kmin)
        return values

    def lam(self, n: int) -> float:
        return PenaltySpec.resolve_lambda(self.criterion, n)

    def shape(self, nu0: float) -> SgndShape:
        return SgndShape.from_nu0(nu0, tau=self.tau, kappa_min=self.kappa_min, kappa_max=self.kappa_max)

    def with_telescope(self, **changes) -> "FitConfig":
        return self.copy(update={"telescope": self.telescope.copy(update=changes)})


# ────────────────────────── fit outputs ─────────────────────────────────────

@dataclass(frozen=True)
class CovarianceResult:
    index: np.ndarray                 # positions in the full parameter vector
    param_labels: Tuple[Tuple[str, str], ...]
    estimate: np.ndarray              # standardized scale
    cov: np.ndarray
    se: np.ndarray
    estimate_original: np.ndarray
    cov_original: np.ndarray
    se_original: np.ndarray
    breakdown_flag: bool

    def full_se(self, size: int, original: bool = True) -> np.ndarray:
        """SEs scattered into a full-length vector, NaN where not estimated."""
        out = np.full(size, np.nan)
        out[self.index] = self.se_original if original else self.se
        return out


@dataclass(frozen=True)
class BicReport:
    bic: float
    df: int
    loglik_at_hat: float
    n: int
    delta_bic_beta: Dict[str, float] = field(default_factory=dict)
    delta_bic_alpha: Dict[str, float] = field(default_factory=dict)
    delta_bic_both: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class BootstrapResult:
    """Resample SEs for the parameters estimated in the original fit (original scale)."""
    index: np.ndarray
    param_labels: Tuple[Tuple[str, str], ...]
    se: np.ndarray
    estimates: np.ndarray             # successful resamples x len(index)
    n_failed: int
    B: int

    def to_frame(self, se_sandwich: Optional[np.ndarray] = None) -> pd.DataFrame:
        return pd.DataFrame({
            "component": [c for c, _ in self.param_labels],
            "variable": [v for _, v in self.param_labels],
            "se_boot": self.se,
            "se_sandwich": np.full(self.se.size, np.nan) if se_sandwich is None else se_sandwich,
            "n_failed": self.n_failed,
        })


@dataclass(frozen=True)
class FitDiagnostics:
    iterations: Tuple[int, ...]
    halvings: Tuple[int, ...]
    converged: Tuple[bool, ...]
    stalled: Tuple[bool, ...]
    nu_clamped: bool
    eta_clipped: bool
    wall_time: float

    @property
    def total_iterations(self) -> int:
        return int(sum(self.iterations))

    @property
    def any_stalled(self) -> bool:
        return any(self.stalled)

    @property
    def fully_converged(self) -> bool:
        """Every step met the omega tolerance; a stalled step does not count."""
        return all(self.converged) and not self.any_stalled


@dataclass(frozen=True)
class FitResult:
    theta_scaled: ThetaVector
    theta_original: ThetaVector
    active_beta: np.ndarray
    active_alpha: np.ndarray
    kappa_hat: float
    covariance: CovarianceResult
    loglik: float
    bic: float
    df: int
    sic_trace: Tuple[np.ndarray, ...]
    path: np.ndarray
    epsilons: np.ndarray
    diagnostics: FitDiagnostics
    names: Tuple[str, ...]
    n: int
    free_mask: np.ndarray
    config: FitConfig

    @property
    def se(self) -> np.ndarray:
        return self.covariance.se_original

    @property
    def cov(self) -> np.ndarray:
        return self.covariance.cov_original

    @property
    def breakdown_flag(self) -> bool:
        return self.covariance.breakdown_flag

    def coef_table(self, level: float = 0.95) -> pd.DataFrame:
        """Coefficients on both scales with SE, confidence limits and selection flag."""
        from inference import confidence_intervals

        labels = param_labels(self.names)
        orig = self.theta_original.to_array()
        std = self.theta_scaled.to_array()
        ci = confidence_intervals(self.covariance, level=level)
        se = np.full(orig.size, np.nan)
        lo = np.full(orig.size, np.nan)
        hi = np.full(orig.size, np.nan)
        se[self.covariance.index] = ci["se"].to_numpy()
        lo[self.covariance.index] = ci["lower"].to_numpy()
        hi[self.covariance.index] = ci["upper"].to_numpy()
        return pd.DataFrame({
            "component": [c for c, _ in labels],
            "variable": [v for _, v in labels],
            "estimate_original_scale": orig,
            "estimate_standardized": std,
            "se": se,
            "ci_lo": lo,
            "ci_hi": hi,
            "selected": std != 0.0,
        })


# ────────────────────────── simulation ──────────────────────────────────────

CANONICAL_BETA = (0, 1, .5, .5, 1, .5, 1, 0, 0, 0, 0, 0, 0)
CANONICAL_ALPHA = (0, .5, 1, .5, 1, 0, 0, .5, 1, 0, 0, 0, 0)
CANONICAL_COVARIATES = ("exp", "mvn", "bern", "norm", "norm", "mvn",
                        "norm", "norm", "mvn", "bern", "exp", "mvn")
COVARIATE_TAGS = ("exp", "bern", "norm", "mvn")


class SimScenario(BaseModel):
    name: str = "table1"
    beta_true: List[float] = list(CANONICAL_BETA)
    alpha_true: List[float] = list(CANONICAL_ALPHA)
    kappa: float = 2.0
    n: int = 1000
    tau: float = DEFAULT_TAU
    kappa_min: float = DEFAULT_KAPPA_MIN
    covariate_spec: List[str] = list(CANONICAL_COVARIATES)
    seed: int = 1

    class Config:
        allow_mutation = False
        extra = "forbid"

    @validator("covariate_spec", each_item=True)
    def _known_tag(cls, v):
        if v not in COVARIATE_TAGS:
            raise ValueError(f"unknown covariate generator {v!r}")
        return v

    @root_validator(skip_on_failure=True)
    def _consistent(cls, values):
        p = len(values["covariate_spec"])
        if len(values["beta_true"]) != p + 1 or len(values["alpha_true"]) != p + 1:
            raise ValueError("truth vectors must have one entry per covariate plus intercept")
        if not values["kappa"] > values["kappa_min"]:
            raise ValueError("kappa must exceed kappa_min")
        if values["n"] < 1:
            raise ValueError("n must be positive")
        return values

    @property
    def p(self) -> int:
        return len(self.covariate_spec)

    @property
    def nu0_true(self) -> float:
        return math.log(self.kappa - self.kappa_min)

    def theta_true(self) -> ThetaVector:
        return ThetaVector(beta=np.array(self.beta_true), alpha=np.array(self.alpha_true), nu0=self.nu0_true)

    @classmethod
    def canonical(cls, kappa: float = 2.0, n: int = 1000, seed: int = 1, tau: float = DEFAULT_TAU,
                  **kw) -> "SimScenario":
        return cls(name=f"table1-kappa{kappa:g}", kappa=kappa, n=n, seed=seed, tau=tau, **kw)

    @classmethod
    def null(cls, kappa: float = 2.0, n: int = 500, seed: int = 1, **kw) -> "SimScenario":
        return cls(name="null", beta_true=[0.0] * 13, alpha_true=[0.0] * 13, kappa=kappa, n=n, seed=seed, **kw)

    @classmethod
    def homoscedastic(cls, kappa: float = 1.0, n: int = 500, seed: int = 1, tau: float = 0.05,
                      **kw) -> "SimScenario":
        return cls(name=f"homoscedastic-kappa{kappa:g}", alpha_true=[0.0] * 13, kappa=kappa, n=n,
                   seed=seed, tau=tau, **kw)


@dataclass(frozen=True)
class SelectionMetrics:
    C: float
    IC: float
    PT: float
    MSE: float
    # incorrect zeros in each replicate, in replicate order
    ic_counts: Tuple[int, ...] = ()

    @property
    def ic_free(self) -> int:
        """Replicates that kept every true effect of this component."""
        return sum(1 for c in self.ic_counts if c == 0)


@dataclass(frozen=True)
class MetricsSummary:
    components: Dict[str, SelectionMetrics]
    pt_joint: float
    params: pd.DataFrame             # label, truth, mean, SE, SEE, CP
    replicate_count: int
    failure_count: int
    breakdown_rate: float
    se_defined: bool

    @property
    def ic_free_joint(self) -> int:
        """Replicates with no incorrect zero in any component."""
        counts = [m.ic_counts for m in self.components.values()]
        return sum(1 for per_rep in zip(*counts) if not any(per_rep))

    def selection_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {
            comp: {"C": m.C, "IC": m.IC, "PT": m.PT, "MSE": m.MSE, "IC_free": m.ic_free}
            for comp, m in self.components.items()
        }
        out["PT_joint"] = self.pt_joint
        out["IC_free_joint"] = self.ic_free_joint
        out["replicates"] = self.replicate_count
        out["failures"] = self.failure_count
        out["breakdown_rate"] = self.breakdown_rate
        out["se_defined"] = self.se_defined
        return out


# ────────────────────────── cli ─────────────────────────────────────────────

class RunConfig(BaseModel):
    command: Literal["fit", "simulate", "delta-bic", "bootstrap", "density-curve"]
    data_path: Optional[str] = None
    response: Optional[str] = None
    covariates: Optional[List[str]] = None     # None = all remaining columns
    fit: FitConfig = FitConfig()
    seed: int = 1
    out_prefix: str = ""
    workers: int = 1
    record_timing: bool = False

    class Config:
        allow_mutation = False
        extra = "forbid"

    @validator("workers")
    def _workers(cls, v):
        if v < 1:
            raise ValueError("workers must be at least 1")
        return v


class DensityCurveRequest(BaseModel):
    vary: str
    levels: List[Union[float, str]] = ["Q1", "Q3"]
    others_at: Union[str, Dict[str, float]] = "median"
    y_min: Optional[float] = None
    y_max: Optional[float] = None
    points: int = 200

    class Config:
        allow_mutation = False
        extra = "forbid"

    @validator("points")
    def _points(cls, v):
        if v < 2:
            raise ValueError("need at least two grid points")
        return v

    @validator("levels", each_item=True)
    def _level(cls, v):
        if isinstance(v, str) and v.upper() not in ("Q1", "Q3", "MEDIAN"):
            return float(v)
        return v.upper() if isinstance(v, str) else v
