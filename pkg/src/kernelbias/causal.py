"""Ordinary least squares on dummy/interaction designs, with classical and
HC1 standard errors, pairwise coefficient-equality F-tests, and a nested
cross-specification Wald comparison.

Designs follow the interaction convention: one slope column per protected
combination (the intervention value on that combination's rows, zero
elsewhere) plus the combination dummy itself as a control. With a saturated
dummy set no intercept is added, which would be perfectly collinear.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "Observation",
    "DesignMatrix",
    "RegressionFit",
    "FTestResult",
    "DegenerateDesignError",
    "DegenerateTestError",
    "InvalidComparisonError",
    "build_design",
    "ols_fit",
    "pairwise_f_test",
    "spec_comparison_test",
    "f_dist_p",
    "t_dist_p",
]


class DegenerateDesignError(ValueError):
    """Raised when the design matrix is rank deficient."""


class DegenerateTestError(ValueError):
    """Raised when a test contrast has singular covariance."""


class InvalidComparisonError(ValueError):
    """Raised when two fits cannot be compared (non-nested designs)."""


@dataclass(frozen=True)
class Observation:
    """One analysis row: intervention value x, response y, and attributes."""

    x: float
    y: float
    attributes: Mapping[str, object]


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray  # (n, k)
    y: np.ndarray  # (n,)
    column_names: tuple[str, ...]

    def __post_init__(self):
        x = np.asarray(self.values, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"shape mismatch: X {x.shape}, y {y.shape}")
        if x.shape[1] != len(self.column_names):
            raise ValueError("one name per column required")
        zero = [n for n, col in zip(self.column_names, x.T) if not np.any(col)]
        if zero:
            raise DegenerateDesignError(f"all-zero columns: {zero}")
        object.__setattr__(self, "values", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n_obs(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class RegressionFit:
    design: DesignMatrix
    beta_hat: np.ndarray
    cov: np.ndarray
    std_err: np.ndarray
    t_stat: np.ndarray
    p_value: np.ndarray
    residuals: np.ndarray
    sigma2: float
    dof: int
    r_squared: float
    robust: bool = field(default=False)

    @property
    def column_names(self) -> tuple[str, ...]:
        return self.design.column_names

    def index_of(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise KeyError(f"no coefficient named {name!r}") from None

    def coef(self, name: str) -> float:
        return float(self.beta_hat[self.index_of(name)])


@dataclass(frozen=True)
class FTestResult:
    f_stat: float
    df_num: int
    df_den: int
    p_value: float
    hypothesis: str

    def __post_init__(self):
        if self.f_stat < 0:
            raise ValueError("F statistic must be non-negative")


def _is_numeric(v) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


def _combo_label(values: tuple) -> str:
    return ":".join(str(v) for v in values)


def build_design(
    observations: Sequence[Observation],
    protected: Sequence[str],
    controls: Sequence[str] = (),
    levels: Mapping[str, Sequence] | None = None,
) -> DesignMatrix:
    """Saturated interaction design from per-observation records.

    One slope column per protected-attribute combination (x on that
    combination's rows) and one dummy column per combination. ``controls``
    names extra attributes: numeric ones enter as-is, categorical ones as
    dummies with the first level dropped. No intercept is added.

    ``levels`` optionally fixes the expected level set per protected
    attribute; combinations with no observations are dropped with a warning.
    """
    if not observations:
        raise ValueError("no observations")
    if not protected:
        raise ValueError("at least one protected attribute required")

    def combo_of(obs: Observation) -> tuple:
        return tuple(obs.attributes[p] for p in protected)

    observed = {combo_of(o) for o in observations}
    if levels is not None:
        expected = list(itertools.product(*(levels[p] for p in protected)))
        combos = [c for c in expected if c in observed]
        for c in expected:
            if c not in observed:
                warnings.warn(f"protected combination {_combo_label(c)} has no observations; dropped")
    else:
        combos = sorted(observed, key=_combo_label)

    n = len(observations)
    combo_index = {c: i for i, c in enumerate(combos)}
    x_vec = np.array([o.x for o in observations], dtype=np.float64)
    y = np.array([o.y for o in observations], dtype=np.float64)
    membership = np.zeros((n, len(combos)))
    for row, o in enumerate(observations):
        membership[row, combo_index[combo_of(o)]] = 1.0

    columns = [membership[:, i] * x_vec for i in range(len(combos))]
    names = [f"beta_{_combo_label(c)}" for c in combos]
    columns += [membership[:, i] for i in range(len(combos))]
    names += [f"gamma_{_combo_label(c)}" for c in combos]

    for ctrl in controls:
        vals = [o.attributes[ctrl] for o in observations]
        if all(_is_numeric(v) for v in vals):
            columns.append(np.array(vals, dtype=np.float64))
            names.append(f"z_{ctrl}")
        else:
            lvls = sorted({str(v) for v in vals})
            for lvl in lvls[1:]:  # drop first level: the gamma dummies already span a constant
                columns.append(np.array([1.0 if str(v) == lvl else 0.0 for v in vals]))
                names.append(f"z_{ctrl}_{lvl}")

    x_mat = np.column_stack(columns)
    design = DesignMatrix(x_mat, y, tuple(names))
    deficient = _dependent_columns(x_mat, names)
    if deficient:
        raise DegenerateDesignError(f"design is rank deficient; dependent columns: {deficient}")
    return design


def _dependent_columns(x: np.ndarray, names: Sequence[str]) -> list[str]:
    """Greedy scan naming columns that do not increase the rank."""
    rank = np.linalg.matrix_rank(x)
    if rank == x.shape[1]:
        return []
    dependent = []
    kept: list[int] = []
    for j in range(x.shape[1]):
        trial = x[:, kept + [j]]
        if np.linalg.matrix_rank(trial) > len(kept):
            kept.append(j)
        else:
            dependent.append(names[j])
    return dependent


def ols_fit(design: DesignMatrix, robust: bool = False) -> RegressionFit:
    """Least squares via QR. Classical covariance by default, HC1 when robust."""
    x, y = design.values, design.y
    n, k = x.shape
    if n <= k:
        raise DegenerateDesignError(f"need more observations ({n}) than columns ({k})")
    q, r = np.linalg.qr(x)
    diag = np.abs(np.diag(r))
    if np.min(diag) < 1e-10 * max(np.max(diag), 1.0):
        raise DegenerateDesignError(
            f"design is rank deficient; dependent columns: {_dependent_columns(x, design.column_names)}"
        )
    beta = np.linalg.solve(r, q.T @ y)
    residuals = y - x @ beta
    rss = float(residuals @ residuals)
    dof = n - k
    sigma2 = rss / dof
    r_inv = np.linalg.solve(r, np.eye(k))
    xtx_inv = r_inv @ r_inv.T
    if robust:
        meat = (x * (residuals**2)[:, np.newaxis]).T @ x
        cov = xtx_inv @ meat @ xtx_inv * (n / dof)
    else:
        cov = sigma2 * xtx_inv
    std_err = np.sqrt(np.diag(cov))
    t_stat = beta / std_err
    p_value = np.array([t_dist_p(abs(t), dof) for t in t_stat])
    tss = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - rss / tss if tss > 0 else 1.0
    return RegressionFit(
        design=design,
        beta_hat=beta,
        cov=cov,
        std_err=std_err,
        t_stat=t_stat,
        p_value=p_value,
        residuals=residuals,
        sigma2=sigma2,
        dof=dof,
        r_squared=r_squared,
        robust=robust,
    )


def pairwise_f_test(fit: RegressionFit, coef_i: str, coef_j: str) -> FTestResult:
    """Wald F-test of H0: coef_i = coef_j via a single-row contrast."""
    i, j = fit.index_of(coef_i), fit.index_of(coef_j)
    diff = float(fit.beta_hat[i] - fit.beta_hat[j])
    var = float(fit.cov[i, i] + fit.cov[j, j] - 2.0 * fit.cov[i, j])
    if var <= 0:
        if diff == 0.0:
            return FTestResult(0.0, 1, fit.dof, 1.0, f"{coef_i} = {coef_j}")
        raise DegenerateTestError(f"contrast {coef_i} - {coef_j} has non-positive variance {var}")
    f = diff * diff / var
    return FTestResult(f, 1, fit.dof, f_dist_p(f, 1, fit.dof), f"{coef_i} = {coef_j}")


def spec_comparison_test(
    fit_restricted: RegressionFit,
    fit_augmented: RegressionFit,
    shared_coef_names: Sequence[str],
) -> FTestResult:
    """Wald F-test of H0: the shared coefficients are jointly equal across a
    nested pair of specifications fit on the same observations.

    The joint covariance of the two estimators is built from the shared
    observation set (both estimators are linear in the same response), using
    the augmented specification's residual variance.
    """
    xr, xa = fit_restricted.design, fit_augmented.design
    if xr.n_obs != xa.n_obs or not np.array_equal(xr.y, xa.y):
        raise InvalidComparisonError("fits use different observation sets")
    if not set(xr.column_names) <= set(xa.column_names):
        raise InvalidComparisonError("designs are not nested (restricted columns missing from augmented)")
    if not shared_coef_names:
        raise InvalidComparisonError("no shared coefficients to compare")

    sel_r = [fit_restricted.index_of(nm) for nm in shared_coef_names]
    sel_a = [fit_augmented.index_of(nm) for nm in shared_coef_names]

    def projector(design: DesignMatrix) -> np.ndarray:
        x = design.values
        q, r = np.linalg.qr(x)
        r_inv = np.linalg.solve(r, np.eye(x.shape[1]))
        return (r_inv @ r_inv.T) @ x.T  # beta_hat = projector @ y

    pr = projector(xr)[sel_r]
    pa = projector(xa)[sel_a]
    sigma2 = fit_augmented.sigma2
    v_rr = sigma2 * (pr @ pr.T)
    v_aa = sigma2 * (pa @ pa.T)
    v_ra = sigma2 * (pr @ pa.T)
    v_diff = v_rr + v_aa - v_ra - v_ra.T

    d = fit_restricted.beta_hat[sel_r] - fit_augmented.beta_hat[sel_a]
    q_num = len(shared_coef_names)
    f = float(d @ np.linalg.pinv(v_diff, rcond=1e-12) @ d) / q_num
    f = max(f, 0.0)
    hypothesis = f"shared coefficients equal across specifications: {', '.join(shared_coef_names)}"
    return FTestResult(f, q_num, fit_augmented.dof, f_dist_p(f, q_num, fit_augmented.dof), hypothesis)


# ---------------------------------------------------------------------------
# Special functions: regularized incomplete beta, F and t tail probabilities.
# ---------------------------------------------------------------------------

_BETACF_MAX_ITER = 500
_BETACF_EPS = 1e-16
_BETACF_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETACF_TINY:
        d = _BETACF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_TINY:
            d = _BETACF_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETACF_TINY:
            c = _BETACF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_TINY:
            d = _BETACF_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETACF_TINY:
            c = _BETACF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    return h  # converged to machine precision long before this in practice


def incomplete_beta_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_dist_p(f: float, d1: int, d2: int) -> float:
    """Upper-tail probability P[F(d1, d2) >= f]."""
    if d1 < 1 or d2 < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if f < 0:
        raise ValueError("F statistic must be non-negative")
    if f == 0.0:
        return 1.0
    x = d2 / (d2 + d1 * f)
    return incomplete_beta_reg(d2 / 2.0, d1 / 2.0, x)


def t_dist_p(t: float, dof: int) -> float:
    """Two-sided probability P[|T(dof)| >= |t|]."""
    if dof < 1:
        raise ValueError("degrees of freedom must be >= 1")
    t = abs(float(t))
    if t == 0.0:
        return 1.0
    x = dof / (dof + t * t)
    return incomplete_beta_reg(dof / 2.0, 0.5, x)
