"""Inverse-probability-weighted risk curves per trial and arm, inverse odds
of sampling weights, and the bridged risk difference.

The target-trial estimator divides each observed event by the product of the
(model-estimated) assignment probability and the probability of remaining
uncensored just before the event, averaged over the trial size. The
bridge-trial estimator additionally multiplies each record by its inverse
odds of sampling weight and averages over the weighted sample size, which
standardizes the bridge trial to the target-trial population. The two risk
differences telescope: rd(3 vs 1) = rd(3 vs 2) + rd(2 vs 1).
"""
from __future__ import annotations

import warnings
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from .data import SHARED_ARM, TRIAL_ARMS, FusedDataset
from .design import DesignSpec
from .errors import (
    EstimationError,
    ExtremeWeightWarning,
    ZeroEffectiveSampleSize,
)
from .models import (
    LogisticFit,
    censoring_survival_columns,
    fit_cox,
    fit_logistic,
    predict_prob,
    predict_prob_columns,
)
from .stepfun import StepFunction, from_increments, union_grid

TARGET_TRIAL = 1  # s=1, arms {2,3}
BRIDGE_TRIAL = 0  # s=0, arms {1,2}


@dataclass(frozen=True)
class PipelineConfig:
    """Model specification for one full estimation pass."""

    censoring_formula: tuple = ()
    sampling_formula: tuple | None = None  # None -> unit sampling weights
    strata_var: str | None = "arm"
    pool_censoring: bool = False  # one censoring model for both trials
    weight_flag_cap: float = 50.0
    truncate_weights: bool = False


@dataclass(frozen=True)
class NuisanceFits:
    """Fitted treatment, censoring, and sampling models."""

    treatment: dict  # (trial, arm) -> probability
    treatment_fits: dict  # trial -> LogisticFit | None
    censoring: dict  # trial -> CoxFit
    sampling: LogisticFit | None


@dataclass(frozen=True)
class WeightSet:
    """Per-record weight components; `multiplier` is their combined effect
    omega / (treatment_prob * censoring_surv), truncated only if asked."""

    treatment_prob: np.ndarray
    censoring_surv: np.ndarray
    sampling_odds: np.ndarray
    multiplier: np.ndarray
    flagged: np.ndarray


@dataclass(frozen=True)
class RiskCurve:
    curve: StepFunction
    trial: int
    arm: int
    n_effective: float


@dataclass(frozen=True)
class RiskDifferenceCurve:
    """Pointwise risk difference on a time grid, optionally with bands."""

    times: np.ndarray
    rd: np.ndarray
    se: np.ndarray | None = None
    ci_lo: np.ndarray | None = None
    ci_hi: np.ndarray | None = None

    def step(self) -> StepFunction:
        return StepFunction(self.times, self.rd, 0.0)

    def value(self, t):
        return self.step()(t)

    @property
    def has_bands(self) -> bool:
        return self.ci_lo is not None and self.ci_hi is not None


# ---------------------------------------------------------------------------
# nuisance fitting


def fit_treatment_probs(ds: FusedDataset):
    """Per-trial assignment probabilities via intercept-only logistic fits.

    A trial observed with a single arm gets probability 1 for that arm (an
    intercept-only model would have a constant outcome)."""
    probs = {}
    fits = {}
    for trial, arms in TRIAL_ARMS.items():
        mask = ds.trial_mask(trial)
        present = sorted(int(v) for v in np.unique(ds.a[mask]))
        if len(present) == 1:
            probs[(trial, present[0])] = 1.0
            fits[trial] = None
            continue
        hi = max(present)
        y = (ds.a[mask] == hi).astype(float)
        fit = fit_logistic(y, np.ones((y.size, 1)),
                           DesignSpec.from_formula([], intercept=True))
        p_hi = predict_prob(fit, {})
        probs[(trial, hi)] = p_hi
        probs[(trial, min(present))] = 1.0 - p_hi
        fits[trial] = fit
    return probs, fits


def fit_sampling_model(ds: FusedDataset, formula) -> LogisticFit:
    """Logistic model for membership in the bridge trial (s=0), fit on the
    stacked data. Spline knots use pooled percentiles."""
    spec = DesignSpec.from_formula(formula, intercept=True).fit(ds.covariates)
    X = spec.matrix(ds.covariates, n=len(ds))
    y = (ds.s == BRIDGE_TRIAL).astype(float)
    return fit_logistic(y, X, spec)


def fit_nuisance(ds: FusedDataset, config: PipelineConfig) -> NuisanceFits:
    """Fit all nuisance models: treatment (per trial), censoring (per trial
    by default, arm-stratified Cox for time to drop-out; pooled across
    trials when config.pool_censoring), and sampling (stacked)."""
    probs, tfits = fit_treatment_probs(ds)
    if config.pool_censoring:
        fit = fit_cox(ds, list(config.censoring_formula), config.strata_var)
        censoring = {BRIDGE_TRIAL: fit, TARGET_TRIAL: fit}
    else:
        censoring = {}
        for trial in (BRIDGE_TRIAL, TARGET_TRIAL):
            sub = ds._subset(np.flatnonzero(ds.s == trial), partial=True)
            censoring[trial] = fit_cox(sub, list(config.censoring_formula),
                                       config.strata_var, trial=trial)
    sampling = None
    if config.sampling_formula is not None:
        sampling = fit_sampling_model(ds, list(config.sampling_formula))
    return NuisanceFits(probs, tfits, censoring, sampling)


# ---------------------------------------------------------------------------
# weights


def sampling_odds_weights(fit: LogisticFit, ds: FusedDataset) -> np.ndarray:
    """Inverse odds of sampling, (1 - pi_S) / pi_S with pi_S = Pr(s=0 | v),
    for bridge-trial records; exactly 1 for target-trial records."""
    omega = np.ones(len(ds))
    mask = ds.s == BRIDGE_TRIAL
    if mask.any():
        cols = {k: v[mask] for k, v in ds.covariates.items()}
        pi = predict_prob_columns(fit, cols, n=int(mask.sum()))
        omega[mask] = (1.0 - pi) / pi
    return omega


WeightedSampleSize = namedtuple("WeightedSampleSize", ["value", "ratio_to_target"])


def weighted_n_bridge(ds: FusedDataset, weights) -> WeightedSampleSize:
    """Inverse-odds-weighted bridge-trial sample size and its ratio to the
    target trial size (approximately 1 when the sampling model is right)."""
    omega = weights.sampling_odds if isinstance(weights, WeightSet) else np.asarray(weights)
    value = float(np.sum(omega[ds.s == BRIDGE_TRIAL]))
    return WeightedSampleSize(value, value / ds.n_target)


def compute_weights(ds: FusedDataset, nuisance: NuisanceFits,
                    flag_cap: float = 50.0, truncate: bool = False) -> WeightSet:
    """Assemble per-record weight components and flag extreme multipliers.

    Raises if any component is nonpositive or non-finite (weights are never
    silently clipped; truncation of the multiplier is opt-in).
    """
    tp = np.full(len(ds), np.nan)
    for (trial, arm), p in nuisance.treatment.items():
        tp[(ds.s == trial) & (ds.a == arm)] = p
    cs = censoring_survival_columns(nuisance.censoring, ds)
    omega = (np.ones(len(ds)) if nuisance.sampling is None
             else sampling_odds_weights(nuisance.sampling, ds))

    for name, arr in (("treatment probability", tp),
                      ("censoring survival", cs),
                      ("sampling odds", omega)):
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            i = int(np.flatnonzero(~np.isfinite(arr) | (arr <= 0))[0])
            raise EstimationError(
                f"non-positive or non-finite {name} at row {i + 1} (id={ds.ids[i]!r})"
            )

    multiplier = omega / (tp * cs)
    flagged = multiplier > flag_cap
    if flagged.any():
        warnings.warn(
            f"{int(flagged.sum())} record(s) exceed the weight cap {flag_cap} "
            f"(max multiplier {multiplier.max():.1f})",
            ExtremeWeightWarning,
            stacklevel=2,
        )
        if truncate:
            multiplier = np.minimum(multiplier, flag_cap)
    return WeightSet(tp, cs, omega, multiplier, flagged)


# ---------------------------------------------------------------------------
# risk curves and differences


def ipw_risk(ds: FusedDataset, trial: int, arm: int, nuisance: NuisanceFits,
             weights: WeightSet | None = None,
             flag_cap: float = 50.0, truncate: bool = False) -> RiskCurve:
    """IPW risk curve for one trial and arm, as an exact step function
    jumping at the contributing event times.

    The effective denominator is the trial size for the target trial and the
    inverse-odds-weighted size for the bridge trial.
    """
    if (trial, arm) not in nuisance.treatment:
        raise EstimationError(f"no treatment probability for arm a={arm} in trial s={trial}")
    if weights is None:
        weights = compute_weights(ds, nuisance, flag_cap, truncate)
    if trial == TARGET_TRIAL:
        n_eff = float(ds.n_target)
    else:
        n_eff = float(np.sum(weights.sampling_odds[ds.s == BRIDGE_TRIAL]))
    if n_eff <= 0:
        raise ZeroEffectiveSampleSize(f"effective sample size for trial s={trial} is {n_eff}")

    mask = ds.trial_mask(trial, arm) & (ds.delta == 1)
    curve = from_increments(ds.t_star[mask], weights.multiplier[mask] / n_eff)
    return RiskCurve(curve, trial, arm, n_eff)


def risk_difference(r_hi: RiskCurve, r_lo: RiskCurve) -> RiskDifferenceCurve:
    """Pointwise difference r_hi - r_lo on the union of the jump times."""
    grid = union_grid(r_hi.curve, r_lo.curve)
    return RiskDifferenceCurve(grid, r_hi.curve(grid) - r_lo.curve(grid))


def bridged_rd(rd_target: RiskDifferenceCurve, rd_bridge: RiskDifferenceCurve) -> RiskDifferenceCurve:
    """Pointwise sum of the two within-trial risk differences on the union grid."""
    grid = np.unique(np.concatenate([rd_target.times, rd_bridge.times]))
    return RiskDifferenceCurve(grid, rd_target.value(grid) + rd_bridge.value(grid))


@dataclass(frozen=True)
class BridgedEstimate:
    """All curves from one estimation pass."""

    curves: dict  # (trial, arm) -> RiskCurve
    rd_target_pair: RiskDifferenceCurve  # arm 3 vs 2 in the target trial
    rd_bridge_pair: RiskDifferenceCurve  # arm 2 vs 1 in the bridge trial
    rd_bridged: RiskDifferenceCurve  # arm 3 vs 1
    nuisance: NuisanceFits
    weights: WeightSet
    n_target: int
    n_bridge_weighted: float


def bridged_estimate(ds: FusedDataset, config: PipelineConfig,
                     nuisance: NuisanceFits | None = None) -> BridgedEstimate:
    """Run the full pipeline: nuisance fits, four risk curves, three RDs."""
    if nuisance is None:
        nuisance = fit_nuisance(ds, config)
    weights = compute_weights(ds, nuisance, config.weight_flag_cap, config.truncate_weights)
    curves = {}
    for trial, arms in TRIAL_ARMS.items():
        for arm in arms:
            curves[(trial, arm)] = ipw_risk(ds, trial, arm, nuisance, weights)
    rd_target = risk_difference(curves[(TARGET_TRIAL, 3)], curves[(TARGET_TRIAL, SHARED_ARM)])
    rd_bridge = risk_difference(curves[(BRIDGE_TRIAL, SHARED_ARM)], curves[(BRIDGE_TRIAL, 1)])
    combined = bridged_rd(rd_target, rd_bridge)
    return BridgedEstimate(
        curves,
        rd_target,
        rd_bridge,
        combined,
        nuisance,
        weights,
        ds.n_target,
        weighted_n_bridge(ds, weights).value,
    )
