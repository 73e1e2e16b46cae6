"""Fusion diagnostics: shared-arm comparison via the area between risk
curves, a permutation test on that area, twister-plot export, and weighted
covariate balance.

The permutation test shuffles the trial indicator while keeping every
record's weights (sampling odds, censoring survival) frozen at their
original-data estimates; only the group-selection indicators move. Both
shared-arm curves are self-normalized (weighted event sums over summed
weights within the permuted group), so the identity permutation reproduces
the observed area exactly. The constant per-trial assignment probability
cancels in that ratio.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import expit

from .data import SHARED_ARM, FusedDataset
from .errors import (
    ConfigError,
    DegeneratePermutation,
    MissingBands,
    SmallPermutationCountWarning,
)
from .estimator import (
    BRIDGE_TRIAL,
    TARGET_TRIAL,
    NuisanceFits,
    RiskCurve,
    RiskDifferenceCurve,
    WeightSet,
    compute_weights,
)
from .stepfun import StepFunction

RECOMMENDED_MIN_PERMUTATIONS = 1000
_EXHAUSTIVE_CAP = 200_000


@dataclass(frozen=True)
class PermutationResult:
    observed_area: float
    permuted_areas: np.ndarray
    p_value: float
    p: int
    seed: int | None
    skipped_permutations: int
    add_one: bool = False
    exhaustive: bool = False


# ---------------------------------------------------------------------------
# area between curves


def _as_step(curve) -> StepFunction:
    return curve.curve if isinstance(curve, RiskCurve) else curve


def area_between(c1, c2, t_max: float) -> float:
    """Time-weighted sum of absolute differences between two step curves.

    The grid is the union of the jump times plus 0 and t_max; each grid
    value is weighted by the gap to the next grid point (the final point
    gets width zero).
    """
    f1, f2 = _as_step(c1), _as_step(c2)
    jumps = np.concatenate([f1.jump_times, f2.jump_times])
    grid = np.unique(np.concatenate([[0.0], jumps[jumps <= t_max], [t_max]]))
    gaps = np.diff(grid)
    diffs = np.abs(f1(grid) - f2(grid))
    return float(diffs[:-1] @ gaps)


# ---------------------------------------------------------------------------
# permutation test


class _PermutationEngine:
    """Shared-arm area statistic, evaluated for arbitrary group labelings.

    Each group's curve is the self-normalized IPW cumulative incidence over
    its shared-arm records: event contributions omega_i / pi_C,i divided by
    the group's summed shared-arm weights (the constant within-group
    assignment probability cancels in that ratio). With `refit=True` the
    sampling model and the per-group, per-arm drop-out hazards are re-
    estimated for every labeling, so the statistic is computed identically
    for the observed and each permuted labeling; the identity labeling then
    reproduces the observed fit exactly. With `refit=False` the weights stay
    frozen at their original-data values.
    """

    def __init__(self, ds: FusedDataset, nuisance: NuisanceFits, weights: WeightSet,
                 t_max: float, refit: bool):
        self.ds = ds
        self.refit = refit
        self.shared = (ds.a == SHARED_ARM).astype(float)
        self.event_mask = (ds.a == SHARED_ARM) & (ds.delta == 1)
        ev = np.flatnonzero(self.event_mask)
        order = ev[np.argsort(ds.t_star[ev], kind="stable")]
        self.event_rows = order
        ev_times = ds.t_star[order]
        self.grid = np.unique(np.concatenate([[0.0], ev_times[ev_times <= t_max], [t_max]]))
        self.gaps = np.diff(self.grid)
        self.pos = np.searchsorted(ev_times, self.grid, side="right")

        self.frozen_omega = weights.sampling_odds
        # censoring survival stays a per-record attribute (the record's own
        # trial-arm drop-out history), frozen across labelings
        self.pic = weights.censoring_surv
        self.sampling_fit = nuisance.sampling
        if refit and self.sampling_fit is not None:
            spec = self.sampling_fit.design_spec
            self.samp_X = spec.matrix(ds.covariates, n=len(ds))
            self.samp_beta0 = self.sampling_fit.coefficients

    # -- weight construction -------------------------------------------------

    def _omega_for(self, sel: np.ndarray) -> np.ndarray:
        if not self.refit or self.sampling_fit is None:
            return self.frozen_omega
        y = (~sel).astype(float)  # membership in the bridge-labeled group
        if y.min() == y.max():
            raise DegeneratePermutation("a labeling left one group empty")
        beta = _newton_logistic_warm(self.samp_X, y, self.samp_beta0)
        p_bridge = expit(self.samp_X @ beta)
        return np.where(sel, 1.0, (1.0 - p_bridge) / p_bridge)

    # -- statistic -----------------------------------------------------------

    def area(self, sel: np.ndarray) -> float:
        omega = self._omega_for(sel)
        shared_w = omega * self.shared
        n1 = float(shared_w @ sel)
        n0 = float(shared_w.sum() - n1)
        if n1 <= 0 or n0 <= 0:
            raise DegeneratePermutation("a labeling left one group without shared-arm weight")
        ce = (omega / self.pic)[self.event_rows]
        m1 = sel[self.event_rows]
        cum1 = np.concatenate([[0.0], np.cumsum(ce * m1)])[self.pos]
        cum0 = np.concatenate([[0.0], np.cumsum(ce * (~m1))])[self.pos]
        r = np.abs(cum1 / n1 - cum0 / n0)
        return float(r[:-1] @ self.gaps)

    def degenerate(self, sel: np.ndarray) -> bool:
        w1 = float((self.frozen_omega * self.shared) @ sel)
        return w1 <= 0 or (self.frozen_omega * self.shared).sum() - w1 <= 0


def _newton_logistic_warm(X, y, beta0, max_iter=40):
    """Lean Newton refit for the per-permutation sampling model."""
    beta = np.asarray(beta0, dtype=float).copy()
    for _ in range(max_iter):
        p = expit(X @ beta)
        grad = X.T @ (y - p)
        if float(np.max(np.abs(grad))) < 1e-8:
            return beta
        w = p * (1.0 - p)
        try:
            step = np.linalg.solve(X.T @ (X * w[:, None]), grad)
        except np.linalg.LinAlgError:
            raise DegeneratePermutation("singular sampling refit under permutation") from None
        if not np.all(np.isfinite(step)):
            raise DegeneratePermutation("non-finite sampling refit under permutation")
        beta = beta + step
        if np.max(np.abs(beta)) > 30.0:
            raise DegeneratePermutation("sampling refit separated under permutation")
    if float(np.max(np.abs(X.T @ (y - expit(X @ beta))))) < 1e-6:
        return beta
    raise DegeneratePermutation("sampling refit did not converge under permutation")


def permutation_test(ds: FusedDataset, nuisance: NuisanceFits, p: int = 10_000,
                     seed: int | None = None, add_one: bool = False,
                     exhaustive: bool = False, refit_weights: bool = True,
                     t_max: float | None = None,
                     weights: WeightSet | None = None) -> PermutationResult:
    """Permutation test for a difference between the shared-arm risk curves.

    The statistic is the area between the two self-normalized shared-arm
    curves; the trial indicator is shuffled over all records and, by
    default, the sampling model and drop-out hazards are re-estimated for
    each shuffle so every labeling is treated identically
    (`refit_weights=False` keeps all weights frozen at the original-data
    estimates instead; that variant is conservative because the observed
    labeling gets weights fitted to itself). Either way the identity
    labeling reproduces the observed area exactly.

    p_value = #{permuted area > observed area} / p (strict; `add_one` uses
    (count + 1) / (p + 1)). Deterministic given `seed`: permutation j draws
    from its own substream, so chunked or parallel evaluation cannot change
    the result. Degenerate permutations (a group without shared-arm weight,
    or a failed sampling refit) are redrawn and counted in
    `skipped_permutations`. `exhaustive=True` enumerates every distinct
    assignment of the existing labels instead of sampling (small n only).
    """
    if t_max is None:
        t_max = ds.admin_censor_time
    if weights is None:
        weights = compute_weights(ds, nuisance)
    engine = _PermutationEngine(ds, nuisance, weights, t_max, refit_weights)
    labels = ds.s == TARGET_TRIAL
    if engine.degenerate(labels):
        raise DegeneratePermutation("observed data has a group without shared-arm weight")
    observed = engine.area(labels)

    if exhaustive:
        areas = _exhaustive_areas(engine, labels)
        count = int(np.sum(areas > observed))
        p_eff = len(areas)
        p_value = (count + 1) / (p_eff + 1) if add_one else count / p_eff
        return PermutationResult(observed, areas, p_value, p_eff, seed, 0, add_one, True)

    if seed is None:
        raise ConfigError("permutation_test needs a seed (or exhaustive=True)")
    if p < RECOMMENDED_MIN_PERMUTATIONS:
        warnings.warn(
            f"{p} permutations is below the recommended minimum of "
            f"{RECOMMENDED_MIN_PERMUTATIONS}",
            SmallPermutationCountWarning,
            stacklevel=2,
        )

    n = len(ds)
    areas = np.empty(p)
    skipped = 0
    for j in range(p):
        attempt = 0
        while True:
            rng = np.random.default_rng([seed, j, attempt])
            cand = labels[rng.permutation(n)]
            try:
                if engine.degenerate(cand):
                    raise DegeneratePermutation("zero shared-arm weight")
                areas[j] = engine.area(cand)
                break
            except DegeneratePermutation:
                skipped += 1
                attempt += 1
                if skipped > 10 * p:
                    raise DegeneratePermutation(
                        f"more than {10 * p} degenerate permutations; data too sparse"
                    ) from None

    count = int(np.sum(areas > observed))
    p_value = (count + 1) / (p + 1) if add_one else count / p
    return PermutationResult(observed, areas, p_value, p, seed, skipped, add_one, False)


def _exhaustive_areas(engine: _PermutationEngine, labels) -> np.ndarray:
    n = labels.size
    n1 = int(labels.sum())
    total = math.comb(n, n1)
    if total > _EXHAUSTIVE_CAP:
        raise ConfigError(f"{total} distinct assignments exceed the exhaustive cap")
    areas = []
    for ones in combinations(range(n), n1):
        sel = np.zeros(n, dtype=bool)
        sel[list(ones)] = True
        try:
            if engine.degenerate(sel):
                continue
            areas.append(engine.area(sel))
        except DegeneratePermutation:
            continue
    return np.asarray(areas)


# ---------------------------------------------------------------------------
# twister export


def twister_export(rd: RiskDifferenceCurve, t_max: float,
                   include_bands: bool | None = None) -> list[tuple]:
    """Rows (t, rd[, ci_lo, ci_hi]) in step form: jump times are duplicated
    with the values just before and at the jump, so a line plot renders the
    vertical risers."""
    if include_bands is None:
        include_bands = rd.has_bands
    if include_bands and not rd.has_bands:
        raise MissingBands("confidence bands requested but the curve has none")

    series = [(rd.times, rd.rd)]
    if include_bands:
        series += [(rd.times, rd.ci_lo), (rd.times, rd.ci_hi)]
    steps = [StepFunction(t, v, 0.0) for t, v in series]

    jumps = rd.times[rd.times <= t_max]
    rows = []

    def emit(t, left: bool):
        vals = [f.eval_left(t) if left else f(t) for f in steps]
        rows.append((float(t), *[float(v) for v in vals]))

    emit(0.0, left=False)
    for t in jumps:
        if t == 0.0:
            continue
        emit(t, left=True)
        emit(t, left=False)
    if jumps.size == 0 or jumps[-1] < t_max:
        emit(t_max, left=False)
    return rows


# ---------------------------------------------------------------------------
# covariate balance


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    mean_target: float
    mean_bridge_weighted: float
    smd: float
    note: str = ""


def covariate_balance(ds: FusedDataset, weights, covariate_names) -> list[BalanceRow]:
    """Standardized mean differences between the target trial and the
    reweighted bridge trial.

    smd = (target mean - weighted bridge mean) / pooled SD, with the pooled
    SD mixing the target variance and the weighted bridge variance equally
    (population convention, no small-sample correction).
    """
    omega = weights.sampling_odds if isinstance(weights, WeightSet) else np.asarray(weights)
    tmask = ds.s == TARGET_TRIAL
    bmask = ds.s == BRIDGE_TRIAL
    w = omega[bmask]
    rows = []
    for name in covariate_names:
        x_t = ds.covariates[name][tmask]
        x_b = ds.covariates[name][bmask]
        mean_t = float(np.mean(x_t))
        var_t = float(np.mean((x_t - mean_t) ** 2))
        mean_b = float(np.sum(w * x_b) / np.sum(w))
        var_b = float(np.sum(w * (x_b - mean_b) ** 2) / np.sum(w))
        pooled = math.sqrt((var_t + var_b) / 2.0)
        if pooled == 0.0:
            if mean_t == mean_b:
                rows.append(BalanceRow(name, mean_t, mean_b, 0.0))
            else:
                rows.append(BalanceRow(name, mean_t, mean_b, math.inf, "zero variance"))
        else:
            rows.append(BalanceRow(name, mean_t, mean_b, (mean_t - mean_b) / pooled))
    return rows
