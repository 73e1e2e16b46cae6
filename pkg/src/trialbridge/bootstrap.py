"""Stratified nonparametric bootstrap standard errors and Wald intervals.

Records are resampled with replacement separately within each trial, all
nuisance models are refit on every resample, and the risk-difference
contrasts are re-estimated on the evaluation grid. Replicate b draws from
its own seed substream, so the result is identical no matter how replicates
are scheduled.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import SHARED_ARM, FusedDataset
from .errors import ConfigError, TooManyFailedReplicates, TrialBridgeError
from .estimator import (
    BRIDGE_TRIAL,
    TARGET_TRIAL,
    PipelineConfig,
    RiskDifferenceCurve,
    bridged_estimate,
    compute_weights,
    fit_nuisance,
    ipw_risk,
    risk_difference,
)

Z_975 = 1.959964  # 97.5th standard-normal quantile

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BootstrapSpec:
    replicates: int
    seed: int
    t_grid: np.ndarray
    stratify_by_trial: bool = True  # the only supported scheme

    def __post_init__(self):
        if self.replicates < 2:
            raise ConfigError("bootstrap needs at least 2 replicates")
        grid = np.asarray(self.t_grid, dtype=float)
        if grid.size == 0 or np.any(grid <= 0):
            raise ConfigError("t_grid must be nonempty with positive times")
        if not self.stratify_by_trial:
            raise ConfigError("only trial-stratified resampling is supported")
        object.__setattr__(self, "t_grid", grid)


@dataclass(frozen=True)
class BootstrapResult:
    """Point curves with bands on the evaluation grid, plus the replicate
    estimates (rows: replicate, columns: grid times) for each contrast."""

    curves: dict  # contrast name -> RiskDifferenceCurve with bands
    replicates: dict  # contrast name -> (B, len(t_grid)) array
    redraws: int

    @property
    def bridged(self) -> RiskDifferenceCurve:
        return self.curves["3v1"]

    @property
    def target_pair(self) -> RiskDifferenceCurve:
        return self.curves["3v2"]

    @property
    def bridge_pair(self) -> RiskDifferenceCurve:
        return self.curves["2v1"]


def _with_bands(times, point, estimates) -> RiskDifferenceCurve:
    se = np.std(estimates, axis=0, ddof=1)
    return RiskDifferenceCurve(times, point, se, point - Z_975 * se, point + Z_975 * se)


def _bootstrap_contrasts(ds: FusedDataset, spec: BootstrapSpec, estimate_fn,
                         points: dict) -> BootstrapResult:
    grid = spec.t_grid
    idx_bridge = np.flatnonzero(ds.s == BRIDGE_TRIAL)
    idx_target = np.flatnonzero(ds.s == TARGET_TRIAL)
    B = spec.replicates
    est = {k: np.empty((B, grid.size)) for k in points}
    max_failures = int(0.1 * B)
    failures = 0
    for b in range(B):
        attempt = 0
        while True:
            rng = np.random.default_rng([spec.seed, b, attempt])
            rows = np.concatenate([
                rng.choice(idx_bridge, size=idx_bridge.size, replace=True),
                rng.choice(idx_target, size=idx_target.size, replace=True),
            ])
            try:
                values = estimate_fn(ds.take(rows))
            except TrialBridgeError as exc:
                failures += 1
                attempt += 1
                log.debug("bootstrap replicate %d attempt %d failed: %s", b, attempt, exc)
                if failures > max_failures:
                    raise TooManyFailedReplicates(
                        f"{failures} failed bootstrap draws exceed 10% of B={B}; last: {exc}"
                    ) from exc
                continue
            for k in est:
                est[k][b] = values[k]
            break

    curves = {k: _with_bands(grid, points[k], est[k]) for k in points}
    return BootstrapResult(curves, est, failures)


def bootstrap_rd(ds: FusedDataset, config: PipelineConfig,
                 spec: BootstrapSpec, original=None) -> BootstrapResult:
    """Bootstrap the bridged risk difference and both within-trial pairs.

    Any resample whose model fits fail is redrawn from the next substream;
    more than 10% of `replicates` failing aborts. `original` may carry a
    precomputed BridgedEstimate for the unresampled data.
    """
    grid = spec.t_grid
    if np.any(grid > ds.admin_censor_time):
        raise ConfigError("t_grid extends beyond the administrative censoring time")
    if original is None:
        original = bridged_estimate(ds, config)
    points = {
        "3v1": original.rd_bridged.value(grid),
        "3v2": original.rd_target_pair.value(grid),
        "2v1": original.rd_bridge_pair.value(grid),
    }

    def estimate_fn(sample):
        fit = bridged_estimate(sample, config)
        return {
            "3v1": fit.rd_bridged.value(grid),
            "3v2": fit.rd_target_pair.value(grid),
            "2v1": fit.rd_bridge_pair.value(grid),
        }

    return _bootstrap_contrasts(ds, spec, estimate_fn, points)


def shared_arm_rd(ds: FusedDataset, config: PipelineConfig,
                  nuisance=None, weights=None) -> RiskDifferenceCurve:
    """Difference between the target and (reweighted) bridge shared-arm
    risk curves; works on datasets holding only the shared arm."""
    if nuisance is None:
        nuisance = fit_nuisance(ds, config)
    if weights is None:
        weights = compute_weights(ds, nuisance, config.weight_flag_cap,
                                  config.truncate_weights)
    c_target = ipw_risk(ds, TARGET_TRIAL, SHARED_ARM, nuisance, weights)
    c_bridge = ipw_risk(ds, BRIDGE_TRIAL, SHARED_ARM, nuisance, weights)
    return risk_difference(c_target, c_bridge)


def bootstrap_shared_rd(ds: FusedDataset, config: PipelineConfig,
                        spec: BootstrapSpec) -> BootstrapResult:
    """Bootstrap bands for the shared-arm risk difference (fusion twister)."""
    grid = spec.t_grid
    if np.any(grid > ds.admin_censor_time):
        raise ConfigError("t_grid extends beyond the administrative censoring time")
    points = {"2v2": shared_arm_rd(ds, config).value(grid)}

    def estimate_fn(sample):
        return {"2v2": shared_arm_rd(sample, config).value(grid)}

    return _bootstrap_contrasts(ds, spec, estimate_fn, points)
