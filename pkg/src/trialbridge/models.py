"""Fitted probability models: logistic regression, Cox proportional hazards
for time to drop-out, Breslow baseline cumulative hazard, and Nelson-Aalen.

Both likelihood maximizers use Newton's method with step-halving and stop
when the gradient max-norm falls below 1e-8 (the loop keeps going to ~1e-11
when it can, which it normally can given quadratic convergence). Diverging
coefficients are reported instead of silently blowing up: |coef| > 20 with a
still-increasing likelihood raises Separation (logistic) or
MonotoneLikelihood (Cox).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .design import DesignSpec
from .errors import (
    AllSameClass,
    EstimationError,
    MonotoneLikelihood,
    NonConvergence,
    RankDeficient,
    Separation,
    SchemaMismatch,
    UnknownStratum,
)
from .stepfun import StepFunction

GRAD_TOL = 1e-8
_GRAD_TOL_TIGHT = 1e-11
_MAX_ITER = 100
_DIVERGENCE_BOUND = 20.0
_MAX_HALVINGS = 40

UNSTRATIFIED = "_all"


# ---------------------------------------------------------------------------
# logistic regression


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray  # intercept first when the design has one
    design_spec: DesignSpec | None
    converged: bool
    iterations: int
    loglik: float


def logistic_loglik(beta, y, X) -> float:
    """Bernoulli log-likelihood at beta (numerically stable)."""
    eta = X @ np.asarray(beta, dtype=float)
    return float(np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))


def logistic_score(beta, y, X) -> np.ndarray:
    """Analytic gradient of the Bernoulli log-likelihood."""
    p = expit(X @ np.asarray(beta, dtype=float))
    return X.T @ (y - p)


def fit_logistic(y, X, design_spec: DesignSpec | None = None) -> LogisticFit:
    """Maximum-likelihood logistic regression by Newton iteration.

    X must already contain the intercept column (first) if one is wanted.
    Raises AllSameClass, RankDeficient, Separation, or NonConvergence.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, p) aligned with y")
    if np.all(y == y[0]):
        raise AllSameClass("outcome vector is constant")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficient("logistic design matrix is rank deficient")

    beta = np.zeros(X.shape[1])
    ll = logistic_loglik(beta, y, X)
    stagnant = False
    for it in range(1, _MAX_ITER + 1):
        p = expit(X @ beta)
        grad = X.T @ (y - p)
        gmax = float(np.max(np.abs(grad))) if grad.size else 0.0
        if gmax < _GRAD_TOL_TIGHT or (stagnant and gmax < GRAD_TOL):
            return LogisticFit(beta, design_spec, True, it - 1, ll)
        if stagnant:
            raise NonConvergence(
                f"logistic likelihood stalled with gradient max-norm {gmax:.2e}"
            )
        w = p * (1.0 - p)
        hess = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise RankDeficient("singular Hessian in logistic fit") from None

        new_beta, new_ll, improved = _line_search(
            lambda b: logistic_loglik(b, y, X), beta, step, ll
        )
        stagnant = _stagnated(beta, new_beta, improved)
        beta, ll = new_beta, new_ll
        if np.max(np.abs(beta)) > _DIVERGENCE_BOUND:
            raise Separation(
                "logistic coefficients diverging (likely separated data): "
                f"max |beta| = {np.max(np.abs(beta)):.1f}"
            )
    gmax = float(np.max(np.abs(logistic_score(beta, y, X))))
    if gmax < GRAD_TOL:
        return LogisticFit(beta, design_spec, True, _MAX_ITER, ll)
    raise NonConvergence(f"logistic fit did not converge in {_MAX_ITER} iterations")


def _line_search(loglik_fn, beta, step, ll):
    """Full Newton step, halved until the log-likelihood does not decrease."""
    scale = 1.0
    for _ in range(_MAX_HALVINGS):
        cand = beta + scale * step
        cand_ll = loglik_fn(cand)
        if np.isfinite(cand_ll) and cand_ll >= ll - 1e-12:
            return cand, cand_ll, True
        scale *= 0.5
    return beta, ll, False


def _stagnated(beta, new_beta, improved) -> bool:
    """True once iteration cannot move the coefficients meaningfully. The
    step threshold is relative, so raw-scale covariates (whose gradients
    bottom out above absolute float noise) still terminate."""
    if not improved:
        return True
    step = float(np.max(np.abs(new_beta - beta))) if len(beta) else 0.0
    return step <= 1e-10 * (1.0 + float(np.max(np.abs(new_beta), initial=0.0)))


def predict_prob(fit: LogisticFit, v) -> float:
    """Predicted probability for one named covariate row."""
    if fit.design_spec is None:
        raise SchemaMismatch("fit has no design spec; use the coefficients directly")
    return float(expit(fit.design_spec.row(v) @ fit.coefficients))


def predict_prob_columns(fit: LogisticFit, columns, n: int | None = None) -> np.ndarray:
    """Vectorized predicted probabilities from named covariate columns."""
    if fit.design_spec is None:
        raise SchemaMismatch("fit has no design spec; use the coefficients directly")
    X = fit.design_spec.matrix(columns, n=n)
    return expit(X @ fit.coefficients)


# ---------------------------------------------------------------------------
# Cox proportional hazards (time to drop-out, Breslow ties)


@dataclass(frozen=True)
class CoxFit:
    coefficients: np.ndarray
    strata: tuple
    baseline_cumhaz: dict  # stratum label -> StepFunction
    design_spec: DesignSpec | None
    converged: bool
    iterations: int
    loglik: float
    trial: int | None = None


class _CoxData:
    """Per-stratum sorted arrays and event groupings for the partial likelihood."""

    def __init__(self, times, events, X, strata):
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=int)
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            X = X.reshape(len(times), -1)
        if strata is None:
            strata = np.full(len(times), UNSTRATIFIED, dtype=object)
        strata = np.asarray(strata)
        self.p = X.shape[1]
        self.strata_labels = tuple(sorted(set(strata.tolist())))
        self.groups = []
        for lab in self.strata_labels:
            idx = np.flatnonzero(strata == lab)
            order = idx[np.argsort(times[idx], kind="stable")]
            t_sorted = times[order]
            e_sorted = events[order]
            x_sorted = X[order]
            ev_pos = np.flatnonzero(e_sorted == 1)
            ev_times, first = np.unique(t_sorted[ev_pos], return_index=True)
            # risk-set start index (ascending sort: suffix from here) per event time
            risk_start = np.searchsorted(t_sorted, ev_times, side="left")
            d = np.add.reduceat(np.ones_like(ev_pos), first) if ev_pos.size else np.empty(0)
            x_event_sum = (
                np.add.reduceat(x_sorted[ev_pos], first, axis=0)
                if ev_pos.size
                else np.empty((0, self.p))
            )
            self.groups.append(
                {
                    "label": lab,
                    "t": t_sorted,
                    "x": x_sorted,
                    "event_times": ev_times,
                    "risk_start": risk_start,
                    "d": d.astype(float),
                    "x_event_sum": x_event_sum,
                    "eta_event_sum_idx": ev_pos,
                    "event_first": first,
                }
            )
        self.n_events = int(events.sum())


def _cox_stratum_terms(g, beta, want_derivs):
    """Log-PL value (and optionally score/information) for one stratum."""
    if g["event_times"].size == 0:
        p = len(beta)
        return 0.0, np.zeros(p), np.zeros((p, p))
    eta = g["x"] @ beta if len(beta) else np.zeros(len(g["t"]))
    shift = float(eta.max()) if eta.size else 0.0
    w = np.exp(eta - shift)
    s0_suffix = np.cumsum(w[::-1])[::-1]
    s0 = s0_suffix[g["risk_start"]]
    eta_events = eta[g["eta_event_sum_idx"]]
    eta_event_sum = np.add.reduceat(eta_events, g["event_first"]) if eta_events.size else np.empty(0)
    ll = float(np.sum(eta_event_sum) - np.sum(g["d"] * (np.log(s0) + shift)))
    if not want_derivs or len(beta) == 0:
        p = len(beta)
        return ll, np.zeros(p), np.zeros((p, p))
    wx = g["x"] * w[:, None]
    s1_suffix = np.cumsum(wx[::-1], axis=0)[::-1]
    s1 = s1_suffix[g["risk_start"]]
    xbar = s1 / s0[:, None]
    grad = g["x_event_sum"].sum(axis=0) - (g["d"][:, None] * xbar).sum(axis=0)
    wxx = np.einsum("ij,ik->ijk", g["x"], wx)
    s2_suffix = np.cumsum(wxx[::-1], axis=0)[::-1]
    s2 = s2_suffix[g["risk_start"]]
    v = s2 / s0[:, None, None] - np.einsum("ij,ik->ijk", xbar, xbar)
    info = np.einsum("i,ijk->jk", g["d"], v)
    return ll, grad, info


def cox_loglik(beta, times, events, X, strata=None) -> float:
    """Stratified Breslow-ties log partial likelihood at beta."""
    data = _CoxData(times, events, X, strata)
    beta = np.asarray(beta, dtype=float)
    return sum(_cox_stratum_terms(g, beta, False)[0] for g in data.groups)


def cox_score(beta, times, events, X, strata=None) -> np.ndarray:
    """Analytic score of the log partial likelihood at beta."""
    data = _CoxData(times, events, X, strata)
    beta = np.asarray(beta, dtype=float)
    grad = np.zeros(len(beta))
    for g in data.groups:
        grad += _cox_stratum_terms(g, beta, True)[1]
    return grad


def _breslow_baseline(data: _CoxData, beta) -> dict:
    out = {}
    for g in data.groups:
        if g["event_times"].size == 0:
            out[g["label"]] = StepFunction(np.empty(0), np.empty(0), 0.0)
            continue
        eta = g["x"] @ beta if len(beta) else np.zeros(len(g["t"]))
        w = np.exp(eta)
        s0 = np.cumsum(w[::-1])[::-1][g["risk_start"]]
        out[g["label"]] = StepFunction(g["event_times"], np.cumsum(g["d"] / s0), 0.0)
    return out


def fit_cox_arrays(times, events, X, strata=None,
                   design_spec: DesignSpec | None = None,
                   trial: int | None = None) -> CoxFit:
    """Fit a (stratified) Cox model on raw arrays; events are drop-outs.

    The baseline cumulative hazard per stratum is the Breslow estimator at
    the fitted coefficients; with an empty design it reduces to Nelson-Aalen.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        X = X.reshape(len(np.asarray(times)), -1)
    data = _CoxData(times, events, X, strata)
    p = data.p

    if p == 0:
        baseline = _breslow_baseline(data, np.empty(0))
        return CoxFit(np.empty(0), data.strata_labels, baseline, design_spec, True, 0, 0.0, trial)

    if data.n_events == 0:
        raise EstimationError("no drop-out events; cannot fit censoring model with covariates")
    if np.linalg.matrix_rank(X) < p:
        raise RankDeficient("Cox design matrix is rank deficient")

    def _ll(b):
        return sum(_cox_stratum_terms(g, b, False)[0] for g in data.groups)

    beta = np.zeros(p)
    ll = _ll(beta)
    stagnant = False
    for it in range(1, _MAX_ITER + 1):
        grad = np.zeros(p)
        info = np.zeros((p, p))
        for g in data.groups:
            _, gr, inf = _cox_stratum_terms(g, beta, True)
            grad += gr
            info += inf
        gmax = float(np.max(np.abs(grad)))
        if gmax < _GRAD_TOL_TIGHT or (stagnant and gmax < GRAD_TOL):
            return CoxFit(beta, data.strata_labels, _breslow_baseline(data, beta),
                          design_spec, True, it - 1, ll, trial)
        if stagnant:
            raise NonConvergence(
                f"Cox partial likelihood stalled with gradient max-norm {gmax:.2e}"
            )
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise RankDeficient("singular information matrix in Cox fit") from None

        new_beta, new_ll, improved = _line_search(_ll, beta, step, ll)
        stagnant = _stagnated(beta, new_beta, improved)
        beta, ll = new_beta, new_ll
        if np.max(np.abs(beta)) > _DIVERGENCE_BOUND:
            raise MonotoneLikelihood(
                f"Cox coefficient diverging: max |coef| = {np.max(np.abs(beta)):.1f}"
            )
    gmax = float(np.max(np.abs(cox_score(beta, times, events, X, strata))))
    if gmax < GRAD_TOL:
        return CoxFit(beta, data.strata_labels, _breslow_baseline(data, beta),
                      design_spec, True, _MAX_ITER, ll, trial)
    raise NonConvergence(f"Cox fit did not converge in {_MAX_ITER} iterations")


def dropout_indicator(ds) -> np.ndarray:
    """Drop-out event for the censoring model: censored strictly before the
    administrative censoring time. Administrative censoring is not drop-out."""
    return ((ds.delta == 0) & (ds.t_star < ds.admin_censor_time)).astype(int)


def fit_cox(ds, formula, strata_var: str | None = "arm",
            trial: int | None = None) -> CoxFit:
    """Fit the drop-out Cox model on a dataset (or trial subset).

    `formula` is a list of terms (see design.parse_formula); spline knots are
    placed at percentiles of this subset's data. `strata_var` may be "arm" or
    None for a single stratum.
    """
    spec = DesignSpec.from_formula(formula, intercept=False).fit(ds.covariates)
    X = spec.matrix(ds.covariates, n=len(ds))
    if strata_var is None:
        strata = None
    elif strata_var == "arm":
        strata = ds.a
    else:
        if strata_var not in ds.covariates:
            raise SchemaMismatch(f"strata variable {strata_var!r} not in dataset")
        strata = ds.covariates[strata_var]
    return fit_cox_arrays(ds.t_star, dropout_indicator(ds), X, strata, spec, trial)


# ---------------------------------------------------------------------------
# censoring survival and Nelson-Aalen


def _stratum_fit(fits, a, s):
    """Resolve (arm, trial) to a (CoxFit, stratum label) pair."""
    if isinstance(fits, CoxFit):
        fit = fits
        if fit.trial is not None and fit.trial != s:
            raise UnknownStratum(f"fit covers trial {fit.trial}, not s={s}")
    else:
        try:
            fit = fits[s]
        except (KeyError, TypeError):
            raise UnknownStratum(f"no censoring fit for trial s={s}") from None
    if fit.strata == (UNSTRATIFIED,):
        return fit, UNSTRATIFIED
    if a not in fit.strata:
        raise UnknownStratum(f"no fitted stratum for arm a={a} in trial s={s}")
    return fit, a


def censoring_survival(fits, t, w, a, s) -> float:
    """Probability of remaining uncensored just before t, exp(-Lambda0(t-) e^{x'alpha}).

    `fits` is either a single CoxFit or a mapping trial -> CoxFit (one
    censoring model per trial, each stratified by arm).
    """
    fit, stratum = _stratum_fit(fits, a, s)
    cumhaz = fit.baseline_cumhaz[stratum].eval_left(t)
    if fit.design_spec is not None and len(fit.coefficients):
        eta = float(fit.design_spec.row(w) @ fit.coefficients)
    else:
        eta = 0.0
    return float(np.exp(-cumhaz * np.exp(eta)))


def censoring_survival_columns(fits, ds) -> np.ndarray:
    """Vectorized censoring survival at each record's own time (left limit)."""
    out = np.empty(len(ds))
    for trial in (0, 1):
        tmask = ds.s == trial
        if not tmask.any():
            continue
        fit = fits if isinstance(fits, CoxFit) else fits.get(trial)
        if fit is None:
            raise UnknownStratum(f"no censoring fit for trial s={trial}")
        if fit.design_spec is not None and len(fit.coefficients):
            cols = {k: v[tmask] for k, v in ds.covariates.items()}
            eta = fit.design_spec.matrix(cols, n=int(tmask.sum())) @ fit.coefficients
        else:
            eta = np.zeros(int(tmask.sum()))
        arms = ds.a[tmask]
        times = ds.t_star[tmask]
        vals = np.empty(times.shape)
        for arm in np.unique(arms):
            _, stratum = _stratum_fit(fit, int(arm), trial)
            amask = arms == arm
            vals[amask] = fit.baseline_cumhaz[stratum].eval_left(times[amask])
        out[tmask] = np.exp(-vals * np.exp(eta))
    return out


def nelson_aalen(times, events) -> StepFunction:
    """Nelson-Aalen cumulative hazard: sum over event times of d_j / n_j."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    order = np.argsort(times, kind="stable")
    t_sorted = times[order]
    e_sorted = events[order]
    ev_pos = np.flatnonzero(e_sorted == 1)
    if ev_pos.size == 0:
        return StepFunction(np.empty(0), np.empty(0), 0.0)
    ev_times, first = np.unique(t_sorted[ev_pos], return_index=True)
    d = np.add.reduceat(np.ones_like(ev_pos, dtype=float), first)
    n_at_risk = len(t_sorted) - np.searchsorted(t_sorted, ev_times, side="left")
    return StepFunction(ev_times, np.cumsum(d / n_at_risk), 0.0)
