"""Synthetic two-trial study generator, truth oracle, and scenario runner
for the operating-characteristic study (bias, ESE, SER, coverage, and the
permutation test's type-1 error and power).

The generator draws an injection-drug-use flag w1, a CD4-like covariate w2
(a shifted normal clamped to [0, 1600]), trial membership s depending on
both, a 50/50 arm assignment within trial (arms 1/2 when s=0, arms 2/3 when
s=1), Weibull-type potential event times sharing one uniform draw per
subject, and an independent Weibull drop-out time; everything is
administratively censored at day 365. All constants are overridable.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import DatasetSchema, FusedDataset
from .errors import ConfigError, InsufficientPool, TrialBridgeError
from .bootstrap import BootstrapSpec, bootstrap_rd
from .diagnostics import permutation_test
from .estimator import PipelineConfig, bridged_estimate

log = logging.getLogger(__name__)

ARMS = (1, 2, 3)


@dataclass(frozen=True)
class DgpParams:
    """Data-generating constants (defaults are the reference configuration)."""

    w1_prob: float = 0.3
    z_mean: float = 0.3
    z_sd: float = 45.0
    w2_lo: float = 0.0
    w2_hi: float = 1600.0
    w2_w1_shift: float = -7.0
    sel_intercept: float = 0.5
    sel_w1: float = -1.5
    sel_w2: float = 0.02
    sel_w2_center: float = 250.0
    arm_prob: float = 0.5
    haz_intercept: float = 4.9
    haz_arm2: float = 0.4
    haz_arm3: float = 1.5
    haz_w1: float = -3.0
    haz_w2: float = 0.01
    haz_arm2_w1: float = -0.2
    haz_arm3_w1: float = -0.25
    event_power: float = 0.8
    censor_scale: float = 7.2
    censor_power: float = 3.0
    admin_censor_time: float = 365.0


@dataclass(frozen=True)
class PotentialOutcomeRecord:
    """One generated subject with all three potential event times."""

    w1: int
    w2: float
    s: int
    a: int
    t_pot: dict  # arm -> potential event time
    c: float
    t_star: float
    delta: int


class PopulationDraw:
    """Columnar container for generated subjects (row views on demand)."""

    def __init__(self, w1, w2, s, a, t_pot, c, t_star, delta):
        self.w1 = w1
        self.w2 = w2
        self.s = s
        self.a = a
        self.t_pot = t_pot
        self.c = c
        self.t_star = t_star
        self.delta = delta

    def __len__(self):
        return self.w1.size

    def record(self, i: int) -> PotentialOutcomeRecord:
        return PotentialOutcomeRecord(
            int(self.w1[i]), float(self.w2[i]), int(self.s[i]), int(self.a[i]),
            {arm: float(self.t_pot[arm][i]) for arm in ARMS},
            float(self.c[i]), float(self.t_star[i]), int(self.delta[i]),
        )


def event_time_scale(arm: int, w1, w2, params: DgpParams):
    """Scale of the potential event time for one arm given covariates."""
    lin = (
        params.haz_intercept
        + params.haz_arm2 * (arm == 2)
        + params.haz_arm3 * (arm == 3)
        + params.haz_w1 * w1
        + params.haz_w2 * w2
        + params.haz_arm2_w1 * (arm == 2) * w1
        + params.haz_arm3_w1 * (arm == 3) * w1
    )
    return np.exp(lin)


def generate_population(n_total: int, params: DgpParams, seed) -> PopulationDraw:
    """Generate n_total subjects with potential outcomes under every arm.

    One uniform draw per subject drives all three potential event times, so
    they are comonotone; drop-out is independent of everything else.
    """
    rng = np.random.default_rng(seed)
    w1 = rng.binomial(1, params.w1_prob, n_total)
    z = rng.normal(params.z_mean, params.z_sd, n_total)
    w2 = np.clip(params.w2_w1_shift * w1 + z, params.w2_lo, params.w2_hi)
    sel_lin = params.sel_intercept + params.sel_w1 * w1 + params.sel_w2 * (w2 - params.sel_w2_center)
    s = rng.binomial(1, expit(sel_lin))
    a = rng.binomial(1, params.arm_prob, n_total) + 1 + s  # {1,2} if s=0, {2,3} if s=1
    u = rng.random(n_total)
    u_censor = rng.random(n_total)

    neg_log_u = -np.log(u)
    t_pot = {arm: (event_time_scale(arm, w1, w2, params) * neg_log_u) ** params.event_power
             for arm in ARMS}
    t_assigned = np.choose(a - 1, [t_pot[1], t_pot[2], t_pot[3]])
    c = (-params.censor_scale * np.log(u_censor)) ** params.censor_power
    t_star = np.minimum(np.minimum(t_assigned, c), params.admin_censor_time)
    delta = (t_assigned == t_star).astype(int)
    return PopulationDraw(w1, w2, s, a, t_pot, c, t_star, delta)


SIM_SCHEMA = DatasetSchema.from_mapping({"w1": "binary", "w2": "real"})


def sample_trials(params: DgpParams, n_target: int, n_bridge: int, seed,
                  pool_multiplier: int = 3, max_doublings: int = 12) -> FusedDataset:
    """Draw a two-trial dataset: generate a pool of pool_multiplier *
    (n_target + n_bridge) subjects, then sample exactly n_target records
    among s=1 and n_bridge among s=0 without replacement.

    If a stratum is short the pool is regenerated with a doubled multiplier
    (counted in provenance) rather than failing outright.
    """
    if n_target < 1 or n_bridge < 1:
        raise ConfigError("both trial sizes must be at least 1")
    schema = DatasetSchema(SIM_SCHEMA.covariates, params.admin_censor_time)
    base = n_target + n_bridge
    for regen in range(max_doublings + 1):
        mult = pool_multiplier * 2 ** regen
        pool = generate_population(mult * base, params,
                                   np.random.SeedSequence(seed, spawn_key=(regen,)))
        pos_target = np.flatnonzero(pool.s == 1)
        pos_bridge = np.flatnonzero(pool.s == 0)
        if pos_target.size < n_target or pos_bridge.size < n_bridge:
            continue
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(regen, 1)))
        chosen = np.concatenate([
            rng.choice(pos_bridge, size=n_bridge, replace=False),
            rng.choice(pos_target, size=n_target, replace=False),
        ])
        ids = [f"sim-{i:06d}" for i in range(chosen.size)]
        return FusedDataset(
            ids,
            pool.s[chosen],
            pool.a[chosen],
            pool.t_star[chosen],
            pool.delta[chosen],
            {"w1": pool.w1[chosen].astype(float), "w2": pool.w2[chosen]},
            schema,
            {"source": "simulated", "pool_regenerations": regen,
             "pool_multiplier": mult},
        )
    raise InsufficientPool(
        f"could not find {n_target}/{n_bridge} records per stratum even with "
        f"multiplier {pool_multiplier * 2 ** max_doublings}"
    )


# ---------------------------------------------------------------------------
# truth oracle


@dataclass(frozen=True)
class TrueRd:
    value: float
    mc_se: float
    n_used: int


def true_rd_curve(params: DgpParams, n_oracle: int, times, seed) -> list[TrueRd]:
    """Monte Carlo truth for the arm-3 vs arm-1 risk difference in the
    target (s=1) population, from potential outcomes.

    Generated in chunks; each time point gets a paired-difference standard
    error.
    """
    times = np.asarray(times, dtype=float)
    chunk = 2_000_000
    sums = np.zeros(times.size)
    sumsq = np.zeros(times.size)
    m = 0
    done = 0
    part = 0
    while done < n_oracle:
        size = min(chunk, n_oracle - done)
        pool = generate_population(size, params,
                                   np.random.SeedSequence(seed, spawn_key=(part,)))
        keep = pool.s == 1
        d = (pool.t_pot[3][keep][:, None] < times[None, :]).astype(float) - (
            pool.t_pot[1][keep][:, None] < times[None, :]
        )
        sums += d.sum(axis=0)
        sumsq += (d ** 2).sum(axis=0)
        m += int(keep.sum())
        done += size
        part += 1
    mean = sums / m
    var = (sumsq / m - mean ** 2) * m / max(m - 1, 1)
    return [TrueRd(float(mean[k]), float(np.sqrt(var[k] / m)), m) for k in range(times.size)]


def true_rd(params: DgpParams, n_oracle: int, t: float, seed) -> TrueRd:
    """Scalar-time convenience wrapper around true_rd_curve."""
    return true_rd_curve(params, n_oracle, [t], seed)[0]


# ---------------------------------------------------------------------------
# scenario runner


@dataclass(frozen=True)
class ScenarioConfig:
    n_target: int = 1000
    n_bridge: int = 1000
    dgp: DgpParams = field(default_factory=DgpParams)
    sampling_model: str = "correct"  # "correct" (w1 + w2) or "incorrect" (w2 only)
    alpha_levels: tuple = (0.05, 0.10, 0.20)
    bootstrap_b: int = 200
    permutations: int = 1000
    n_sims: int = 200
    t_eval: tuple = (91.0, 183.0, 274.0, 365.0)
    master_seed: int = 1
    oracle_n: int = 1_000_000
    pool_multiplier: int = 3
    max_failure_fraction: float = 0.05

    def __post_init__(self):
        if self.sampling_model not in ("correct", "incorrect"):
            raise ConfigError(f"unknown sampling_model {self.sampling_model!r}")
        if self.n_target < 1 or self.n_bridge < 1:
            raise ConfigError("trial sizes must be positive")
        if self.n_sims < 1:
            raise ConfigError("n_sims must be positive")
        if not self.t_eval or any(t <= 0 or t > self.dgp.admin_censor_time for t in self.t_eval):
            raise ConfigError("t_eval times must lie in (0, admin_censor_time]")

    def sampling_formula(self) -> tuple:
        return ("w1", "w2") if self.sampling_model == "correct" else ("w2",)

    def pipeline(self) -> PipelineConfig:
        # drop-out is covariate-free and identical everywhere in the
        # generator, so the censoring model is a single pooled empty-design
        # fit (Nelson-Aalen) shared by both trials and arms
        return PipelineConfig(censoring_formula=(), strata_var=None,
                              pool_censoring=True,
                              sampling_formula=self.sampling_formula())


def _child_seed(master: int, *key) -> int:
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1, np.uint64)[0])


@dataclass
class ReplicateOutcome:
    index: int
    estimate: np.ndarray | None = None  # per t_eval
    se: np.ndarray | None = None
    ci_lo: np.ndarray | None = None
    ci_hi: np.ndarray | None = None
    p_value: float | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def run_replicate(cfg: ScenarioConfig, r: int) -> ReplicateOutcome:
    """One simulation replicate: draw trials, estimate, bootstrap, test."""
    try:
        ds = sample_trials(cfg.dgp, cfg.n_target, cfg.n_bridge,
                           _child_seed(cfg.master_seed, 0, r, 0),
                           cfg.pool_multiplier)
        pipeline = cfg.pipeline()
        est = bridged_estimate(ds, pipeline)
        spec = BootstrapSpec(cfg.bootstrap_b, _child_seed(cfg.master_seed, 0, r, 1),
                             np.asarray(cfg.t_eval, dtype=float))
        boot = bootstrap_rd(ds, pipeline, spec, original=est)
        perm = permutation_test(ds, est.nuisance, cfg.permutations,
                                seed=_child_seed(cfg.master_seed, 0, r, 2),
                                weights=est.weights)
        return ReplicateOutcome(
            r,
            boot.bridged.rd,
            boot.bridged.se,
            boot.bridged.ci_lo,
            boot.bridged.ci_hi,
            perm.p_value,
        )
    except TrialBridgeError as exc:
        log.warning("replicate %d failed: %s", r, exc)
        return ReplicateOutcome(r, error=f"{type(exc).__name__}: {exc}")


@dataclass(frozen=True)
class MetricsRow:
    t: float
    subset: str  # "all" or "diagnostic p > a" for conditional rows
    n_sims: int
    bias: float
    ese: float
    ser: float
    coverage: float


@dataclass(frozen=True)
class ScenarioMetrics:
    sampling_model: str
    truth: dict  # t -> TrueRd
    rows: list  # MetricsRow
    rejection: dict  # alpha -> proportion of p-values below alpha
    rejection_kind: str  # "type1" or "power"
    n_sims: int
    n_failed: int


@dataclass(frozen=True)
class ScenarioResult:
    config: ScenarioConfig
    metrics: ScenarioMetrics
    replicates: list  # ReplicateOutcome, ordered by index


class TooManyReplicateFailures(TrialBridgeError):
    def __init__(self, outcomes, n_failed):
        self.outcomes = outcomes
        self.n_failed = n_failed
        errors = [o.error for o in outcomes if o.failed][:5]
        super().__init__(
            f"{n_failed} of {len(outcomes)} replicates failed; first errors: {errors}"
        )


def _aggregate(cfg: ScenarioConfig, outcomes, truth) -> ScenarioMetrics:
    ok = [o for o in outcomes if not o.failed]
    n_failed = len(outcomes) - len(ok)
    est = np.array([o.estimate for o in ok])
    se = np.array([o.se for o in ok])
    lo = np.array([o.ci_lo for o in ok])
    hi = np.array([o.ci_hi for o in ok])
    pvals = np.array([o.p_value for o in ok])
    t_eval = np.asarray(cfg.t_eval, dtype=float)

    def rows_for(mask, label):
        out = []
        k = int(mask.sum())
        for j, t in enumerate(t_eval):
            tr = truth[float(t)].value
            bias = float(np.mean(est[mask, j]) - tr)
            ese = float(np.std(est[mask, j], ddof=1)) if k > 1 else float("nan")
            ser = float(ese / np.mean(se[mask, j])) if k > 1 else float("nan")
            cover = float(np.mean((lo[mask, j] <= tr) & (tr <= hi[mask, j])))
            out.append(MetricsRow(float(t), label, k, bias, ese, ser, cover))
        return out

    rows = rows_for(np.ones(len(ok), dtype=bool), "all")
    for alpha in cfg.alpha_levels:
        cond = pvals > alpha
        if cond.any():
            rows += rows_for(cond, f"diagnostic p > {alpha:g}")
    rejection = {float(a): float(np.mean(pvals < a)) for a in cfg.alpha_levels}
    kind = "type1" if cfg.sampling_model == "correct" else "power"
    return ScenarioMetrics(cfg.sampling_model, truth, rows, rejection, kind, len(ok), n_failed)


def run_scenario(cfg: ScenarioConfig, workers: int = 1,
                 progress_every: int = 20) -> ScenarioResult:
    """Run all replicates and aggregate operating characteristics.

    Replicate seeds derive from (master_seed, replicate index), and results
    are collected in index order, so the metrics are identical for any
    worker count. Aborts if more than max_failure_fraction of replicates
    fail.
    """
    truth_list = true_rd_curve(cfg.dgp, cfg.oracle_n, cfg.t_eval,
                               np.random.SeedSequence(cfg.master_seed, spawn_key=(1,)))
    truth = {float(t): tr for t, tr in zip(cfg.t_eval, truth_list)}
    log.info("truth at %s: %s", list(cfg.t_eval),
             [round(tr.value, 4) for tr in truth_list])

    outcomes: list[ReplicateOutcome | None] = [None] * cfg.n_sims
    if workers <= 1:
        for r in range(cfg.n_sims):
            outcomes[r] = run_replicate(cfg, r)
            if (r + 1) % progress_every == 0:
                log.info("replicates done: %d / %d", r + 1, cfg.n_sims)
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            for r, out in enumerate(pool.map(run_replicate, [cfg] * cfg.n_sims,
                                             range(cfg.n_sims), chunksize=1)):
                outcomes[r] = out
                if (r + 1) % progress_every == 0:
                    log.info("replicates done: %d / %d", r + 1, cfg.n_sims)

    n_failed = sum(1 for o in outcomes if o.failed)
    if n_failed > cfg.max_failure_fraction * cfg.n_sims:
        raise TooManyReplicateFailures(outcomes, n_failed)
    metrics = _aggregate(cfg, outcomes, truth)
    return ScenarioResult(cfg, metrics, outcomes)
