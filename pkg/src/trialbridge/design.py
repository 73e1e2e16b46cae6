"""Model formulas and design-matrix construction.

A formula is a list of terms. Each term is either a plain covariate name or
``spline(name, p1, p2, ...)``, which expands the covariate with a restricted
quadratic spline whose knots sit at the given percentiles of the fitting
data. Restricted means the expansion is linear beyond the last knot.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, SchemaMismatch


@dataclass(frozen=True)
class SplineSpec:
    """Knot layout for a restricted quadratic spline basis."""

    knots: np.ndarray
    percentile_spec: tuple[float, ...] | None = None

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.size < 3:
            raise ConfigError("restricted quadratic spline needs at least 3 knots")
        if np.any(np.diff(knots) <= 0):
            raise ConfigError(f"spline knots must be strictly increasing, got {knots!r}")
        object.__setattr__(self, "knots", knots)


def spline_basis(x, spec: SplineSpec) -> np.ndarray:
    """Expand x into [x, b_1(x), ..., b_{K-2}(x)].

    Each b_j is a truncated quadratic pinned so that the basis (and hence any
    fitted curve) is linear for x beyond the last knot:

        b_j(x) = (x - k_j)+^2
                 - (x - k_K)+^2   * (k_K - k_j) / (k_K - k_{K-1})
                 + (x - k_{K-1})+^2 * (k_{K-1} - k_j) / (k_K - k_{K-1})

    Accepts a scalar (returns shape (K-1,)) or a vector (returns (n, K-1)).
    """
    k = spec.knots
    big = k[-1]
    lag = k[-2]
    gap = big - lag
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    cols = [x_arr]
    tail_big = np.clip(x_arr - big, 0.0, None) ** 2
    tail_lag = np.clip(x_arr - lag, 0.0, None) ** 2
    for kj in k[:-2]:
        bj = (
            np.clip(x_arr - kj, 0.0, None) ** 2
            - tail_big * (big - kj) / gap
            + tail_lag * (lag - kj) / gap
        )
        cols.append(bj)
    out = np.column_stack(cols)
    return out[0] if np.isscalar(x) or np.asarray(x).ndim == 0 else out


_SPLINE_RE = re.compile(r"^spline\(\s*([A-Za-z_]\w*)\s*((?:,\s*[\d.]+\s*)+)\)$")
_NAME_RE = re.compile(r"^[A-Za-z_]\w*$")


@dataclass(frozen=True)
class Term:
    """One formula term; spline terms carry percentiles and, once fitted, knots."""

    name: str
    percentiles: tuple[float, ...] | None = None
    spec: SplineSpec | None = None

    @property
    def is_spline(self) -> bool:
        return self.percentiles is not None

    def to_formula(self) -> str:
        if not self.is_spline:
            return self.name
        pcts = ", ".join(f"{p:g}" for p in self.percentiles)
        return f"spline({self.name}, {pcts})"

    def width(self) -> int:
        if not self.is_spline:
            return 1
        return len(self.percentiles) - 1

    def column_names(self) -> list[str]:
        if not self.is_spline:
            return [self.name]
        return [self.name] + [f"{self.name}_rqs{i}" for i in range(1, len(self.percentiles) - 1)]


def parse_formula(terms) -> list[Term]:
    parsed = []
    for raw in terms:
        raw = raw.strip()
        m = _SPLINE_RE.match(raw)
        if m:
            name = m.group(1)
            pcts = tuple(float(p) for p in m.group(2).strip(", ").split(","))
            if len(pcts) < 3:
                raise ConfigError(f"spline term {raw!r} needs at least 3 percentiles")
            if any(not 0 <= p <= 100 for p in pcts) or any(
                b <= a for a, b in zip(pcts, pcts[1:])
            ):
                raise ConfigError(f"spline percentiles must be increasing in [0, 100]: {raw!r}")
            parsed.append(Term(name, percentiles=pcts))
        elif _NAME_RE.match(raw):
            parsed.append(Term(raw))
        else:
            raise ConfigError(f"cannot parse formula term {raw!r}")
    return parsed


@dataclass(frozen=True)
class DesignSpec:
    """A parsed formula, optionally with spline knots fitted to data."""

    terms: tuple[Term, ...]
    intercept: bool = True

    @classmethod
    def from_formula(cls, terms, intercept: bool = True) -> "DesignSpec":
        return cls(tuple(parse_formula(terms)), intercept)

    @property
    def fitted(self) -> bool:
        return all(t.spec is not None for t in self.terms if t.is_spline)

    @property
    def covariate_names(self) -> list[str]:
        return [t.name for t in self.terms]

    def column_names(self) -> list[str]:
        names = ["intercept"] if self.intercept else []
        for t in self.terms:
            names.extend(t.column_names())
        return names

    def fit(self, columns) -> "DesignSpec":
        """Resolve spline percentiles into knots using the given data columns."""
        fitted_terms = []
        for t in self.terms:
            if t.name not in columns:
                raise SchemaMismatch(f"covariate {t.name!r} not in data")
            if t.is_spline:
                knots = np.percentile(np.asarray(columns[t.name], dtype=float), t.percentiles)
                if np.any(np.diff(knots) <= 0):
                    raise ConfigError(
                        f"degenerate spline knots for {t.name!r}: percentiles "
                        f"{t.percentiles} give {knots!r}"
                    )
                fitted_terms.append(replace(t, spec=SplineSpec(knots, t.percentiles)))
            else:
                fitted_terms.append(t)
        return DesignSpec(tuple(fitted_terms), self.intercept)

    def matrix(self, columns, n: int | None = None) -> np.ndarray:
        """Build the design matrix from named covariate columns.

        `n` is only needed for term-free (intercept-only or empty) designs,
        where the row count cannot be inferred from the columns.
        """
        if not self.fitted:
            raise SchemaMismatch("design has unfitted spline terms; call fit() first")
        missing = [t.name for t in self.terms if t.name not in columns]
        if missing:
            raise SchemaMismatch(f"data is missing covariates {missing}")
        lengths = {np.asarray(columns[t.name]).shape[0] for t in self.terms}
        if len(lengths) > 1:
            raise SchemaMismatch("covariate columns have unequal lengths")
        if lengths:
            n = lengths.pop()
        elif n is None:
            raise SchemaMismatch("term-free design needs an explicit row count")
        cols = [np.ones(n)] if self.intercept else []
        for t in self.terms:
            x = np.asarray(columns[t.name], dtype=float)
            if t.is_spline:
                cols.append(spline_basis(x, t.spec))
            else:
                cols.append(x[:, None])
        if not cols:
            return np.empty((n, 0))
        return np.column_stack(cols)

    def row(self, covariates) -> np.ndarray:
        """Design row for a single named covariate mapping."""
        single = {name: np.atleast_1d(float(covariates[name]))
                  for name in self.covariate_names if name in covariates}
        return self.matrix(single, n=1)[0]
