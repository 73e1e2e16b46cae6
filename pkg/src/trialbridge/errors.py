"""Exception types shared across the package.

Grouped by pipeline stage so the CLI can map them onto stable exit codes:
input/validation problems exit 2, estimation problems exit 3, internal
invariant breaches exit 4.
"""


class TrialBridgeError(Exception):
    """Base class for all package errors."""


# ---------------------------------------------------------------------------
# input / validation (exit code 2)


class ValidationError(TrialBridgeError):
    """Bad input data or configuration."""


class MissingColumn(ValidationError):
    pass


class NonNumericValue(ValidationError):
    pass


class ArmTrialMismatch(ValidationError):
    pass


class NonPositiveTime(ValidationError):
    pass


class InvalidValue(ValidationError):
    """Field outside its domain (s, a, delta codes; t beyond admin censoring)."""


class MissingSharedArm(ValidationError):
    """A trial has no shared-arm (a=2) records."""


class EmptyTrialAfterRestriction(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# model fitting / estimation (exit code 3)


class EstimationError(TrialBridgeError):
    """Failure while fitting models or computing estimates."""


class RankDeficient(EstimationError):
    pass


class AllSameClass(EstimationError):
    pass


class Separation(EstimationError):
    """Logistic coefficients diverging (monotone likelihood)."""


class NonConvergence(EstimationError):
    pass


class MonotoneLikelihood(EstimationError):
    """Cox coefficient diverging (partial likelihood has no maximizer)."""


class UnknownStratum(EstimationError):
    pass


class SchemaMismatch(EstimationError):
    """Covariate row does not match the fitted design."""


class ZeroEffectiveSampleSize(EstimationError):
    pass


class DegeneratePermutation(EstimationError):
    """Too many permutations left one group without shared-arm weight."""


class MissingBands(EstimationError):
    pass


class TooManyFailedReplicates(EstimationError):
    pass


class InsufficientPool(EstimationError):
    pass


# ---------------------------------------------------------------------------
# warnings


class ExtremeWeightWarning(UserWarning):
    """A record's total weight multiplier exceeded the configured cap."""


class SmallPermutationCountWarning(UserWarning):
    """Fewer permutations requested than the recommended minimum of 1000."""
