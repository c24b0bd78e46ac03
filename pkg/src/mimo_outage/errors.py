"""Exception types raised across the package."""


class NotHermitianError(ValueError):
    """Matrix is not Hermitian within tolerance."""


class NotPositiveDefiniteError(ValueError):
    """Matrix has a non-positive eigenvalue where positive definiteness is required."""


class DimensionMismatchError(ValueError):
    pass


class ClusterCollisionError(ArithmeticError):
    """Two eigenvalue clusters coincide, so a (1 - lambda_p / lambda_i) factor vanishes."""


class SeriesOverflowError(OverflowError):
    pass


class NumericalBreakdownError(ArithmeticError):
    """Laguerre coefficient recursion diverged or lost all significant digits."""


class RhoOutOfRangeError(ValueError):
    pass


class DesiredLinkNotKnownError(ValueError):
    """A known-link set was given that does not contain the desired link."""


class NotAlignedError(ValueError):
    pass


class SOutOfRangeError(ValueError):
    """Chernoff parameter s lies outside (0, min 1/sigma_ki^2)."""


class NoFiniteRateError(ValueError):
    """No positive rate meets the outage budget."""


class SingularCovarianceError(ArithmeticError):
    pass


class ConfigError(ValueError):
    """Experiment configuration is invalid; the message names the offending key."""
