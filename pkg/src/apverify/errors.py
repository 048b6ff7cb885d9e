"""Exception types shared across the package."""


class ApverifyError(Exception):
    """Base class for all package-specific errors."""


class InvalidP(ApverifyError):
    """The exponent p is incompatible with the risk-aversion a."""


class InvalidRiskAversion(ApverifyError):
    """Risk-aversion outside (0, 1)."""


class ConstraintViolated(ApverifyError):
    """A parameter constraint failed; message names the inequality and both sides."""


class SingularIntensity(ApverifyError):
    """Jump intensity evaluated at the pole (price at the absorbing level, pre-hit)."""


class CensoredPath(ApverifyError):
    """Terminal quantity requested on a path whose horizon was not resolved."""


class DegenerateWeight(ApverifyError):
    """Conditional importance-weight mean indistinguishable from zero."""


class MisalignedSamples(ApverifyError):
    """Per-path sample arrays do not line up."""


class ConfigError(ApverifyError):
    """Invalid experiment configuration; message names the offending key."""


class IoError(ApverifyError):
    """Report emission failed."""
