"""Exception types shared across the package.

Everything raised on purpose derives from :class:`HeadLabError`, so callers
(and the CLI) can distinguish our validation failures from genuine bugs.
"""


class HeadLabError(Exception):
    """Base class for all errors raised by this package."""


class GrammarError(HeadLabError):
    """Prompt text does not match the supported grammar."""


class UnknownObject(HeadLabError):
    """An object id is not present in the catalog / target set."""


class EmptyTargets(HeadLabError):
    """A scene mixture was requested for an empty target set."""


class InvalidT(HeadLabError):
    """Noise schedule requested with an unusable step count."""


class DegenerateVariance(HeadLabError):
    """Per-component marginal variance too small to divide by."""


class MissingCapture(HeadLabError):
    """A required capture timestep is absent from a generation record."""


class DegenerateLabels(HeadLabError):
    """Detector training set contains a single class."""


class NonFiniteLoss(HeadLabError):
    """Detector training loss left the realm of finite numbers."""


class DimensionMismatch(HeadLabError):
    """Feature matrix does not match the model's expected width."""


class NeverAccepts(HeadLabError):
    """Abort policy can never accept an attempt; expected cost diverges."""


class TrialBudgetExceeded(HeadLabError):
    """A Monte Carlo trial exceeded the restart safety cap."""


class RestartLimitExceeded(HeadLabError):
    """A live run burned through its restart budget without completing."""


class MissingReport(HeadLabError):
    """A sweep was asked for a t_last with no confusion report."""


class UsageError(HeadLabError):
    """Bad CLI arguments or config contents."""
