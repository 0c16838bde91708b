"""Exception hierarchy shared by all modules."""


class MjlsError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MjlsError, ValueError):
    """Malformed model, plant, config or dimension mismatch."""


class DegenerateStateError(ValidationError):
    """A channel state from which a successful delivery is impossible."""


class ErgodicityError(MjlsError):
    """A Markov chain required to be ergodic is reducible or periodic."""


class ConvergenceError(MjlsError):
    """An iterative computation hit its iteration cap."""


class CapExceededError(MjlsError):
    """The maximal burst length search hit its hard cap."""


class SynthesisError(MjlsError):
    """A Riccati weight matrix lost positive definiteness."""


class NotStabilizableError(ConvergenceError):
    """The coupled Riccati value iteration did not converge."""


class BaselineUnstabilizableError(ConvergenceError):
    """The modified Riccati iteration of the Bernoulli baseline diverged."""


class PreconditionError(MjlsError):
    """An operation was called outside its domain (e.g. rho >= 1)."""
