"""Exception types raised by the blender_lab modules.

Every error carries a short machine-readable ``code`` so the CLI can report
it without parsing messages.
"""


class BlenderError(Exception):
    code = "ERROR"

    def __init__(self, message="", **details):
        super().__init__(message or self.code)
        self.details = details


class NotInStrip(BlenderError):
    code = "NOT_IN_STRIP"


class NoConvergence(BlenderError):
    code = "NO_CONVERGENCE"


class Violation(BlenderError):
    """A hyperbolicity inequality failed; ``inequality`` and ``value`` name it."""

    code = "VIOLATION"

    def __init__(self, inequality, value, message=""):
        super().__init__(message or f"{inequality} = {value!r}", inequality=inequality, value=value)
        self.inequality = inequality
        self.value = value


class Degenerate(BlenderError):
    code = "DEGENERATE"


class NoCone(BlenderError):
    code = "NO_CONE"


class EmptyWindow(BlenderError):
    code = "EMPTY_WINDOW"


class Inadmissible(BlenderError):
    code = "INADMISSIBLE"


class NoAlpha(BlenderError):
    code = "NO_ALPHA"


class NoN(BlenderError):
    code = "NO_N"


class Exhausted(BlenderError):
    code = "EXHAUSTED"


class NotCrossing(BlenderError):
    code = "NOT_CROSSING"


class Stuck(BlenderError):
    code = "STUCK"


class InvariantBreach(BlenderError):
    code = "INVARIANT_BREACH"


class MaxDepth(BlenderError):
    code = "MAX_DEPTH"


class BadMu(BlenderError):
    code = "BAD_MU"

    def __init__(self, mu, mu_max, message=""):
        super().__init__(message or f"mu={mu!r} not below mu_1={mu_max!r}", mu=mu, mu_max=mu_max)
        self.mu = mu
        self.mu_max = mu_max
