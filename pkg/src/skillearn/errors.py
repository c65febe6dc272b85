"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the harness can turn
it into an exit status and an error record.
"""


class SkillearnError(Exception):
    code = "error"


class ShapeMismatch(SkillearnError, ValueError):
    code = "shape-mismatch"


class LengthMismatch(ShapeMismatch):
    code = "length-mismatch"


class NonFiniteResult(SkillearnError, FloatingPointError):
    code = "non-finite-result"


class NonFiniteGradient(NonFiniteResult):
    code = "non-finite-gradient"


class UnknownLeaf(SkillearnError, KeyError):
    code = "unknown-leaf"


class ZeroDirection(SkillearnError, ValueError):
    code = "zero-direction"


class DivisionDegenerate(NonFiniteResult):
    code = "division-degenerate"


class MissingPredecessor(SkillearnError, ValueError):
    code = "missing-predecessor"


class ProblemSpecError(SkillearnError, ValueError):
    code = "invalid-problem"

    def __init__(self, message, group=None, stage=None):
        super().__init__(message)
        self.group = group
        self.stage = stage


class ActiveSupportingOverlap(ProblemSpecError):
    code = "active-supporting-overlap"


class ReuseAfterLearned(ProblemSpecError):
    code = "reuse-after-learned"


class OrphanGroup(ProblemSpecError):
    code = "orphan-group"


class InvalidSpec(SkillearnError, ValueError):
    code = "invalid-spec"


class ConfigError(SkillearnError, ValueError):
    code = "config-error"


class ToleranceExceeded(SkillearnError):
    code = "tolerance-exceeded"

    def __init__(self, message, tag=None):
        super().__init__(message)
        self.tag = tag
