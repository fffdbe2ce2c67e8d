"""Exceptions raised across the scenlab package, each mapped to a CLI exit code."""


class ScenlabError(Exception):

    """Base class for all scenlab errors."""

    exit_code = 1


class ConfigError(ScenlabError, ValueError):

    """Invalid, incomplete or unknown configuration."""

    exit_code = 2


class ShapeError(ScenlabError, ValueError):

    """
    Operand shapes do not fit the op.

    :param op: name of the op that rejected its inputs.
    :param left: shape of the first operand.
    :param right: shape of the second operand.
    """

    def __init__(self, op: str, left, right):
        """Build the message from the op name and both shapes."""
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: incompatible shapes {self.left} and {self.right}")


class GradientError(ScenlabError):

    """Backward was asked for something it cannot differentiate (non-scalar or non-finite loss)."""


class DivergenceError(ScenlabError):

    """Training loss became non-finite."""

    exit_code = 3

    def __init__(self, step: int, loss: float):
        """Record the step at which the loss diverged."""
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")


class CheckpointError(ScenlabError):

    """A checkpoint file is malformed, truncated or of an unsupported version."""


class KnowledgeBaseError(ScenlabError):

    """A knowledge-base file is malformed or holds no experts."""


class FingerprintError(KnowledgeBaseError):

    """A knowledge base was built against a different base checkpoint."""

    exit_code = 4


class DatasetError(ScenlabError, ValueError):

    """Dataset contents do not fit the generator contract or the loaded checkpoint."""

    exit_code = 4


class IntegrityError(ScenlabError):

    """Experts, neurons and routing indices disagree."""


class AssertionFailure(ScenlabError):

    """One or more requested acceptance checks failed."""

    exit_code = 5
