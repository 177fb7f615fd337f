"""
Exceptions raised by defectforge.

Every error derives from :class:`DefectForgeError`. Errors that describe a bad
argument additionally derive from :class:`ValueError`, and :class:`IoError`
derives from :class:`OSError`, so callers can catch them the usual way.
"""


class DefectForgeError(Exception):
    """
    Base class for all errors raised by this package.
    """


class EmptyRegion(DefectForgeError, ValueError):
    """
    A region mask that must select at least one pixel selects none.
    """


class ShapeMismatch(DefectForgeError, ValueError):
    pass


class ChannelMismatch(DefectForgeError, ValueError):
    pass


class UnsupportedKernel(DefectForgeError, ValueError):
    pass


class NotScalar(DefectForgeError, ValueError):
    """
    :func:`~defectforge.diffcore.backward` was called on a tensor with more
    than one element.
    """


class NonFiniteValue(DefectForgeError, ValueError):
    pass


class WeightsMismatch(DefectForgeError, ValueError):
    """
    A tensor archive does not provide the tensors a network schedule expects.
    """


class UnknownTap(DefectForgeError, KeyError):
    pass


class InputTooSmall(DefectForgeError, ValueError):
    pass


class RegionTooSmall(DefectForgeError, ValueError):
    pass


class CropTooLarge(DefectForgeError, ValueError):
    pass


class AlignmentError(DefectForgeError, ValueError):
    pass


class NoData(DefectForgeError, ValueError):
    pass


class Diverged(DefectForgeError, ArithmeticError):
    """
    Training produced a non-finite loss.

    The :attr:`iteration` attribute is the zero-based index of the
    offending iteration.
    """

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super(Diverged, self).__init__(
            message or 'training diverged at iteration {}'.format(iteration)
        )


class ConfigError(DefectForgeError, ValueError):
    pass


class UsageError(DefectForgeError):
    """
    The command line could not be parsed.
    """


class IoError(DefectForgeError, OSError):
    pass
