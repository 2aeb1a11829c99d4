"""Exception types raised across the package."""


class EcpError(Exception):
    """Base class for all errors raised by this package."""


class NegativeScore(EcpError):
    def __init__(self, index, value=None):
        self.index = index
        self.value = value
        super().__init__(f"negative score at index {index}: {value}")


class NonFinite(EcpError):
    def __init__(self, index=None, value=None):
        self.index = index
        self.value = value
        where = "" if index is None else f" at index {index}"
        super().__init__(f"non-finite value{where}: {value}")


class TooFew(EcpError):
    def __init__(self, length, minimum=2):
        self.length = length
        super().__init__(f"need at least {minimum} points, got {length}")


class DegenerateX(EcpError):
    """All x values equal; the 1-D least-squares slope is undefined."""


class AllZeroScores(EcpError):
    """Calibration sum and test score are both zero; the e-value is 0/0."""


class AlphaOutOfRange(EcpError):
    def __init__(self, alpha):
        self.alpha = alpha
        super().__init__(f"alpha must lie in (0, 1), got {alpha}")


class AlphaTooSmall(EcpError):
    def __init__(self, alpha, bound):
        self.alpha = alpha
        self.bound = bound
        super().__init__(f"alpha {alpha} not above admissibility bound {bound}")


class BadDims(EcpError):
    """Non-positive or inconsistent dimensions when building a policy."""


class DimMismatch(EcpError):
    """Feature vector length does not match the expected input size."""


class ShapeMismatch(EcpError):
    """Gradient or moment shapes do not match the parameter shapes."""


class StaleCache(EcpError):
    """Backward pass called with a cache from an outdated forward pass."""


class ParseError(EcpError):
    def __init__(self, line_no, detail=""):
        self.line_no = line_no
        super().__init__(f"cannot parse line {line_no}: {detail}")


class SchemaMismatch(EcpError):
    """File header or row arity does not match the expected format."""


class SchemaVersionMismatch(EcpError):
    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(f"checkpoint schema version {found}, expected {expected}")


class CorruptFile(EcpError):
    """Checkpoint file is unreadable or missing required fields."""


class NoBracket(EcpError):
    """Expansion phase exhausted without bracketing the target size."""


class EmptyGrid(EcpError):
    """The alpha search grid contains no admissible points."""


class NonFiniteLoss(EcpError):
    def __init__(self, epoch, detail=""):
        self.epoch = epoch
        super().__init__(f"non-finite training loss at epoch {epoch}: {detail}")
