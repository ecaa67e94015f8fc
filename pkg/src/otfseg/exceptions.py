"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation 1, contract 2, I/O 3.
"""


class OTFError(Exception):
    """Base class for package errors."""


class ValidationError(OTFError, ValueError):
    """Bad user input: ranges, missing files, malformed manifests."""


class ShapeError(ValidationError):
    """Tensor shapes or channel counts do not line up."""


class NumericFloorError(ValidationError):
    """A standard deviation of zero was requested without a variance floor."""


class ContractError(OTFError, RuntimeError):
    """An invariant of the adaptation protocol would be broken.

    Raised e.g. when a model is paired with the wrong domain prior generator,
    or an AdaBN model is called without a domain code.
    """
