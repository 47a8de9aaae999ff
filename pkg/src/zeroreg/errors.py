"""Exception hierarchy shared by every stage of the pipeline."""


class RegistrationError(Exception):
    """Base class for all errors raised by zeroreg."""

    status = "error"


class ParameterError(RegistrationError, ValueError):
    status = "parameter_error"


class EmptyInputError(RegistrationError, ValueError):
    status = "empty_input"


class OutOfRangeError(RegistrationError, ValueError):
    status = "out_of_range"


class DegenerateGeometryError(RegistrationError):
    status = "degenerate_geometry"


class SparsePatchError(RegistrationError):
    status = "sparse_patch"


class ScaleEmptyError(RegistrationError):
    status = "scale_empty"


class InsufficientConsensusError(RegistrationError):
    status = "insufficient_consensus"


class InsufficientDataError(RegistrationError):
    status = "insufficient_data"


class DegenerateModelError(RegistrationError):
    status = "degenerate_model"


class ParseError(RegistrationError, ValueError):
    status = "parse_error"
