class FedCILError(Exception):
    pass


class ConfigError(FedCILError, ValueError):
    """Invalid configuration, shapes or input files."""


class NumericalError(FedCILError, ArithmeticError):
    """NaN/Inf encountered in parameters or gradients."""
