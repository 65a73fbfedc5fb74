"""Exception types shared across modules."""


class NonAnticipativityError(ValueError):
    """A functional was asked to read the path beyond the running time."""


class ConvergenceError(RuntimeError):
    """A fixed-point iteration did not converge; carries the gap log."""

    def __init__(self, message, gaps):
        super().__init__(f"{message}; gaps={[float(g) for g in gaps]}")
        self.gaps = list(gaps)


class ConfigError(ValueError):
    """Invalid configuration, with the dotted path of the offending key."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message
