class CreativeError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CreativeError, ValueError):
    pass


class BackendUnavailableError(CreativeError, RuntimeError):
    pass


class ShapeError(CreativeError, ValueError):
    pass


class ContractViolation(CreativeError, ValueError):
    pass


class DatasetError(CreativeError, ValueError):
    pass


class PairingError(CreativeError, ValueError):
    pass


class NonFiniteLossError(CreativeError, RuntimeError):
    """Raised when a training loss turns NaN/inf. `diagnostics` holds the step context."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ', '.join(f"{k}={v}" for k, v in sorted(self.diagnostics.items()))
        return f"{base} ({details})"
