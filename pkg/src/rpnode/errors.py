class RPNodeError(Exception):
    pass


class ConfigurationError(RPNodeError, ValueError):
    pass


class IntegrationDiverged(RPNodeError, FloatingPointError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite ODE state at solver step {step}")


class MissingClassError(RPNodeError, ValueError):
    pass


class DatasetError(RPNodeError, ValueError):
    pass


class InsufficientSlicesError(RPNodeError, ValueError):
    pass


class NonFiniteLoss(RPNodeError, FloatingPointError):
    pass
