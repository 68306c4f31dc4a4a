"""
Error types shared by the simulator, the optimizers and the command line.

Every error carries a `detail` message and the `exit_code` the CLI returns
when the error reaches it.
"""
from typing import Optional

EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_RESUME = 3


class OptimizerError(Exception):
    exit_code = EXIT_RUNTIME

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


# Input and configuration errors

class ConfigError(OptimizerError):
    exit_code = EXIT_CONFIG


class SchemaError(ConfigError):
    pass


class CompositionOutOfTolerance(ConfigError):
    pass


class InvalidInput(OptimizerError):
    exit_code = EXIT_CONFIG


class DesignOutOfBounds(InvalidInput):
    pass


class UnknownScenario(InvalidInput):
    pass


class LengthMismatch(InvalidInput):
    pass


# Physics and numerics

class TemperatureOutOfRange(OptimizerError):
    def __init__(self, component: str, temperature: float, t_min: float, t_max: float):
        super().__init__(
            f"{component}: T={temperature:.3f} K outside Antoine range [{t_min}, {t_max}] K"
        )
        self.component = component
        self.temperature = temperature


class NonPositivePressure(InvalidInput):
    def __init__(self, pressure: float):
        super().__init__(f"pressure must be positive, got {pressure} kPa")
        self.pressure = pressure


class NoConvergence(OptimizerError):
    def __init__(self, detail: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(f"{detail} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class SpecUnattainable(OptimizerError):
    pass


class InitializationFailed(OptimizerError):
    def __init__(self, column: int, reason: str):
        super().__init__(f"initialization failed in column {column}: {reason}")
        self.column = column
        self.reason = reason


class InfeasibleSolution(OptimizerError):
    pass


class AllEvaluationsFailed(OptimizerError):
    pass


class PoolTooSmall(OptimizerError):
    pass


# Run control

class ResumeMismatch(OptimizerError):
    exit_code = EXIT_RESUME


class CheckpointError(OptimizerError):
    pass
