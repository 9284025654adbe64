"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model configuration or config file; the message names the offending key."""


class AssumptionError(RuntimeError):
    """A standing assumption on the model parameters does not hold."""


class BracketError(RuntimeError):
    """Root bracketing failed: no sign change found on the scan grid."""


class IntegrationError(RuntimeError):
    """Fluid integration produced an invalid state."""


class SingularityError(IntegrationError):
    """Integration drove the workload below its safety floor."""


class StepInstabilityError(IntegrationError):
    """Half-step verification disagreed with the full step beyond tolerance."""
