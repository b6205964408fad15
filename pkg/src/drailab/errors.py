"""Package exception types."""


class ConfigurationError(ValueError):
    """Invalid experiment / dataset configuration."""


class IngestionError(RuntimeError):
    """Source data could not be read or parsed."""


class CheckpointError(RuntimeError):
    """Checkpoint archive is invalid or incompatible with the configuration."""


class NonFiniteLossError(RuntimeError):
    """A loss component became non-finite; carries the component name."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component
        self.value = value
