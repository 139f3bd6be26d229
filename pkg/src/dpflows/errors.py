"""Exception types shared across the simulator."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class UsageError(RuntimeError):
    """An API was called in a way its contract forbids."""


class CapacityError(UsageError):
    """A scratchpad allocation would exceed the configured capacity."""

    def __init__(self, requested_bytes: int, available_bytes: int, capacity_bytes: int):
        self.requested_bytes = requested_bytes
        self.available_bytes = available_bytes
        self.capacity_bytes = capacity_bytes
        super().__init__(
            f"scratchpad overflow: requested {requested_bytes} bytes, "
            f"{available_bytes} available of {capacity_bytes}"
        )


class OrderingFault(RuntimeError):
    """A reduction destination was read before its writers synchronized."""


class InfeasiblePlanError(ValueError):
    """No block plan fits the scratchpad, even at unit tiles."""


class ConfigError(ValueError):
    """A configuration document is malformed; message carries the key path."""


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"loss became non-finite ({value!r}) at step {step}")
