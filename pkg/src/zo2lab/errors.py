"""Exception types shared across the engine, runtime, and scheduler."""


class CapacityError(RuntimeError):
    """Device pool allocation would exceed the configured capacity."""


class SchedulingContractError(RuntimeError):
    """A lane touched a resource it was not entitled to (scheduler bug, fatal)."""


class StateCorruptionError(RuntimeError):
    """RNG replay bookkeeping is misaligned; results would be silently wrong."""


class NonFiniteLossError(RuntimeError):
    """A forward pass produced a non-finite loss; the step is aborted."""


class UsageError(ValueError):
    """Bad configuration input; message names the offending key."""
