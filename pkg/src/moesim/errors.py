"""Exception types shared across the simulator."""


class MoesimError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(MoesimError):
    """A config document or trace file could not be parsed strictly."""


class EmptySpaceError(MoesimError):
    """Every candidate in a design space was pruned."""


class NonDivisibleError(MoesimError):
    """A batch or grid quantity does not divide evenly."""


class InfeasibleChunkingError(MoesimError):
    """Fewer layer items than pipeline chunks."""


class PlanError(MoesimError):
    """A parallel plan failed validation for the given model and cluster."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class DeadlockError(MoesimError):
    """The timeline task graph contains a dependency cycle."""


class InfeasibleMemoryError(MoesimError):
    """No memory plan fits the device, even with every option enabled."""


class EmptyWindowError(MoesimError):
    """A trace window holds no tokens."""


class ZeroMeanError(MoesimError):
    """Device load statistics are undefined when the mean load is zero."""


class SlotMismatchError(MoesimError):
    """Expert count does not match num_devices * slots_per_device."""
