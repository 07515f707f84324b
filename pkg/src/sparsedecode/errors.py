class ShapeError(ValueError):
    """Array shape disagrees with the configured geometry."""


class AllocationError(MemoryError):
    """The page pool cannot grow to hold the requested tokens."""


class ResourceCapError(RuntimeError):
    """A workload would exceed the configured memory cap."""


class CorrectnessError(AssertionError):
    """An inline correctness check failed during a benchmark sweep."""
