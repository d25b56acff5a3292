"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array or trajectory layout does not match the graph."""


class BoundsError(IndexError):
    """A (node, dim, time) site lies outside the trajectory."""


class CapacityError(ValueError):
    """A request cannot be satisfied with the available slots or players."""


class DataError(ValueError):
    """Input files are missing, malformed, or inconsistent."""


class DivergenceError(ArithmeticError):
    """A simulated state became non-finite."""

    def __init__(self, node: str, time: int):
        super().__init__(f"non-finite state at node {node!r}, t={time}")
        self.node = node
        self.time = time
