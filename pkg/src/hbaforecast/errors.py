"""Exception types raised across the package."""


class FieldFormatError(ValueError):
    """A matrix or sidecar file violates the delimited-matrix format."""


class InsufficientHistoryError(ValueError):
    """Not enough forcing history to build a requested embedding."""


class DisconnectedGraphError(ValueError):
    """The nearest-neighbour graph used for Laplacian eigenmaps is disconnected."""

    def __init__(self, n_components, k_nn=None):
        self.n_components = n_components
        self.k_nn = k_nn
        msg = f"neighbour graph has {n_components} connected components"
        if k_nn is not None:
            msg += f" (k_nn={k_nn})"
        super().__init__(msg)


class DegenerateKernelError(ArithmeticError):
    """All in-neighbourhood kernel weights vanished."""


class NumericalError(ArithmeticError):
    """A numerical routine produced a non-finite value."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for the CLI."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
