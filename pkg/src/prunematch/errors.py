"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InputShapeError(ValueError):
    """An image or grid does not satisfy a size constraint."""


class ScaleError(ValueError):
    """A feature grid was passed at the wrong scale."""


class DegenerateMaskError(ValueError):
    """A mask gating attention or matching has no live entry."""


class SelectionError(ValueError):
    """Index selection or scatter received invalid indices."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or infinity."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite values produced by operation '{op}'")


class ConfigError(ValueError):
    """Invalid configuration value."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible."""


class PGMError(ValueError):
    """A PGM image could not be parsed."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, checkpoint_path=None):
        self.step = step
        self.checkpoint_path = checkpoint_path
        where = f"; last good checkpoint at {checkpoint_path}" if checkpoint_path else ""
        super().__init__(f"loss became non-finite at step {step}{where}")
