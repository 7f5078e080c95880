"""Exception types shared across the package."""


class CorruptDataError(ValueError):
    """A stored file does not match the checksum recorded in its manifest."""


class InvalidConfigError(ValueError):
    """A configuration cannot be trained or evaluated as requested."""


class PoisonedLossError(FloatingPointError):
    """A loss term or gradient became NaN or infinite."""

    def __init__(self, term, checkpoint=None):
        self.term = term
        self.checkpoint = checkpoint
        msg = f"non-finite value in loss term {term!r}"
        if checkpoint is not None:
            msg += f" (last good checkpoint: {checkpoint})"
        super().__init__(msg)
