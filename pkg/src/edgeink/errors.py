"""Exception hierarchy shared by every stage of the pipeline."""


class EdgeInkError(Exception):
    pass


class ConfigError(EdgeInkError, ValueError):
    """Bad or out-of-range configuration value."""


class InputError(EdgeInkError, ValueError):
    """Input data has the wrong shape, range or pairing."""


class NumericalError(EdgeInkError, FloatingPointError):
    """A loss or activation became non-finite."""

    def __init__(self, message, batch_index=None):
        super().__init__(message if batch_index is None else f"{message} (batch {batch_index})")
        self.batch_index = batch_index


class MissingArtifactError(EdgeInkError, FileNotFoundError):
    """A stage prerequisite (checkpoint, dataset, record) is absent."""

    def __init__(self, artifact, hint=""):
        msg = f"missing required artifact '{artifact}'"
        if hint:
            msg += f": {hint}"
        super().__init__(msg)
        self.artifact = artifact
