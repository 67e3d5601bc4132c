class CamReIDError(Exception):
    pass


class ConfigError(CamReIDError, ValueError):
    pass


class LoadError(CamReIDError):
    pass


class SamplingError(CamReIDError, ValueError):
    pass


class TrainingError(CamReIDError, RuntimeError):
    """Raised when a training loop hits a non-finite loss or a degenerate clustering."""


class StageDependencyError(CamReIDError):
    pass
