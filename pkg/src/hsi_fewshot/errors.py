class HsiError(Exception):
    """Base error; the CLI turns these into a single-line diagnostic."""


class SceneFormatError(HsiError):
    pass


class SamplingError(HsiError):
    pass


class ConfigError(HsiError):
    pass


class TrainingError(HsiError):
    pass
