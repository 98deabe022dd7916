"""Exception hierarchy shared by every module."""


class LayoutRetouchError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(LayoutRetouchError, ValueError):
    """Bad configuration or argument values; CLI exit code 1."""


class ConfigError(ValidationError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class FormatError(LayoutRetouchError):
    """File does not start with the expected magic / header."""


class CorruptionError(LayoutRetouchError):
    """Header and payload disagree."""


class ScheduleError(ValidationError):
    pass


class StepUnderflowError(LayoutRetouchError):
    pass


class BackendError(LayoutRetouchError):
    pass


class OverrideError(BackendError, ValueError):
    def __init__(self, layer, message):
        self.layer = layer
        super().__init__(f"layer {layer}: {message}")


class TraceError(LayoutRetouchError, KeyError):
    def __init__(self, step, layer, message="missing trace entry"):
        self.step = step
        self.layer = layer
        super().__init__(f"{message} at step {step}, layer {layer}")

    def __str__(self):
        return self.args[0]


class MaskError(LayoutRetouchError, ValueError):
    pass


class PluginError(LayoutRetouchError):
    """Failure talking to an external capability provider; CLI exit code 3."""


class PluginTimeout(PluginError):
    retryable = True


class PluginProtocolError(PluginError):
    retryable = False


class PipelineError(LayoutRetouchError):
    """Wraps a failure with the name of the stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
