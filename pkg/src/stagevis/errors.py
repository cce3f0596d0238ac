"""Exception hierarchy."""


class StagevisError(Exception):
    """Base class for all errors raised by this package."""


class InputDecodeError(StagevisError, ValueError):
    """Raw input bytes are not valid UTF-8."""


class ConfigError(StagevisError, ValueError):
    """Invalid configuration value or combination."""


class IngestError(StagevisError, ValueError):
    """Corpus records could not be ingested (duplicate ids, bad schema)."""


class DocumentNotFound(StagevisError, KeyError):
    """A doc_id is not present in the snapshot."""


class UnknownStrategy(StagevisError, KeyError):
    """No strategy registered under the requested name."""


class StageError(StagevisError, RuntimeError):
    """A pipeline stage failed; `stage` names which one."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message
