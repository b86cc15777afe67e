"""Typed errors shared across the package."""


class DicadError(Exception):
    """Base class for errors this package raises deliberately."""


class DataError(DicadError):
    """Dataset layout, image file, or mask problems."""


class CheckpointError(DicadError):
    """Corrupt, truncated, or mismatched checkpoint containers."""


class ConfigError(DicadError):
    """Invalid or inconsistent run configuration."""


class ArtifactMissingError(DicadError):
    """A pipeline stage needs an artifact that has not been produced yet."""

    def __init__(self, path: str, hint: str = "") -> None:
        msg = f"missing artifact: {path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)
        self.path = path
