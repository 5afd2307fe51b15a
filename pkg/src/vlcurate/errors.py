"""Exception hierarchy shared by all vlcurate modules."""


class VlcurateError(Exception):
    """Base class for every error raised by the toolkit."""


class ManifestError(VlcurateError):
    """Malformed manifest or sidecar content."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class MissingAnnotationError(VlcurateError):
    """A metric needs a per-sample value that neither annotations nor an oracle supplied."""

    def __init__(self, sample_id: str, field: str, detail: str = ""):
        self.sample_id = sample_id
        self.field = field
        msg = f"sample {sample_id!r} has no {field}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class MetricError(VlcurateError):
    """A metric is undefined for the given input."""


class ConfigError(VlcurateError):
    """Invalid configuration value."""
