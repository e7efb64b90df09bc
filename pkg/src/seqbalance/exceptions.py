"""Exception types raised across the package."""


class ParseError(ValueError):
    """A topology string, data code or input file failed to parse.

    ``offset`` is the 0-based byte offset (or 1-based line number for
    file formats, see ``line``) of the first offending character.
    """

    def __init__(self, message, text=None, offset=None, line=None):
        self.text = text
        self.offset = offset
        self.line = line
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" at offset {offset}"
        super().__init__(f"{message}{where}" + (f": {text!r}" if text is not None else ""))


class ConfigError(ValueError):
    """Inconsistent configuration (world size, topology, streams, heads)."""


class FitError(ValueError):
    """The latency samples cannot be fitted by the gamma-corrected model."""


class IntegrityError(RuntimeError):
    """A routing plan and the token buffers it is applied to disagree,
    or a conservation/reversibility check failed."""


class InstanceTooLarge(ValueError):
    """Raised by the exhaustive oracle when asked to enumerate too much."""
