class StreamError(ValueError):
    """Base class for detection-log problems that abort parsing."""


class MalformedRecord(StreamError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: malformed record: {reason}")


class DimensionMismatch(StreamError):
    def __init__(self, line_no: int, expected: int, got: int):
        self.line_no = line_no
        self.expected = expected
        self.got = got
        super().__init__(f"line {line_no}: embedding has {got} entries, expected {expected}")


class NonMonotoneFrameIndex(StreamError):
    def __init__(self, line_no: int, previous: int, index: int):
        self.line_no = line_no
        super().__init__(f"line {line_no}: frame index {index} does not follow {previous}")


class DuplicateTrackInFrame(StreamError):
    def __init__(self, frame: int, track_id: int):
        self.frame = frame
        self.track_id = track_id
        super().__init__(f"frame {frame}: track {track_id} appears more than once")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ConfigUnresolvable(ConfigError):
    pass


class EmptyInput(ValueError):
    pass


class DegenerateMean(ValueError):
    """Embeddings of a segment cancel out and have no direction."""
