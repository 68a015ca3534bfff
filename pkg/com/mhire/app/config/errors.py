from typing import Optional


class LatentBackdoorError(Exception):
    """Base error. `kind` is the stable error name, `detail` the human message."""

    exit_code = 1

    def __init__(self, kind: str, detail: str = "", stage: Optional[str] = None):
        self.kind = kind
        self.detail = detail
        self.stage = stage
        super().__init__(f"{kind}: {detail}" if detail else kind)

    def with_stage(self, stage: str) -> "LatentBackdoorError":
        self.stage = stage
        return self


class ConfigError(LatentBackdoorError):
    exit_code = 2


class DataError(LatentBackdoorError):
    exit_code = 3


class ConvergenceError(LatentBackdoorError):
    exit_code = 4


class ArtifactIOError(LatentBackdoorError):
    exit_code = 5


class InputError(LatentBackdoorError):
    """Invalid arguments to a numeric or attack operation."""

    exit_code = 6


class TensorError(InputError):
    pass
