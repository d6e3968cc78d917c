"""Exception hierarchy shared by every module of the workbench."""


class DistilRankError(Exception):
    """Base class; ``kind`` is the short tag used in CLI error lines."""

    kind = "error"


class ShapeError(DistilRankError, ValueError):
    kind = "shape"

    def __init__(self, op, expected, got):
        self.op = op
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: expected {expected}, got {got}")


class DomainError(DistilRankError, ValueError):
    kind = "domain"


class UsageError(DistilRankError, RuntimeError):
    kind = "usage"


class ParameterError(DistilRankError, ValueError):
    kind = "parameter"


class ConfigurationError(DistilRankError, ValueError):
    kind = "configuration"


class VocabularyError(DistilRankError, ValueError):
    kind = "vocabulary"


class TruncationError(DistilRankError, ValueError):
    kind = "truncation"


class FormatError(DistilRankError, ValueError):
    kind = "format"


class PipelineOrderError(DistilRankError, ValueError):
    kind = "pipeline-order"


class PairingError(DistilRankError, ValueError):
    kind = "pairing"


class SampleError(DistilRankError, ValueError):
    kind = "sample"


class DocumentLookupError(DistilRankError, KeyError):
    kind = "lookup"

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown document"


class MissingArtifactError(DistilRankError, FileNotFoundError):
    kind = "missing-artifact"

    def __init__(self, path, producer=None):
        self.path = str(path)
        self.producer = producer
        msg = f"missing artifact {self.path}"
        if producer:
            msg += f" (produced by `{producer}`)"
        super().__init__(msg)


class StageError(DistilRankError, RuntimeError):
    """Wraps a failure inside one stage of a distillation pipeline."""

    kind = "stage"

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")
