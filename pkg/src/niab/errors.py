"""Exception hierarchy shared by all niab modules."""


class NiabError(Exception):
    """Base class for all errors raised by this package."""


# -- corpus / episode validation -------------------------------------------

class MalformedRecord(NiabError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class UnknownScene(NiabError):
    pass


class DuplicateEpisodeId(NiabError):
    pass


class LabelOutOfRange(NiabError):
    pass


class ActionNotInVocab(NiabError):
    pass


# -- generation -------------------------------------------------------------

class VocabTooSmall(NiabError):
    pass


class InfeasibleTemplate(NiabError):
    pass


class EmptyStratum(NiabError):
    pass


# -- embedding / retrieval --------------------------------------------------

class TokenMissing(NiabError):
    pass


class ZeroVector(NiabError):
    pass


class EmptyVocab(NiabError):
    pass


class BadTableFile(NiabError):
    """Embedding-table file failed structural validation."""


# -- ranker / trainer -------------------------------------------------------

class OddDim(NiabError):
    pass


class AllKeysMasked(NiabError):
    pass


class ShapeMismatch(NiabError):
    pass


class NonFiniteActivation(NiabError):
    pass


class NonFiniteGradient(NiabError):
    pass


class TargetMasked(NiabError):
    pass


class BadCheckpoint(NiabError):
    """Checkpoint file failed structural or shape validation."""


# -- simulator --------------------------------------------------------------

class NoExpansion(NiabError):
    pass


class PreconditionUnsatisfiable(NiabError):
    pass


class ExecutionFault(NiabError):
    def __init__(self, step_idx: int, reason: str):
        super().__init__(f"human step {step_idx}: {reason}")
        self.step_idx = step_idx
        self.reason = reason


# -- eval -------------------------------------------------------------------

class MissingPrediction(NiabError):
    pass
