from typing import Any, Dict, Tuple


class AllTokError(Exception):
    """Base class of every error raised by alltok."""


class DimensionError(AllTokError, ValueError):
    pass


class ContractError(AllTokError):
    """Raised when a caller breaks an operation precondition."""


class MissingGradientError(ContractError):
    pass


class TokenIndexError(AllTokError, IndexError):
    pass


class EmptyCodebookError(AllTokError):
    pass


class EmptyValidMaskError(AllTokError, ValueError):
    pass


class DecodeError(AllTokError, ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class SequenceFormatError(AllTokError, ValueError):
    pass


class TrainingDivergedError(AllTokError):
    pass


class MissingTokenizerError(AllTokError):
    pass


class VocabularyMismatchError(AllTokError):
    def __init__(self, diff: Dict[str, Tuple[Any, Any]]) -> None:
        details = ", ".join(f"{key}: {left} != {right}" for key, (left, right) in diff.items())
        super().__init__(f"Vocabulary mismatch: {details}")
        self.diff = diff


class CheckpointFormatError(AllTokError):
    pass
