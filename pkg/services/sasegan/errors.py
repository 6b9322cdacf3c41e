"""Exceptions raised across the enhancer."""

from typing import Any, List, Optional


class SaseganError(Exception):
    """Base for every error raised by this package."""


# Audio
class UnsupportedFormat(SaseganError, ValueError):
    pass


class MalformedHeader(SaseganError, ValueError):
    pass


class IoFailure(SaseganError, RuntimeError):
    pass


class InvalidPadLen(SaseganError, ValueError):
    pass


class UnpairedFiles(SaseganError, ValueError):
    """A clean/noisy stem has no partner."""

    def __init__(self, stem: str, missing_in: str):
        super().__init__(f"no {missing_in}/{stem}.wav for stem '{stem}'")
        self.stem = stem
        self.missing_in = missing_in


# Neural network core
class ShapeMismatch(SaseganError, ValueError):
    pass


class DegenerateKernel(SaseganError, ValueError):
    pass


class UninitializedState(SaseganError, RuntimeError):
    pass


# Attention
class IndivisibleChannels(SaseganError, ValueError):
    pass


class OutOfRangeLayer(SaseganError, ValueError):
    pass


# Model
class InvalidConfig(SaseganError, ValueError):
    pass


# Training
class EmptyDataset(SaseganError, ValueError):
    pass


class DivergedLoss(SaseganError, RuntimeError):
    """A loss went NaN/Inf; carries the offending step record and the log so far."""

    def __init__(self, record: Any, log: Optional[List[Any]] = None):
        super().__init__(f"non-finite loss at step {record.step}: {record.model_dump()}")
        self.record = record
        self.log = log or []


# Checkpoints
class CheckpointError(SaseganError, ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ConfigMismatch(VersionMismatch):
    pass


class CorruptFile(CheckpointError):
    pass


# Metrics
class LengthMismatch(SaseganError, ValueError):
    pass


class AllSilent(SaseganError, ValueError):
    pass


class TooShort(SaseganError, ValueError):
    pass


class CorpusEvaluationError(SaseganError, RuntimeError):
    """Per-utterance failure during corpus evaluation."""

    def __init__(self, utt_id: str, cause: Exception):
        super().__init__(f"{utt_id}: {cause}")
        self.utt_id = utt_id
        self.cause = cause
