"""Exceptions raised by semalignvc."""

__all__ = ['ManifestError', 'AlignmentError', 'ProviderError', 'TrainingDivergedError',
           'StageError', 'CheckpointError', 'VocoderError']


class ManifestError(ValueError):
    """Malformed manifest line or duplicated utterance id."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = "line {}: {}".format(lineno, message)
        super(ManifestError, self).__init__(message)
        self.lineno = lineno


class AlignmentError(ValueError):
    """No valid monotonic alignment, or sequence lengths that do not agree."""


class ProviderError(RuntimeError):
    """A text, speaker-embedding or representation provider failed or is unavailable."""

    def __init__(self, provider, message):
        super(ProviderError, self).__init__("provider '{}': {}".format(provider, message))
        self.provider = provider


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, message, batch_ids=None, losses=None):
        details = []
        if batch_ids is not None:
            details.append("batch ids: {}".format(', '.join(str(b) for b in batch_ids)))
        if losses is not None:
            details.append("losses: {}".format(
                ', '.join('{}={}'.format(k, float(v)) for k, v in sorted(losses.items()))))
        if details:
            message = "{} ({})".format(message, '; '.join(details))
        super(TrainingDivergedError, self).__init__(message)
        self.batch_ids = batch_ids
        self.losses = losses


class StageError(RuntimeError):
    """A pipeline or inference stage failed."""

    def __init__(self, stage, message):
        super(StageError, self).__init__("stage '{}': {}".format(stage, message))
        self.stage = stage


class CheckpointError(RuntimeError):
    """A checkpoint is missing or does not match the configuration."""


class VocoderError(RuntimeError):
    """The external vocoder command failed."""
