"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TalkingLatentsError(Exception):
    exit_code = 1


class ConfigError(TalkingLatentsError, ValueError):
    exit_code = 2


class DataError(TalkingLatentsError):
    exit_code = 3


class DimensionError(DataError, ValueError):
    """Array shapes or lengths do not agree."""


class RankError(DataError, ValueError):
    def __init__(self, message, achievable_rank):
        super().__init__(message)
        self.achievable_rank = achievable_rank


class AlignmentError(DataError, ValueError):
    def __init__(self, message, audio_frames, video_frames):
        super().__init__(message)
        self.audio_frames = audio_frames
        self.video_frames = video_frames


class FingerprintError(ConfigError):
    pass


class NumericalError(TalkingLatentsError, ArithmeticError):
    exit_code = 4
