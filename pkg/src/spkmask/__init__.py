"""Multi-talker overlapped speech recognition and diarization with a speaker-mask transformer."""

__version__ = "0.1.0"
