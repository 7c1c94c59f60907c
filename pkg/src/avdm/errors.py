class AVDMError(Exception):
    """Base class for errors raised by this package."""


class DecodeUnavailable(AVDMError):
    """No angular velocity can be decoded (warm-up, zero contrast, no boundaries)."""


class CrashError(AVDMError):
    """The agent is at or below the terrain surface."""


class CalibrationError(AVDMError):
    """Calibration data cannot identify the decoder coefficients."""


class PresetFailure(AVDMError):
    """The preset phase produced no valid angular velocity estimate."""
