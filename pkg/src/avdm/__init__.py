"""Angular velocity decoding from ventral optic flow and constant-angular-velocity terrain following."""

from .core import AVDMPipeline, ModelParams, TextureEstimate, decode_angular_velocity, estimate_texture
from .errors import AVDMError, CalibrationError, CrashError, DecodeUnavailable, PresetFailure
from .stimuli import Frame, GratingSpec, VentralCamera, generate_grating_frame, render_ventral_frame

__version__ = "0.1.0"
