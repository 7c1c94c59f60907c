"""Angular velocity decoding: texture estimation, ON/OFF HR-balanced detection, decoding.

The pipeline runs in three stages per frame:

1. texture: Michelson contrast of the visual field, binarization at the
   mid level and a count of light/dark boundaries along the motion axis,
   which gives an estimate of the spatial period;
2. motion: a lamina stage computes persistent luminance change, splits it
   into ON (increments) and OFF (decrements) channels and feeds each into
   partially balanced Hassenstein-Reichardt correlators;
3. decoding: the field- and time-averaged detector response ``R`` is mapped
   to an angular velocity via ``a * lam**b * (1 + C) / (2 C) * sqrt(R)``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, asdict, fields, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import AVDMError, DecodeUnavailable
from .stimuli import Frame

# Reference parameter set; ``tau`` here is a literal 80 ms delay.
REFERENCE_PARAMS = {"tau": 0.08, "alpha": 0.25, "phi": 2.0, "m": 10, "mu": 1.0, "a_star": 48.84, "b_star": 1.0}

PARAM_KEYS = ("tau", "alpha", "phi", "m", "mu", "a_star", "b_star", "dt", "window_duration")
# written by calibration after the model keys
FIT_KEYS = ("rms_error", "rms_rel_error", "iterations", "converged")


@dataclass(frozen=True)
class ModelParams:
    """Model and sampling parameters.

    ``tau`` defaults to a 4 ms correlator delay sampled at 1 kHz rather than
    the 80 ms of :data:`REFERENCE_PARAMS`: an 80 ms pure delay spans several grating
    periods at the speeds of interest, which makes the correlator output
    oscillate with temporal frequency instead of tracking angular velocity.
    Use :meth:`reference` for the literal values.
    """

    tau: float = 0.004
    alpha: float = 0.25
    phi: float = 2.0
    m: int = 10
    mu: float = 1.0
    a_star: float = 48.84
    b_star: float = 1.0
    dt: float = 0.001
    window_duration: float = 0.2

    def __post_init__(self):
        if not self.dt > 0:
            raise AVDMError("dt must be positive")
        if self.tau_steps < 1:
            raise AVDMError("tau must span at least one frame")
        if self.m < 0 or self.mu <= 0:
            raise AVDMError("need m >= 0 and mu > 0")
        if self.window_steps < 1:
            raise AVDMError("window_duration must span at least one frame")
        if not self.phi > 0:
            raise AVDMError("phi must be positive")

    @classmethod
    def reference(cls, dt: float = 0.004, **overrides) -> "ModelParams":
        return cls(**{**REFERENCE_PARAMS, "dt": dt, **overrides})

    @property
    def tau_steps(self) -> int:
        return int(round(self.tau / self.dt))

    @property
    def window_steps(self) -> int:
        return int(round(self.window_duration / self.dt))

    @property
    def warmup_frames(self) -> int:
        """Frames before the first detector output enters the response window."""
        return self.m + self.tau_steps

    def persistence_coefficients(self) -> np.ndarray:
        return persistence_coefficients(self.m, self.mu)

    def with_fit(self, a_star: float, b_star: float) -> "ModelParams":
        return replace(self, a_star=float(a_star), b_star=float(b_star))

    def to_text(self, extra: dict | None = None) -> str:
        lines = [f"{k}={_fmt(getattr(self, k))}" for k in PARAM_KEYS]
        for k, v in (extra or {}).items():
            lines.append(f"{k}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path, extra: dict | None = None) -> None:
        Path(path).write_text(self.to_text(extra))

    @classmethod
    def from_text(cls, text: str) -> "ModelParams":
        values = parse_key_values(text)
        unknown = set(values) - set(PARAM_KEYS) - set(FIT_KEYS)
        if unknown:
            raise AVDMError(f"unknown parameter keys: {sorted(unknown)}")
        missing = set(PARAM_KEYS) - set(values)
        if missing:
            raise AVDMError(f"missing parameter keys: {sorted(missing)}")
        kw = {}
        for f in fields(cls):
            kw[f.name] = int(values[f.name]) if f.name == "m" else float(values[f.name])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_text(Path(path).read_text())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise AVDMError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def persistence_coefficients(m: int, mu: float) -> np.ndarray:
    """``p_i = 1 / (1 + exp(mu * i))`` for ``i = 1..m``."""
    i = np.arange(1, m + 1, dtype=float)
    return 1.0 / (1.0 + np.exp(mu * i))


# ---------------------------------------------------------------------------
# Texture estimation


@dataclass(frozen=True)
class TextureEstimate:
    contrast: float
    spatial_period: float | None
    boundary_count: float
    zero_contrast: bool = False
    no_boundaries: bool = False

    @property
    def defined(self) -> bool:
        return self.spatial_period is not None and self.contrast > 0


def michelson_contrast(i_max: float, i_min: float) -> float:
    total = i_max + i_min
    if total <= 0:
        return 0.0
    return (i_max - i_min) / total


def boundary_count(luminance: np.ndarray) -> float:
    """Mean number of light/dark transitions per row after mid-level binarization."""
    lum = np.asarray(luminance, dtype=float)
    lo, hi = lum.min(), lum.max()
    if hi == lo:
        return 0.0
    binary = lum > 0.5 * (hi + lo)
    return float(np.count_nonzero(binary[:, 1:] != binary[:, :-1]) / lum.shape[0])


def texture_from_stats(i_max: float, i_min: float, count: float, field_extent: float) -> TextureEstimate:
    c = michelson_contrast(i_max, i_min)
    if i_max == i_min or c <= 0:
        return TextureEstimate(0.0, None, count, zero_contrast=True, no_boundaries=count == 0)
    if count < 1:
        return TextureEstimate(c, None, count, no_boundaries=True)
    return TextureEstimate(c, 2.0 * field_extent / count, count)


def estimate_texture(frame: Frame, phi: float = 2.0) -> TextureEstimate:
    lum = frame.luminance
    extent = (frame.cols - 1) * phi
    return texture_from_stats(float(lum.max()), float(lum.min()), boundary_count(lum), extent)


# ---------------------------------------------------------------------------
# Motion detection


class LaminaState:
    """Persistent luminance change ``P(t) = I(t) - I(t-1) + sum_i p_i P(t-i)``."""

    def __init__(self, m: int = 10, mu: float = 1.0):
        self.m = int(m)
        self.mu = float(mu)
        self.coefficients = persistence_coefficients(self.m, self.mu)
        self.previous: np.ndarray | None = None
        self.history: deque[np.ndarray] = deque(maxlen=max(self.m, 1))  # history[0] is P(t-1)

    def step(self, luminance: np.ndarray) -> np.ndarray:
        lum = np.asarray(luminance, dtype=float)
        if self.previous is None:
            p = np.zeros_like(lum)
        else:
            if lum.shape != self.previous.shape:
                raise AVDMError(f"frame shape changed from {self.previous.shape} to {lum.shape}")
            p = lum - self.previous
            for coef, past in zip(self.coefficients, self.history):
                p = p + coef * past
        self.previous = lum
        if self.m:
            self.history.appendleft(p)
        return p


def lamina_step(state: LaminaState, frame: Frame) -> np.ndarray:
    return state.step(frame.luminance)


def split_on_off(p):
    p = np.asarray(p, dtype=float)
    return np.maximum(p, 0.0), np.minimum(p, 0.0)


def balanced_correlation(delayed: np.ndarray, current: np.ndarray, alpha: float) -> np.ndarray:
    """``delayed[y] * current[y+1] - alpha * current[y] * delayed[y+1]`` along the last axis."""
    return delayed[..., :-1] * current[..., 1:] - alpha * current[..., :-1] * delayed[..., 1:]


class PathwayBuffers:
    """Delay lines for the ON and OFF channels.

    Keeps the last ``tau_steps + 1`` lamina fields; the split into ON/OFF is
    taken on read so the identity ``P_on + P_off = P`` holds by construction.
    """

    def __init__(self, tau_steps: int, alpha: float = 0.25):
        if tau_steps < 1:
            raise AVDMError("tau_steps must be >= 1")
        self.tau_steps = int(tau_steps)
        self.alpha = float(alpha)
        self.fields: deque[np.ndarray] = deque(maxlen=self.tau_steps + 1)

    def push(self, p: np.ndarray) -> None:
        self.fields.append(np.asarray(p, dtype=float))

    @property
    def ready(self) -> bool:
        return len(self.fields) == self.tau_steps + 1

    def delayed_and_current(self):
        return self.fields[0], self.fields[-1]


def detector_field(buffers: PathwayBuffers) -> np.ndarray | None:
    """Summed ON + OFF detector outputs, ``cols - 1`` detectors per row.

    Returns ``None`` while the delay line is still filling.
    """
    if not buffers.ready:
        return None
    delayed, current = buffers.delayed_and_current()
    on_d, off_d = split_on_off(delayed)
    on, off = split_on_off(current)
    return balanced_correlation(on_d, on, buffers.alpha) + balanced_correlation(off_d, off, buffers.alpha)


class ResponseAccumulator:
    """Sliding window of field-mean detector outputs."""

    def __init__(self, window_steps: int):
        if window_steps < 1:
            raise AVDMError("window must hold at least one entry")
        self.window_steps = int(window_steps)
        self.window: deque[float] = deque(maxlen=self.window_steps)

    @classmethod
    def for_duration(cls, window_duration: float, dt: float) -> "ResponseAccumulator":
        return cls(int(round(window_duration / dt)))

    def push(self, d) -> None:
        self.window.append(float(np.mean(d)))

    @property
    def full(self) -> bool:
        return len(self.window) == self.window_steps

    @property
    def R(self) -> float | None:
        if not self.window:
            return None
        return float(np.mean(np.fromiter(self.window, float, len(self.window))))


def accumulate_response(acc: ResponseAccumulator, d) -> ResponseAccumulator:
    acc.push(d)
    return acc


# ---------------------------------------------------------------------------
# Decoding


def decode_angular_velocity(R: float, tex: TextureEstimate, params: ModelParams) -> float:
    """Magnitude of the decoded angular velocity in degrees per second.

    Negative ``R`` (motion against the preferred direction) decodes to 0;
    the caller reports the direction from ``sign(R)``.
    """
    if R is None or not math.isfinite(R):
        raise DecodeUnavailable("response undefined")
    if tex.zero_contrast or tex.contrast <= 0:
        raise DecodeUnavailable("zero contrast")
    if tex.spatial_period is None:
        raise DecodeUnavailable("spatial period undefined")
    c = tex.contrast
    return params.a_star * tex.spatial_period ** params.b_star * (1.0 + c) / (2.0 * c) * math.sqrt(max(R, 0.0))


@dataclass(frozen=True)
class PipelineOutput:
    t: float
    omega: float  # nan while unavailable
    R: float  # nan while the window is empty
    texture: TextureEstimate | None
    direction: int = 0
    reason: str = ""

    @property
    def valid(self) -> bool:
        return math.isfinite(self.omega)


class AVDMPipeline:
    """Streaming angular velocity decoder; one instance per frame stream.

    Contrast and boundary count are pooled over the same sliding window as
    the detector response: contrast from the window's luminance extremes,
    boundary count as the window mean.
    """

    def __init__(self, params: ModelParams | None = None):
        self.params = params or ModelParams()
        self.reset()

    def reset(self) -> None:
        p = self.params
        self.lamina = LaminaState(p.m, p.mu)
        self.buffers = PathwayBuffers(p.tau_steps, p.alpha)
        self.response = ResponseAccumulator(p.window_steps)
        n = p.window_steps
        self._tex_max = deque(maxlen=n)
        self._tex_min = deque(maxlen=n)
        self._tex_count = deque(maxlen=n)
        self.frame_index = 0
        self.shape: tuple[int, int] | None = None
        self._last_t: float | None = None

    def _check(self, frame: Frame) -> None:
        if self.shape is None:
            self.shape = frame.shape
        elif frame.shape != self.shape:
            raise AVDMError(f"frame shape changed mid-stream from {self.shape} to {frame.shape}")
        if self._last_t is not None and abs(frame.timestamp - self._last_t - self.params.dt) > 1e-6:
            raise AVDMError(
                f"frames must be sampled every dt={self.params.dt}s "
                f"(got step {frame.timestamp - self._last_t:.6g}s)"
            )
        self._last_t = frame.timestamp

    def window_texture(self) -> TextureEstimate | None:
        if not self._tex_count:
            return None
        count = float(np.mean(np.fromiter(self._tex_count, float, len(self._tex_count))))
        extent = (self.shape[1] - 1) * self.params.phi
        return texture_from_stats(max(self._tex_max), min(self._tex_min), count, extent)

    def step(self, frame: Frame) -> PipelineOutput:
        self._check(frame)
        lum = frame.luminance
        p = self.lamina.step(lum)
        self.buffers.push(p)
        k = self.frame_index
        self.frame_index += 1
        if k < self.params.warmup_frames:
            return PipelineOutput(frame.timestamp, math.nan, math.nan, None, reason="warm-up")
        d = detector_field(self.buffers)
        self.response.push(d)
        self._tex_max.append(float(lum.max()))
        self._tex_min.append(float(lum.min()))
        self._tex_count.append(boundary_count(lum))
        R = self.response.R
        tex = self.window_texture()
        if not self.response.full:
            return PipelineOutput(frame.timestamp, math.nan, R, tex, reason="window filling")
        direction = int(np.sign(R))
        try:
            omega = decode_angular_velocity(R, tex, self.params)
        except DecodeUnavailable as exc:
            return PipelineOutput(frame.timestamp, math.nan, R, tex, direction, reason=str(exc))
        return PipelineOutput(frame.timestamp, omega, R, tex, direction)

    def run(self, frames: Iterable[Frame]) -> Iterator[PipelineOutput]:
        for frame in frames:
            yield self.step(frame)


def avdm_pipeline(frames: Iterable[Frame], params: ModelParams | None = None) -> Iterator[PipelineOutput]:
    return AVDMPipeline(params).run(frames)


# ---------------------------------------------------------------------------
# Classic HR baseline


def hr_reference_response(frames: Iterable[Frame], tau: float, dt: float, settle: float = 0.0) -> float:
    """Field- and time-averaged output of an unbalanced HR correlator pair.

    Works on raw receptor luminance with a pure delay of ``round(tau/dt)``
    frames: ``delayed_left * right - delayed_right * left``. Frames earlier
    than ``settle`` seconds after the delay line fills are ignored.
    """
    steps = int(round(tau / dt))
    if steps < 1:
        raise AVDMError("tau must span at least one frame")
    skip = int(round(settle / dt))
    line: deque[np.ndarray] = deque(maxlen=steps + 1)
    total, n = 0.0, 0
    for frame in frames:
        line.append(frame.luminance)
        if len(line) <= steps:
            continue
        if skip:
            skip -= 1
            continue
        total += float(np.mean(balanced_correlation(line[0], line[-1], 1.0)))
        n += 1
    if n == 0:
        raise DecodeUnavailable("no HR output after the delay line filled")
    return total / n


def as_dict(params: ModelParams) -> dict:
    return asdict(params)
