"""Closed-loop terrain following by holding the ventral angular velocity constant."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import csvio
from .core import AVDMPipeline, ModelParams
from .errors import AVDMError, CrashError, PresetFailure
from .stimuli import GratingTexture, PatchyTexture, TerrainProfile, VentralCamera, render_ventral_frame

TERRAIN_STEP = 0.05  # m between terrain samples
LEAD_IN = 15.0  # m of flat ground before x = 0, where the preset phase flies


@dataclass(frozen=True)
class BeeState:
    x: float
    z: float
    v_x: float
    v_z: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class ControlParams:
    rho: float = 0.04  # N per deg/s
    k: float = 0.1  # N s/m
    g: float = 9.81
    mass: float = 1.0
    omega_set: float | None = None
    lift_floor: float = 0.0
    # T = rho * eps with no gravity baseline; cannot hover at eps = 0
    literal_lift: bool = False

    def __post_init__(self):
        if not self.mass > 0:
            raise AVDMError("mass must be positive")
        if self.lift_floor < 0:
            raise AVDMError("lift_floor must be >= 0")


@dataclass(frozen=True)
class FlightConfig:
    v_x: float = 1.0
    z0: float = 2.0
    x0: float = -3.0
    duration: float = 20.0
    preset_duration: float = 0.5
    preset_discard: float = 0.2
    camera: VentralCamera = field(default_factory=VentralCamera)

    def __post_init__(self):
        if not self.v_x > 0:
            raise AVDMError("forward speed must be positive")
        if self.preset_discard >= self.preset_duration:
            raise AVDMError("preset_discard must be shorter than preset_duration")


def lift(omega_est: float, params: ControlParams) -> float:
    """Vertical lift for an angular velocity estimate; positive error lifts."""
    if params.omega_set is None:
        raise AVDMError("omega_set is not known yet; run the preset phase first")
    eps = omega_est - params.omega_set
    base = 0.0 if params.literal_lift else params.mass * params.g
    return max(base + params.rho * eps, params.lift_floor)


def integrate(state: BeeState, thrust: float, params: ControlParams, dt: float) -> BeeState:
    """Semi-implicit Euler step of ``m dv/dt = T - k v - m g``, ``dz/dt = v``."""
    if not dt > 0:
        raise AVDMError("dt must be positive")
    acc = (thrust - params.k * state.v_z - params.mass * params.g) / params.mass
    v_z = state.v_z + dt * acc
    return BeeState(state.x + dt * state.v_x, state.z + dt * v_z, state.v_x, v_z, state.t + dt)


def control_step(state: BeeState, omega_est: float, params: ControlParams, dt: float,
                 held_thrust: float | None = None) -> tuple[BeeState, float]:
    """Advance one step; returns the new state and the lift that was applied.

    A non-finite estimate reuses ``held_thrust`` (gravity compensation if none).
    """
    if math.isfinite(omega_est):
        thrust = lift(omega_est, params)
    elif held_thrust is not None:
        thrust = held_thrust
    else:
        thrust = params.mass * params.g
    return integrate(state, thrust, params, dt), thrust


def ground_truth_omega(v_x: float, clearance: float) -> float:
    """Ventral angular velocity at nadir, degrees per second."""
    return math.degrees(v_x / clearance)


# ---------------------------------------------------------------------------
# Terrain library

TERRAIN_NAMES = ("flat", "sine_hills", "mountain", "snow_rock", "step")


def _axis(length: float) -> np.ndarray:
    n = int(round((length + LEAD_IN) / TERRAIN_STEP))
    return -LEAD_IN + TERRAIN_STEP * np.arange(n + 1)


def _ramp(x: np.ndarray, width: float) -> np.ndarray:
    """0 before x = 0, smooth rise to 1 over ``width`` meters."""
    s = np.clip(x / width, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def fractal_ridge(x: np.ndarray, seed: int, amplitude: float = 0.8, base_wavelength: float = 30.0,
                  octaves: int = 4, roughness: float = 0.5) -> np.ndarray:
    """Sum of sine octaves with seeded phases; non-negative, zero mean removed."""
    rng = np.random.default_rng(seed)
    h = np.zeros_like(x)
    amp, wl = 1.0, base_wavelength
    norm = 0.0
    for _ in range(octaves):
        phase = rng.uniform(0, 2 * np.pi)
        h += amp * np.sin(2 * np.pi * x / wl + phase)
        norm += amp
        amp *= roughness
        wl *= 0.5
    h = amplitude * h / norm
    return h - h.min()


def terrain_library(name: str, seed: int | None = None, length: float = 60.0, texture_period: float = 1.0,
                    amplitude: float | None = None, wavelength: float = 40.0) -> TerrainProfile:
    """Named terrain profiles; all start with flat ground for ``x < 0``.

    ``flat``
        h = 0 everywhere, sine grating texture.
    ``sine_hills``
        h = A sin(2 pi x / L) for x >= 0.
    ``mountain``
        seeded fractal ridge, blended in over the first 5 m.
    ``snow_rock``
        the mountain shape under a seeded bright/dark patch texture.
    ``step``
        a 0.5 m rise at x = 10 m, smoothed over 1 m.
    """
    x = _axis(length)
    grating = GratingTexture(texture_period, 1.0)
    seed = 0 if seed is None else int(seed)
    if name == "flat":
        h = np.zeros_like(x)
        tex = grating
    elif name == "sine_hills":
        a = 0.5 if amplitude is None else amplitude
        h = np.where(x >= 0, a * np.sin(2 * np.pi * x / wavelength), 0.0)
        tex = grating
    elif name in ("mountain", "snow_rock"):
        a = 0.8 if amplitude is None else amplitude
        ridge = fractal_ridge(x, seed, amplitude=a)
        h = _ramp(x, 5.0) * (ridge - ridge[np.searchsorted(x, 0.0)])
        tex = grating if name == "mountain" else PatchyTexture(seed, patch_scale=0.25, bright=0.9, dark=0.15,
                                                               extent=(x[0] - 20.0, x[-1] + 20.0),
                                                               edge_width=0.2)
    elif name == "step":
        a = 0.5 if amplitude is None else amplitude
        h = a * _ramp(x - 10.0, 1.0)
        tex = grating
    else:
        raise AVDMError(f"unknown terrain {name!r}; choose from {TERRAIN_NAMES}")
    return TerrainProfile(x, h, tex, name=name)


# ---------------------------------------------------------------------------
# Episodes


@dataclass(frozen=True)
class LogRecord:
    t: float
    x: float
    z: float
    terrain_h: float
    v_z: float
    omega_est: float
    omega_gt: float
    thrust: float
    epsilon: float


@dataclass
class TrajectoryLog:
    records: list = field(default_factory=list)
    crash: tuple[float, float] | None = None
    omega_set: float = math.nan
    unavailable_steps: int = 0

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def crashed(self) -> bool:
        return self.crash is not None

    def min_clearance(self) -> float:
        if not self.records:
            return math.nan
        return float(np.min(self.column("z") - self.column("terrain_h")))

    HEADER = ("t", "x", "z", "terrain_h", "v_z", "omega_est", "omega_gt", "thrust", "epsilon")
    UNITS = ("s", "m", "m", "m", "m/s", "deg/s", "deg/s", "N", "deg/s")

    def to_csv(self) -> str:
        rows = [tuple(getattr(r, k) for k in self.HEADER) for r in self.records]
        trailer = [f"crash t={self.crash[0]!r} x={self.crash[1]!r}"] if self.crash else []
        return csvio.format_csv(self.HEADER, self.UNITS, rows, trailer)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def _frame(camera, terrain, state: BeeState):
    return render_ventral_frame(camera, terrain, (state.x, state.z), t=state.t)


@dataclass
class PresetResult:
    omega_set: float
    state: BeeState
    pipeline: AVDMPipeline
    estimates: list


def preset_phase(config: FlightConfig, terrain: TerrainProfile, params: ModelParams,
                 control: ControlParams | None = None, pipeline: AVDMPipeline | None = None) -> PresetResult:
    """Fly level with lift equal to weight and measure the target angular velocity.

    The mean of the valid estimates after ``preset_discard`` seconds becomes
    ``omega_set``. The pipeline keeps running afterwards so the episode
    starts with full buffers.
    """
    control = control or ControlParams()
    pipeline = pipeline or AVDMPipeline(params)
    _check_clock(pipeline, params)
    state = BeeState(config.x0, config.z0, config.v_x, 0.0, 0.0)
    hover = control.mass * control.g
    n = int(round(config.preset_duration / params.dt))
    skip = int(round(config.preset_discard / params.dt))
    estimates = []
    for i in range(n):
        out = pipeline.step(_frame(config.camera, terrain, state))
        if i >= skip and out.valid:
            estimates.append(out.omega)
        state = integrate(state, hover, control, params.dt)
    if not estimates:
        raise PresetFailure("no valid angular velocity estimate during the preset phase")
    return PresetResult(float(np.mean(estimates)), state, pipeline, estimates)


def _check_clock(pipeline: AVDMPipeline, params: ModelParams) -> None:
    if pipeline.params.dt != params.dt:
        raise AVDMError(f"pipeline dt {pipeline.params.dt} differs from simulation dt {params.dt}")


def run_episode(config: FlightConfig, terrain: TerrainProfile, params: ModelParams,
                control: ControlParams | None = None, preset: PresetResult | None = None) -> TrajectoryLog:
    """Preset phase (unless given) followed by ``config.duration`` seconds of closed-loop flight."""
    control = control or ControlParams()
    log = TrajectoryLog()
    if config.duration <= 0:
        return log
    if preset is None:
        preset = preset_phase(config, terrain, params, control)
    _check_clock(preset.pipeline, params)
    control = replace(control, omega_set=preset.omega_set)
    log.omega_set = preset.omega_set
    pipeline = preset.pipeline
    state = preset.state
    dt = params.dt
    t_end = state.t + config.duration
    omega_est = preset.estimates[-1]
    thrust = control.mass * control.g
    n = int(round(config.duration / dt))
    for _ in range(n):
        h = float(terrain.height_at(state.x))
        try:
            out = pipeline.step(_frame(config.camera, terrain, state))
        except CrashError:
            log.crash = (state.t, state.x)
            break
        if out.valid:
            omega_est = out.omega
        else:
            log.unavailable_steps += 1
        thrust = lift(omega_est, control)
        clearance = state.z - h
        log.records.append(LogRecord(state.t, state.x, state.z, h, state.v_z, omega_est,
                                     ground_truth_omega(state.v_x, clearance), thrust,
                                     omega_est - control.omega_set))
        state = integrate(state, thrust, control, dt)
        h = float(terrain.height_at(state.x))
        if state.z <= h:
            # the touchdown state is logged so the crash is visible in the records
            log.records.append(LogRecord(state.t, state.x, state.z, h, state.v_z, omega_est, math.nan, thrust,
                                         omega_est - control.omega_set))
            log.crash = (state.t, state.x)
            break
        if state.t > t_end + 0.5 * dt:
            break
    return log
