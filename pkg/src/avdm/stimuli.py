"""Ommatidial luminance frames: moving gratings and a ventral camera over 1-D terrain."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AVDMError, CrashError

SINE = "sine"
SQUARE = "square"
WAVEFORMS = (SINE, SQUARE)


@dataclass(frozen=True)
class Frame:
    """One snapshot of receptor luminances.

    ``luminance`` has shape ``(rows, cols)``; the second axis is the motion
    axis, so detectors pair column ``j`` with column ``j + 1``.
    """

    luminance: np.ndarray
    timestamp: float = 0.0
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lum = np.asarray(self.luminance, dtype=float)
        if lum.ndim == 1:
            lum = lum[None, :]
        if lum.ndim != 2 or lum.shape[0] < 1 or lum.shape[1] < 2:
            raise AVDMError(f"frame needs shape (rows>=1, cols>=2), got {lum.shape}")
        if np.any(lum < 0.0) or np.any(lum > 1.0) or not np.all(np.isfinite(lum)):
            raise AVDMError("luminance samples must lie in [0, 1]")
        object.__setattr__(self, "luminance", lum)

    @property
    def rows(self) -> int:
        return self.luminance.shape[0]

    @property
    def cols(self) -> int:
        return self.luminance.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.luminance.shape


@dataclass(frozen=True)
class GratingSpec:
    spatial_period: float  # degrees per cycle
    angular_velocity: float  # degrees per second
    contrast: float = 1.0
    inter_receptor_angle: float = 2.0
    waveform: str = SINE

    def __post_init__(self):
        if not self.spatial_period > 0:
            raise AVDMError("spatial period must be positive")
        if not 0 < self.contrast <= 1:
            raise AVDMError("grating contrast must lie in (0, 1]")
        if not self.inter_receptor_angle > 0:
            raise AVDMError("inter-receptor angle must be positive")
        if self.waveform not in WAVEFORMS:
            raise AVDMError(f"unknown waveform {self.waveform!r}")


def _shape_wave(s: np.ndarray, waveform: str) -> np.ndarray:
    if waveform == SQUARE:
        return np.sign(s)
    return s


def grating_luminance(spec: GratingSpec, cols: int, times) -> np.ndarray:
    """Luminance of a drifting grating, shape ``(len(times), cols)``.

    Receptor ``y`` (0-based here) lags receptor 0 by ``y * phi / omega``
    seconds, i.e. the pattern drifts towards increasing column index.
    The phase is written as ``2*pi*(omega*t - phi*y)/lambda`` so a
    stationary grating (omega = 0) needs no special case.
    """
    t = np.atleast_1d(np.asarray(times, dtype=float))[:, None]
    y = np.arange(cols, dtype=float)[None, :]
    phase = 2.0 * np.pi * (spec.angular_velocity * t - spec.inter_receptor_angle * y) / spec.spatial_period
    s = _shape_wave(np.sin(phase), spec.waveform)
    inv_c = 1.0 / spec.contrast
    return np.clip((s + inv_c) / (inv_c + 1.0), 0.0, 1.0)


def generate_grating_frame(spec: GratingSpec, grid: tuple[int, int], t: float) -> Frame:
    if t < 0:
        raise AVDMError("time must be non-negative")
    rows, cols = grid
    row = grating_luminance(spec, cols, [t])[0]
    return Frame(np.repeat(row[None, :], rows, axis=0), timestamp=float(t))


def grating_frames(spec: GratingSpec, grid: tuple[int, int], dt: float, n_frames: int, t0: float = 0.0):
    """Yield ``n_frames`` grating frames sampled every ``dt`` seconds."""
    rows, cols = grid
    times = t0 + dt * np.arange(n_frames)
    lum = grating_luminance(spec, cols, times)
    for k, t in enumerate(times):
        yield Frame(np.repeat(lum[k][None, :], rows, axis=0), timestamp=float(t))


# ---------------------------------------------------------------------------
# Ground textures


@dataclass(frozen=True)
class GratingTexture:
    """Periodic ground texture, ``period`` in meters of ground_x."""

    period: float
    contrast: float = 1.0
    waveform: str = SINE

    def __post_init__(self):
        if not self.period > 0:
            raise AVDMError("texture period must be positive")
        if not 0 <= self.contrast <= 1:
            raise AVDMError("texture contrast must lie in [0, 1]")
        if self.waveform not in WAVEFORMS:
            raise AVDMError(f"unknown waveform {self.waveform!r}")

    def __call__(self, ground_x):
        s = _shape_wave(np.sin(2.0 * np.pi * np.asarray(ground_x, dtype=float) / self.period), self.waveform)
        return (1.0 + self.contrast * s) / (1.0 + self.contrast)


class PatchyTexture:
    """Seeded bright/dark patches (snow and rock).

    Patch widths are exponential around ``patch_scale``, dark patches run
    shorter than bright ones, and now and then a long bright run appears,
    which starves the detectors of contrast. Each boundary is a smoothstep
    ramp ``edge_width`` meters wide; with ``edge_width = 0`` the texture is
    strictly piecewise constant.
    """

    def __init__(self, seed: int, patch_scale: float, bright: float = 0.95, dark: float = 0.1,
                 extent: tuple[float, float] = (-50.0, 250.0), edge_width: float = 0.0):
        if not 0 <= dark <= bright <= 1:
            raise AVDMError("need 0 <= dark <= bright <= 1")
        if not patch_scale > 0:
            raise AVDMError("patch_scale must be positive")
        if edge_width < 0:
            raise AVDMError("edge_width must be >= 0")
        self.seed = int(seed)
        self.patch_scale = float(patch_scale)
        self.bright = float(bright)
        self.dark = float(dark)
        self.edge_width = float(edge_width)
        self.extent = extent
        rng = np.random.default_rng(self.seed)
        lo, hi = extent
        min_width = max(0.05 * self.patch_scale, self.edge_width)
        edges = [lo]
        values = []
        bright_next = bool(rng.integers(2))
        while edges[-1] < hi:
            if bright_next:
                width = rng.exponential(self.patch_scale)
                if rng.random() < 0.15:
                    width += rng.uniform(4.0, 10.0) * self.patch_scale
                values.append(self.bright)
            else:
                width = rng.exponential(0.6 * self.patch_scale)
                values.append(self.dark)
            edges.append(edges[-1] + max(width, min_width))
            bright_next = not bright_next
        self._edges = np.asarray(edges)
        self._values = np.asarray(values)

    def __call__(self, ground_x):
        x = np.asarray(ground_x, dtype=float)
        last = len(self._values) - 1
        idx = np.clip(np.searchsorted(self._edges, x, side="right") - 1, 0, last)
        out = self._values[idx].astype(float)
        w = self.edge_width
        if w == 0:
            return out
        # patches are at least w wide, so at most one ramp touches any point
        left = self._edges[idx]
        near_left = (idx > 0) & (x - left < 0.5 * w)
        prev = self._values[np.maximum(idx - 1, 0)]
        u = _smoothstep(0.5 + (x - left) / w)
        out = np.where(near_left, prev + (out - prev) * u, out)
        right = self._edges[np.minimum(idx + 1, len(self._edges) - 1)]
        near_right = (idx < last) & (right - x < 0.5 * w)
        nxt = self._values[np.minimum(idx + 1, last)]
        base = self._values[idx]
        u = _smoothstep(0.5 - (right - x) / w)
        return np.where(near_right, base + (nxt - base) * u, out)

    def boundaries_in(self, x0: float, x1: float) -> int:
        e = self._edges[1:-1]
        # a boundary between equal levels is invisible
        visible = self._values[1:] != self._values[:-1]
        return int(np.count_nonzero(visible & (e > x0) & (e < x1)))


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def patchy_texture(seed: int, patch_scale: float, bright: float, dark: float,
                   edge_width: float = 0.0) -> PatchyTexture:
    return PatchyTexture(seed, patch_scale, bright, dark, edge_width=edge_width)


@dataclass
class TerrainProfile:
    ground_x: np.ndarray
    height: np.ndarray
    texture: object
    name: str = "custom"

    def __post_init__(self):
        self.ground_x = np.asarray(self.ground_x, dtype=float)
        self.height = np.asarray(self.height, dtype=float)
        if self.ground_x.ndim != 1 or self.ground_x.shape != self.height.shape or len(self.ground_x) < 2:
            raise AVDMError("terrain needs matching 1-D ground_x/height arrays with >= 2 samples")
        if np.any(np.diff(self.ground_x) <= 0):
            raise AVDMError("terrain ground_x must be strictly increasing")
        if not np.all(np.isfinite(self.height)):
            raise AVDMError("terrain heights must be finite")

    def height_at(self, x):
        return np.interp(x, self.ground_x, self.height)

    @property
    def x_min(self) -> float:
        return float(self.ground_x[0])

    @property
    def x_max(self) -> float:
        return float(self.ground_x[-1])


def load_terrain_file(path, texture, name: str | None = None) -> TerrainProfile:
    """Read ``ground_x height`` pairs, one per line; ``#`` starts a comment."""
    xs, hs = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise AVDMError(f"{path}:{lineno}: expected 'ground_x height'")
        xs.append(float(parts[0]))
        hs.append(float(parts[1]))
    return TerrainProfile(np.array(xs), np.array(hs), texture, name=name or Path(path).stem)


# ---------------------------------------------------------------------------
# Ventral camera


@dataclass(frozen=True)
class VentralCamera:
    """Receptors fanned around nadir in the flight plane.

    Column 0 looks furthest forward, so ground texture sweeps towards
    increasing column index during forward flight (the detectors'
    preferred direction).
    """

    cols: int = 31
    rows: int = 4
    inter_receptor_angle: float = 2.0

    def __post_init__(self):
        if self.cols < 2 or self.rows < 1:
            raise AVDMError("camera needs rows >= 1 and cols >= 2")
        half = 0.5 * (self.cols - 1) * self.inter_receptor_angle
        if half >= 90.0:
            raise AVDMError("camera field must stay below the horizon")

    @property
    def field_extent(self) -> float:
        return (self.cols - 1) * self.inter_receptor_angle

    @property
    def view_angles(self) -> np.ndarray:
        """Angle from nadir per column in degrees, forward positive."""
        return ((self.cols - 1) / 2.0 - np.arange(self.cols)) * self.inter_receptor_angle


def ray_ground_x(terrain: TerrainProfile, x: float, z: float, angles_deg) -> tuple[np.ndarray, np.ndarray]:
    """First intersection of each downward ray with the piecewise-linear terrain.

    Returns ``(ground_x, clamped)``. Between terrain samples both the ray and
    the ground are linear, so the clearance is checked at every terrain
    sample the ray passes over and the crossing is solved exactly inside the
    bracketing segment.
    """
    gx, gh = terrain.ground_x, terrain.height
    h_here = float(np.interp(x, gx, gh))
    if z <= h_here:
        raise CrashError(f"pose (x={x:.3f}, z={z:.3f}) is at or below terrain height {h_here:.3f}")
    tans = np.tan(np.radians(np.asarray(angles_deg, dtype=float)))
    out = np.full(tans.shape, float(x))
    slanted = np.abs(tans) > 1e-12
    if not slanted.any():
        return out, np.zeros(tans.shape, dtype=bool)
    tn = tans[slanted][:, None]
    # past this horizontal offset a ray is below the lowest terrain point
    drop = z - float(gh.min())
    lo = x + drop * min(float(tn.min()), 0.0)
    hi = x + drop * max(float(tn.max()), 0.0)
    i0 = max(int(np.searchsorted(gx, lo)) - 1, 0)
    i1 = min(int(np.searchsorted(gx, hi)) + 1, len(gx))
    px = gx[i0:i1][None, :]
    ph = gh[i0:i1][None, :]
    u = (px - x) / tn  # drop of the ray below z at each sample
    ahead = u > 0
    clear = z - u - ph
    hit_u = np.where(ahead & (clear <= 0), u, np.inf).min(axis=1)
    found = np.isfinite(hit_u)
    hit_u_safe = np.where(found, hit_u, 0.0)[:, None]
    prev_u = np.where(ahead & (u < hit_u_safe), u, 0.0).max(axis=1)
    tn1 = tn[:, 0]
    prev_x = x + prev_u * tn1
    hit_x = x + hit_u_safe[:, 0] * tn1
    c_prev = z - prev_u - np.interp(prev_x, gx, gh)
    c_hit = z - hit_u_safe[:, 0] - np.interp(hit_x, gx, gh)
    denom = np.where(found, c_prev - c_hit, 1.0)
    frac = np.where(found, c_prev / denom, 1.0)
    res = prev_x + (hit_x - prev_x) * frac
    # no crossing inside the sampled domain: the ray leaves the terrain
    edge = np.where(tn1 > 0, terrain.x_max + 1.0, terrain.x_min - 1.0)
    res = np.where(found, res, edge)
    out[slanted] = res
    clamped = (out < terrain.x_min) | (out > terrain.x_max)
    np.clip(out, terrain.x_min, terrain.x_max, out=out)
    return out, clamped


def render_ventral_frame(camera: VentralCamera, terrain: TerrainProfile, pose: tuple[float, float],
                         t: float = 0.0) -> Frame:
    x, z = pose
    hits, clamped = ray_ground_x(terrain, float(x), float(z), camera.view_angles)
    row = np.clip(np.asarray(terrain.texture(hits), dtype=float), 0.0, 1.0)
    lum = np.repeat(row[None, :], camera.rows, axis=0)
    diag = {"ground_x": hits}
    if clamped.any():
        diag["clamped_rays"] = int(clamped.sum())
    return Frame(lum, timestamp=float(t), diagnostics=diag)


def apparent_period_deg(period_m: float, distance_m: float) -> float:
    """Small-angle angular period of a ground grating seen from ``distance_m``."""
    return math.degrees(period_m / distance_m)
