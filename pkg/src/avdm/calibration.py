"""Fitting the decoder coefficients ``a`` and ``b`` by alternate iteration."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .core import AVDMPipeline, ModelParams
from .errors import CalibrationError
from .stimuli import GratingSpec, grating_frames
from . import csvio

log = logging.getLogger(__name__)

DEFAULT_OMEGAS = tuple(float(w) for w in range(50, 701, 50))
DEFAULT_LAMBDAS = (19.0, 38.0, 54.0, 72.0)
DEFAULT_CONTRASTS = (0.5, 1.0)
DEFAULT_GRID = (4, 46)
# seconds of grating per calibration point; the response is averaged after warm-up
DEFAULT_DURATION = 0.6


@dataclass(frozen=True)
class CalibrationSample:
    omega: float
    lam: float
    contrast: float
    R: float
    lambda_hat: float = math.nan
    contrast_hat: float = math.nan


@dataclass
class CalibrationResult:
    a_star: float
    b_star: float
    rms_error: float
    iterations: int
    converged: bool
    rss_history: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class GratingRun:
    """Steady-state pipeline statistics for one drifting grating."""

    R: float
    omega_hat: float
    lambda_hat: float
    contrast_hat: float
    n_valid: int


def run_grating(spec: GratingSpec, params: ModelParams, grid=DEFAULT_GRID,
                duration: float = DEFAULT_DURATION) -> GratingRun:
    """Drive a fresh pipeline with a grating and average its valid outputs."""
    n = int(round(duration / params.dt))
    pipe = AVDMPipeline(params)
    rs, ws, ls, cs = [], [], [], []
    for out in pipe.run(grating_frames(spec, grid, params.dt, n)):
        if out.texture is None or not pipe.response.full:
            continue
        rs.append(out.R)
        ws.append(out.omega)
        if out.texture.spatial_period is not None:
            ls.append(out.texture.spatial_period)
        cs.append(out.texture.contrast)
    if not rs:
        return GratingRun(math.nan, math.nan, math.nan, math.nan, 0)
    ws = np.asarray(ws)
    ok = np.isfinite(ws)
    return GratingRun(
        R=float(np.mean(rs)),
        omega_hat=float(np.mean(ws[ok])) if ok.any() else math.nan,
        lambda_hat=float(np.mean(ls)) if ls else math.nan,
        contrast_hat=float(np.mean(cs)),
        n_valid=int(ok.sum()),
    )


def _sample_point(args) -> tuple[CalibrationSample | None, str]:
    omega, lam, c, params, grid, duration = args
    run = run_grating(GratingSpec(lam, omega, c, params.phi), params, grid, duration)
    if run.n_valid == 0 or not math.isfinite(run.R):
        return None, f"omega={omega} lambda={lam} C={c}: no valid decode in steady state"
    return CalibrationSample(omega, lam, c, run.R, run.lambda_hat, run.contrast_hat), ""


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("AVDM_THREADS", "1")))
    except ValueError:
        return 1


def generate_calibration_set(omegas: Sequence[float] = DEFAULT_OMEGAS,
                             lambdas: Sequence[float] = DEFAULT_LAMBDAS,
                             contrasts: Sequence[float] = DEFAULT_CONTRASTS,
                             params: ModelParams | None = None,
                             grid=DEFAULT_GRID,
                             duration: float = DEFAULT_DURATION,
                             workers: int | None = None,
                             report: list | None = None) -> list[CalibrationSample]:
    """Run the pipeline over an (omega, lambda, contrast) grid of drifting gratings.

    Grid points without a valid steady-state decode are dropped and described
    in ``report`` when one is given.
    """
    params = params or ModelParams()
    if not omegas or not lambdas or not contrasts:
        raise CalibrationError("calibration grids must be non-empty")
    if any(w <= 0 for w in omegas):
        raise CalibrationError("calibration angular velocities must be positive")
    jobs = [(float(w), float(l), float(c), params, grid, duration)
            for l in lambdas for c in contrasts for w in omegas]
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sample_point, jobs))
    else:
        results = [_sample_point(j) for j in jobs]
    samples = []
    for sample, msg in results:
        if sample is None:
            log.warning("excluded: %s", msg)
            if report is not None:
                report.append(msg)
        else:
            samples.append(sample)
    return samples


def _features(samples: Sequence[CalibrationSample]):
    omega = np.array([s.omega for s in samples], dtype=float)
    lam = np.array([s.lam for s in samples], dtype=float)
    c = np.array([s.contrast for s in samples], dtype=float)
    R = np.array([s.R for s in samples], dtype=float)
    k = (1.0 + c) / (2.0 * c) * np.sqrt(np.maximum(R, 0.0))
    return omega, lam, k


def _rss(a, b, omega, lam, k) -> float:
    r = omega - a * lam ** b * k
    return float(r @ r)


def golden_section(f, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if hi - lo < tol:
            break
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = f(d)
    return 0.5 * (lo + hi)


def fit_decoder(samples: Sequence[CalibrationSample], b0: float = 1.0, b_bounds=(0.25, 4.0),
                tol: float = 1e-6, max_iter: int = 1000) -> CalibrationResult:
    """Alternate a closed-form least-squares step on ``a`` with a golden-section step on ``b``."""
    if len({s.lam for s in samples}) < 2:
        raise CalibrationError("need at least two distinct spatial periods to identify b")
    omega, lam, k = _features(samples)
    if not np.any(k > 0):
        raise CalibrationError("all decoder features are zero")
    lo, hi = b_bounds
    a, b = math.nan, float(b0)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        u = lam ** b * k
        a_new = float(omega @ u / (u @ u))
        rss_a = _rss(a_new, b, omega, lam, k)
        b_new = golden_section(lambda bb: _rss(a_new, bb, omega, lam, k), lo, hi)
        rss_b = _rss(a_new, b_new, omega, lam, k)
        if rss_b > rss_a:
            # golden section landed in a worse local basin; keep the old exponent
            b_new, rss_b = b, rss_a
        history.append(rss_b)
        da = abs(a_new - a) / abs(a_new) if math.isfinite(a) else math.inf
        db = abs(b_new - b)
        a, b = a_new, b_new
        if da < tol and db < tol:
            converged = True
            break
    if not converged:
        log.warning("alternate iteration did not converge in %d iterations", max_iter)
    rms = math.sqrt(_rss(a, b, omega, lam, k) / len(omega))
    return CalibrationResult(a, b, rms, it, converged, history)


def predict(result_or_params, samples: Sequence[CalibrationSample]) -> np.ndarray:
    a = getattr(result_or_params, "a_star")
    b = getattr(result_or_params, "b_star")
    _, lam, k = _features(samples)
    return a * lam ** b * k


@dataclass(frozen=True)
class ErrorRow:
    omega: float
    lam: float
    contrast: float
    omega_hat: float
    rel_err: float


@dataclass
class ErrorTable:
    rows: list
    max_rel_err: float
    rms_rel_err: float
    rms_error: float


def evaluate_fit(result, samples: Sequence[CalibrationSample]) -> ErrorTable:
    omega_hat = predict(result, samples)
    rows = []
    for s, w in zip(samples, omega_hat):
        rows.append(ErrorRow(s.omega, s.lam, s.contrast, float(w), abs(w - s.omega) / s.omega))
    rel = np.array([r.rel_err for r in rows])
    abs_err = np.array([r.omega_hat - r.omega for r in rows])
    return ErrorTable(rows, float(rel.max()), float(np.sqrt(np.mean(rel ** 2))),
                      float(np.sqrt(np.mean(abs_err ** 2))))


def synthetic_samples(a: float, b: float, omegas, lambdas, contrasts) -> list[CalibrationSample]:
    """Samples whose ``R`` is obtained by inverting the decoder exactly."""
    out = []
    for lam in lambdas:
        for c in contrasts:
            for w in omegas:
                root = w / (a * lam ** b * (1.0 + c) / (2.0 * c))
                out.append(CalibrationSample(float(w), float(lam), float(c), root * root))
    return out


def calibrate(params: ModelParams | None = None, omegas=DEFAULT_OMEGAS, lambdas=DEFAULT_LAMBDAS,
              contrasts=DEFAULT_CONTRASTS, grid=DEFAULT_GRID, duration: float = DEFAULT_DURATION,
              workers: int | None = None):
    """Generate the calibration set, fit, and return ``(params, result, samples)``."""
    params = params or ModelParams()
    samples = generate_calibration_set(omegas, lambdas, contrasts, params, grid, duration, workers)
    result = fit_decoder(samples)
    return params.with_fit(result.a_star, result.b_star), result, samples


@lru_cache(maxsize=4)
def calibrated_params(params: ModelParams | None = None) -> ModelParams:
    """Default-grid calibration of ``params`` (cached per process)."""
    fitted, _, _ = calibrate(params or ModelParams())
    return fitted


SAMPLE_HEADER = ("omega", "lambda", "contrast", "R")
SAMPLE_UNITS = ("deg/s", "deg", "1", "1")
ERROR_HEADER = ("omega", "lambda", "contrast", "omega_hat", "rel_err")
ERROR_UNITS = ("deg/s", "deg", "1", "deg/s", "1")


def write_samples(path, samples: Sequence[CalibrationSample]) -> None:
    csvio.write_csv(path, SAMPLE_HEADER, SAMPLE_UNITS, [(s.omega, s.lam, s.contrast, s.R) for s in samples])


def read_samples(path) -> list[CalibrationSample]:
    _, rows = csvio.read_csv(path)
    return [CalibrationSample(float(r["omega"]), float(r["lambda"]), float(r["contrast"]), float(r["R"]))
            for r in rows]


def write_error_table(path, table: ErrorTable) -> None:
    csvio.write_csv(path, ERROR_HEADER, ERROR_UNITS,
                    [(r.omega, r.lam, r.contrast, r.omega_hat, r.rel_err) for r in table.rows])
