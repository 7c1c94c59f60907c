"""Experiment driver: ``avdm {calibrate,sweep,tuning,fly}``.

Exit codes: 0 success, 2 missing inputs, 3 calibration failure, 4 preset failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import csvio
from .calibration import (DEFAULT_CONTRASTS, DEFAULT_DURATION, DEFAULT_GRID, DEFAULT_LAMBDAS, DEFAULT_OMEGAS,
                          evaluate_fit, fit_decoder, generate_calibration_set, run_grating, worker_count,
                          write_error_table, write_samples)
from .core import ModelParams, hr_reference_response
from .errors import AVDMError, CalibrationError, PresetFailure
from .flight import ControlParams, FlightConfig, run_episode, terrain_library, TERRAIN_NAMES
from .stimuli import GratingSpec, VentralCamera, grating_frames, load_terrain_file

log = logging.getLogger("avdm")

EXIT_OK, EXIT_MISSING, EXIT_CALIBRATION, EXIT_PRESET = 0, 2, 3, 4

SWEEP_LAMBDAS = (12.0, 19.0, 38.0, 54.0, 72.0)
SWEEP_OMEGAS = tuple(float(w) for w in range(50, 801, 50))
# delay of the plain HR baseline; puts its tuning peaks inside the sweep range
HR_TAU = 0.015


class MissingInput(AVDMError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    """Comma list or ``start:stop:step`` range (inclusive)."""
    text = text.strip()
    if ":" in text:
        a, b, s = (float(v) for v in text.split(":"))
        n = int(math.floor((b - a) / s + 1e-9)) + 1
        return tuple(a + i * s for i in range(n))
    return tuple(float(v) for v in text.split(",") if v.strip())


@dataclass
class ExperimentConfig:
    """Sectioned ``key = value`` settings; every key is optional."""

    model: dict = field(default_factory=dict)
    control: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    terrain: dict = field(default_factory=dict)

    SECTIONS = ("model", "control", "sim", "grid", "terrain")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise MissingInput(f"config file not found: {p}")
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        cp.read(p)
        unknown = set(cp.sections()) - set(cls.SECTIONS)
        if unknown:
            raise AVDMError(f"unknown config sections: {sorted(unknown)}")
        return cls(**{s: dict(cp[s]) if cp.has_section(s) else {} for s in cls.SECTIONS})

    def model_params(self, base: ModelParams | None = None) -> ModelParams:
        base = base or ModelParams()
        kw = {k: (int(v) if k == "m" else float(v)) for k, v in self.model.items()}
        dt = self.sim.get("dt")
        if dt is not None:
            if "dt" in kw and kw["dt"] != float(dt):
                raise AVDMError("dt differs between [model] and [sim]")
            kw["dt"] = float(dt)
        return replace(base, **kw)

    def grid_values(self, key: str, default):
        return _floats(self.grid[key]) if key in self.grid else default

    def control_params(self) -> ControlParams:
        kw = {}
        for k, v in self.control.items():
            if k == "literal_lift":
                kw[k] = v.strip().lower() in ("1", "true", "yes")
            else:
                kw[k] = float(v)
        return ControlParams(**kw)

    def flight_config(self) -> FlightConfig:
        kw = {}
        cam = {}
        for k, v in self.sim.items():
            if k == "dt":
                continue
            if k in ("camera_cols", "camera_rows"):
                cam[k.split("_")[1]] = int(v)
            else:
                kw[k] = float(v)
        if cam:
            kw["camera"] = VentralCamera(**cam)
        return FlightConfig(**kw)


def _load_params(args, cfg: ExperimentConfig) -> ModelParams:
    path = args.params or cfg.model.get("params_file")
    if path is None or not Path(path).is_file():
        raise MissingInput(f"calibrated parameter file not found: {path}")
    base = ModelParams.load(path)
    model = {k: v for k, v in cfg.model.items() if k != "params_file"}
    return ExperimentConfig(model=model, sim=cfg.sim).model_params(base)


def _map(fn, jobs):
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _sweep_point(job):
    lam, omega, contrast, params, duration = job
    run = run_grating(GratingSpec(lam, omega, contrast, params.phi), params, DEFAULT_GRID, duration)
    return lam, omega, run.omega_hat


def sweep_rows(params: ModelParams, lambdas=SWEEP_LAMBDAS, omegas=SWEEP_OMEGAS, contrast: float = 1.0,
               duration: float = DEFAULT_DURATION):
    jobs = [(float(l), float(w), contrast, params, duration) for l in lambdas for w in omegas]
    rows = []
    for lam, omega, omega_hat in sorted(_map(_sweep_point, jobs)):
        rel = abs(omega_hat - omega) / omega if math.isfinite(omega_hat) else math.nan
        rows.append((lam, omega, omega_hat, rel))
    return rows


def _hr_point(job):
    lam, omega, dt, tau, duration = job
    n = int(round(duration / dt))
    frames = grating_frames(GratingSpec(lam, omega, 1.0), DEFAULT_GRID, dt, n)
    return "HR", lam, omega, hr_reference_response(frames, tau, dt, settle=0.1)


def tuning_rows(params: ModelParams, lambdas=SWEEP_LAMBDAS, omegas=SWEEP_OMEGAS, hr_tau: float = HR_TAU,
                duration: float = DEFAULT_DURATION):
    hr = _map(_hr_point, [(float(l), float(w), params.dt, hr_tau, duration) for l in lambdas for w in omegas])
    avdm = [("AVDM", l, w, wh) for l, w, wh, _ in sweep_rows(params, lambdas, omegas, duration=duration)]
    return sorted(hr + avdm)


def cmd_calibrate(args, cfg: ExperimentConfig) -> int:
    params = cfg.model_params()
    omegas = cfg.grid_values("omega", DEFAULT_OMEGAS)
    lambdas = cfg.grid_values("lambda", DEFAULT_LAMBDAS)
    contrasts = cfg.grid_values("contrast", DEFAULT_CONTRASTS)
    report: list[str] = []
    try:
        samples = generate_calibration_set(omegas, lambdas, contrasts, params, report=report)
        result = fit_decoder(samples)
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    for msg in report:
        print(f"excluded {msg}", file=sys.stderr)
    table = evaluate_fit(result, samples)
    fitted = params.with_fit(result.a_star, result.b_star)
    out = Path(args.params or args.out or "avdm_params.txt")
    fitted.save(out, {"rms_error": result.rms_error, "rms_rel_error": table.rms_rel_err,
                      "iterations": result.iterations, "converged": result.converged})
    write_samples(out.with_suffix(".samples.csv"), samples)
    write_error_table(out.with_suffix(".errors.csv"), table)
    print(f"a_star={result.a_star:.6g} b_star={result.b_star:.6g} rms={result.rms_error:.4g} deg/s "
          f"rms_rel={table.rms_rel_err:.4f} max_rel={table.max_rel_err:.4f} "
          f"iterations={result.iterations} converged={result.converged} -> {out}")
    return EXIT_OK


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    params = _load_params(args, cfg)
    rows = sweep_rows(params, cfg.grid_values("lambda", SWEEP_LAMBDAS), cfg.grid_values("omega", SWEEP_OMEGAS),
                      float(cfg.grid.get("contrast", 1.0)))
    out = Path(args.out or "sweep.csv")
    csvio.write_csv(out, ("lambda", "omega_true", "omega_hat", "rel_err"), ("deg", "deg/s", "deg/s", "1"), rows)
    worst = max(r[3] for r in rows)
    print(f"{len(rows)} grid points, max rel_err={worst:.4f} -> {out}")
    return EXIT_OK


def cmd_tuning(args, cfg: ExperimentConfig) -> int:
    params = _load_params(args, cfg)
    rows = tuning_rows(params, cfg.grid_values("lambda", SWEEP_LAMBDAS), cfg.grid_values("omega", SWEEP_OMEGAS),
                       float(cfg.grid.get("hr_tau", HR_TAU)))
    out = Path(args.out or "tuning.csv")
    csvio.write_csv(out, ("model", "lambda", "omega", "response"), ("-", "deg", "deg/s", "HR: 1, AVDM: deg/s"),
                    rows)
    print(f"{len(rows)} rows -> {out}")
    return EXIT_OK


def build_terrain(cfg: ExperimentConfig, name: str, seed: int | None):
    t = cfg.terrain
    kw = {k: float(t[k]) for k in ("length", "texture_period", "amplitude", "wavelength") if k in t}
    if "file" in t:
        path = Path(t["file"])
        if not path.is_file():
            raise MissingInput(f"terrain file not found: {path}")
        base = terrain_library("flat", seed, texture_period=kw.get("texture_period", 1.0))
        return load_terrain_file(path, base.texture)
    return terrain_library(name, seed, **kw)


def cmd_fly(args, cfg: ExperimentConfig) -> int:
    params = _load_params(args, cfg)
    name = args.terrain or cfg.terrain.get("name", "flat")
    if name not in TERRAIN_NAMES and "file" not in cfg.terrain:
        raise MissingInput(f"unknown terrain {name!r}; choose from {', '.join(TERRAIN_NAMES)}")
    seed = args.seed if args.seed is not None else int(cfg.terrain.get("seed", 0))
    terrain = build_terrain(cfg, name, seed)
    flight = cfg.flight_config()
    if args.duration is not None:
        flight = replace(flight, duration=args.duration)
    try:
        traj = run_episode(flight, terrain, params, cfg.control_params())
    except PresetFailure as exc:
        print(f"preset failure: {exc}", file=sys.stderr)
        return EXIT_PRESET
    out = Path(args.out or "trajectory.csv")
    traj.write(out)
    if args.plot_data:
        cols = ("t", "x", "z", "terrain_h", "omega_est", "omega_gt")
        csvio.write_csv(args.plot_data, cols, ("s", "m", "m", "m", "deg/s", "deg/s"),
                        zip(*(traj.column(c).tolist() for c in cols)))
    eps = traj.column("epsilon")
    mean_eps = float(abs(eps).mean()) if len(eps) else math.nan
    crash = f"t={traj.crash[0]:.3f} x={traj.crash[1]:.3f}" if traj.crash else "none"
    print(f"terrain={terrain.name} seed={seed} omega_set={traj.omega_set:.3f} deg/s steps={len(traj)} "
          f"min_clearance={traj.min_clearance():.3f} m crash={crash} mean|eps|={mean_eps:.3f} deg/s -> {out}")
    return EXIT_OK


COMMANDS = {"calibrate": cmd_calibrate, "sweep": cmd_sweep, "tuning": cmd_tuning, "fly": cmd_fly}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="avdm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="sectioned key=value config file")
        p.add_argument("--out", help="output path")
        p.add_argument("--params", help="calibrated model parameter file")
        p.add_argument("--seed", type=int, help="terrain seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "fly":
            p.add_argument("--terrain", choices=TERRAIN_NAMES)
            p.add_argument("--duration", type=float, help="closed-loop seconds after the preset phase")
            p.add_argument("--plot-data", help="also write aligned t/x/z/h/omega series here")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except (MissingInput, AVDMError, ValueError, TypeError) as exc:
        # unreadable or inconsistent inputs
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
