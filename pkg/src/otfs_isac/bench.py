"""Monte Carlo sweeps over transmit power or path-coupling angle.

A trial draws a scene, sends one pilot frame per transmitter instant
through the two-path (direct + reflected) channel implied by the
geometry, estimates the paths from the received grid, and localises the
target with double WLS, Levenberg-Marquardt and DFP. Per sweep point the
harness reports tap MSEs, position RMSE and velocity RMSE.

Seeding
-------
Scene geometry is drawn from ``SeedSequence([master, trial])`` so every
sweep point sees the same scenes; noise and payload come from
``SeedSequence([master, point, trial])``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
import warnings
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .channel import ChannelPath, add_awgn, apply_channel
from .estimator import EstimationWarning, estimate_paths
from .locator import (IllConditionedWarning, LocalizationError, estimate_velocity, initial_guess,
                      locate, locate_dfp, locate_lm)
from .modem import FrameConfig, PilotConfig, demodulate, modulate, place_pilot
from .scene import (Scene, SceneParams, los_range_rate, measurements_from_paths,
                    nlos_range, nlos_range_rate, sample_scene, synthesize_measurements)

__all__ = [
    "CSV_VERSION",
    "OUTPUT_ENV",
    "PilotSpec",
    "EstimatorSpec",
    "ChannelSpec",
    "LocatorSpec",
    "SweepSpec",
    "ExperimentConfig",
    "SweepResult",
    "geometry_paths",
    "run_trial",
    "run_sweep",
    "sweep_csv_text",
    "write_sweep_csv",
    "read_sweep_csv",
    "build_figures",
    "emit_plots",
    "load_config",
    "config_with",
]

CSV_VERSION = "otfs-isac-sweep/1"
OUTPUT_ENV = "OTFS_ISAC_OUT"
METHODS = ("wls", "lm", "dfp")
TAP_COLUMNS = ("mse_los_delay", "mse_los_doppler", "mse_nlos_delay", "mse_nlos_doppler")
COLUMNS = (
    ("point", "value", "snr_db", "status", "trials", "valid", "missed", "failed")
    + TAP_COLUMNS
    + tuple(f"rmse_pos_{m}" for m in METHODS)
    + tuple(f"rmse_vel_{m}" for m in METHODS)
)


@dataclass(frozen=True)
class PilotSpec:
    l_max: int = 20
    k_max: int = 8
    boost_db: float = 30.0
    data_power: float = 0.0


@dataclass(frozen=True)
class EstimatorSpec:
    min_ratio: float | None = 6.0
    cancel_passes: int | None = 2


@dataclass(frozen=True)
class ChannelSpec:
    """Two-path channel derived from the geometry.

    The direct path has unit amplitude; the reflected path has amplitude
    ``reflection_gain * d / r`` (free-space spreading ratio of the two path
    lengths). Carrier phases follow the path lengths.
    """

    model: str = "block"
    reflection_gain: float = 0.7


@dataclass(frozen=True)
class LocatorSpec:
    eps: float = 1e-6
    max_iter: int = 50
    lm_damping: float = 1e-3
    lm_max_iter: int = 100
    dfp_max_iter: int = 200
    dfp_fd_step: float = 0.01
    residual: str = "algebraic"
    init: str = "grid"
    grid_step: float = 1.0


@dataclass(frozen=True)
class SweepSpec:
    """Sweep axis and Monte Carlo settings.

    ``variable`` is ``"tx_power_dbm"`` or ``"cos_theta"``. SNR in dB is
    ``tx_power_dbm - noise_floor_dbm``; with a cos-theta sweep the power is
    held at ``tx_power_dbm``.
    """

    variable: str = "tx_power_dbm"
    grid: tuple[float, ...] = (3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0, 17.0)
    trials: int = 300
    master_seed: int = 2024
    tx_power_dbm: float = 17.0
    noise_floor_dbm: float = -22.0
    source: str = "phy"
    sigmas: tuple[float, float, float] = (0.1, 0.1, 0.1)
    min_delay_sep: float = 2.0
    min_doppler_sep: float = 2.0

    def __post_init__(self):
        if self.variable not in ("tx_power_dbm", "cos_theta"):
            raise ValueError(f"unknown sweep variable {self.variable!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.grid:
            raise ValueError("sweep grid is empty")
        if list(self.grid) != sorted(self.grid):
            raise ValueError("sweep grid must be sorted")
        if self.source not in ("phy", "synthetic"):
            raise ValueError(f"unknown measurement source {self.source!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    frame: FrameConfig = FrameConfig(M=256, N=256, delta_f=93.75e3, f_c=5.6e9, cp_len=32)
    pilot: PilotSpec = PilotSpec()
    estimator: EstimatorSpec = EstimatorSpec()
    channel: ChannelSpec = ChannelSpec()
    scene: SceneParams = SceneParams()
    locator: LocatorSpec = LocatorSpec()
    sweep: SweepSpec = SweepSpec()
    out_dir: str | None = None

    _BLOCKS = {"frame": FrameConfig, "pilot": PilotSpec,
               "estimator": EstimatorSpec, "channel": ChannelSpec,
               "scene": SceneParams, "locator": LocatorSpec, "sweep": SweepSpec}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc or {})
        kwargs: dict[str, Any] = {}
        for key, typ in cls._BLOCKS.items():
            block = doc.pop(key, None) or {}
            if not isinstance(block, dict):
                raise ValueError(f"config block {key!r} must be a mapping")
            names = {f.name for f in dataclasses.fields(typ)}
            unknown = set(block) - names
            if unknown:
                raise ValueError(f"unknown keys in {key!r}: {sorted(unknown)}")
            base = dataclasses.asdict(getattr(cls, key)) if key != "frame" else \
                dataclasses.asdict(cls.frame)
            base.update(block)
            kwargs[key] = typ(**{k: (tuple(v) if isinstance(v, list) else v)
                                 for k, v in base.items()})
        if "out_dir" in doc:
            kwargs["out_dir"] = doc.pop("out_dir")
        if doc:
            raise ValueError(f"unknown config keys: {sorted(doc)}")
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path: str | PathLike) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        out = {key: dataclasses.asdict(getattr(self, key)) for key in self._BLOCKS}
        out["out_dir"] = self.out_dir
        return out

    def pilot_config(self) -> PilotConfig:
        p = self.pilot
        pc = PilotConfig.centered(self.frame, p.l_max, p.k_max, boost_db=p.boost_db,
                                  data_power=p.data_power)
        pc.check_fits(self.frame)
        return pc

    def output_dir(self) -> Path:
        return Path(self.out_dir or os.environ.get(OUTPUT_ENV) or "otfs_isac_out")


@dataclass
class SweepResult:
    variable: str
    rows: list[dict] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    @property
    def values(self) -> np.ndarray:
        return self.column("value")


# -- per-trial simulation --------------------------------------------------

def geometry_paths(scene: Scene, i: int, reflection_gain: float) -> tuple[ChannelPath, ChannelPath]:
    """Direct and reflected channel paths for transmitter instant ``i``."""
    s = scene.tx_positions[i]
    v = scene.tx_velocities[i]
    lam = scene.c / scene.f_c
    d = float(np.linalg.norm(s))
    r = nlos_range(scene.target, s)
    los = ChannelPath(np.exp(-2j * np.pi * d / lam), d / scene.c, -los_range_rate(s, v) / lam)
    nlos = ChannelPath(reflection_gain * d / r * np.exp(-2j * np.pi * r / lam), r / scene.c,
                       -nlos_range_rate(scene.target, s, v) / lam)
    return los, nlos


def _feasible(cfg: ExperimentConfig):
    frame, pilot, sweep = cfg.frame, cfg.pilot, cfg.sweep
    coupled_ok = sweep.variable == "cos_theta"

    def accept(scene: Scene) -> bool:
        for i in range(len(scene)):
            los, nlos = geometry_paths(scene, i, cfg.channel.reflection_gain)
            (l0, k0), (l1, k1) = los.taps(frame), nlos.taps(frame)
            # keep one neighbour cell inside the guard for the refinement
            if l1 > min(pilot.l_max - 1, frame.cp_len) or l0 < 1:
                return False
            if max(abs(k0), abs(k1)) > pilot.k_max - 1:
                return False
            # path coupling is the swept quantity in a cos_theta sweep, so keep it
            if coupled_ok:
                continue
            if l1 - l0 < sweep.min_delay_sep and abs(k1 - k0) < sweep.min_doppler_sep:
                return False
        return True

    return accept


def _scene_params(cfg: ExperimentConfig, value: float) -> SceneParams:
    if cfg.sweep.variable == "cos_theta":
        return dataclasses.replace(cfg.scene, cos_theta=float(value))
    return cfg.scene


def _snr_db(cfg: ExperimentConfig, value: float) -> float:
    power = value if cfg.sweep.variable == "tx_power_dbm" else cfg.sweep.tx_power_dbm
    return float(power - cfg.sweep.noise_floor_dbm)


def _phy_measurements(cfg, pc, scene, snr_db, rng):
    frame = cfg.frame
    noise_power = 10 ** (-snr_db / 10)
    meas, tap_err = [], []
    for i in range(len(scene)):
        paths = geometry_paths(scene, i, cfg.channel.reflection_gain)
        dd = place_pilot(frame, pc, payload_seed=int(rng.integers(2**63)))
        rx = apply_channel(modulate(dd, frame), paths, frame, model=cfg.channel.model)
        rx = add_awgn(rx, noise_power, seed=int(rng.integers(2**63)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EstimationWarning)
            est = estimate_paths(demodulate(rx, frame), pc, frame, n_paths=2,
                                 min_ratio=cfg.estimator.min_ratio,
                                 cancel_passes=cfg.estimator.cancel_passes)
        if len(est) < 2:
            return None, None
        los_hat, nlos_hat = est[0], est[-1]
        (l0, k0), (l1, k1) = paths[0].taps(frame), paths[1].taps(frame)
        tap_err.append((los_hat.l_tau - l0, los_hat.k_nu - k0,
                        nlos_hat.l_tau - l1, nlos_hat.k_nu - k1))
        meas.append(measurements_from_paths(est, scene.tx_positions[i], scene.f_c, scene.c))
    return meas, np.array(tap_err)


def run_trial(cfg: ExperimentConfig, scene: Scene, snr_db: float, rng: np.random.Generator,
              pc: PilotConfig | None = None) -> dict:
    """Simulate one scene at one SNR; returns squared errors per method.

    ``status`` is ``"ok"``, ``"missed"`` (a path was not detected at some
    instant) or ``"failed"`` (a locator rejected the measurements).
    """
    if cfg.sweep.source == "synthetic":
        meas = synthesize_measurements(scene, cfg.sweep.sigmas, seed=rng)
        tap_err = np.zeros((0, 4))
    else:
        pc = pc or cfg.pilot_config()
        meas, tap_err = _phy_measurements(cfg, pc, scene, snr_db, rng)
        if meas is None:
            return {"status": "missed"}
    loc = cfg.locator
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IllConditionedWarning)
            start = initial_guess(meas, loc.init, loc.grid_step)
            estimates = {
                "wls": locate(meas, eps=loc.eps, max_iter=loc.max_iter).p_hat,
                "lm": locate_lm(meas, init=start, damping=loc.lm_damping,
                                max_iter=loc.lm_max_iter, residual=loc.residual),
                "dfp": locate_dfp(meas, init=start, max_iter=loc.dfp_max_iter,
                                  residual=loc.residual, fd_step=loc.dfp_fd_step),
            }
            pos_se, vel_se = {}, {}
            for name, p_hat in estimates.items():
                if not np.all(np.isfinite(p_hat)):
                    raise LocalizationError(f"{name} diverged")
                pos_se[name] = float(np.sum((p_hat - scene.target) ** 2))
                vel_se[name] = [float(np.sum((estimate_velocity(p_hat, m)[0] - v) ** 2))
                                for m, v in zip(meas, scene.tx_velocities)]
    except (LocalizationError, np.linalg.LinAlgError):
        return {"status": "failed", "tap_err": tap_err}
    return {"status": "ok", "tap_err": tap_err, "pos_se": pos_se, "vel_se": vel_se}


def _scene_rng(master: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master, trial]))


def _noise_rng(master: int, point: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master, point, trial]))


def run_sweep(cfg: ExperimentConfig, write: bool = True, progress=None) -> SweepResult:
    """Run every sweep point and optionally write ``sweep.csv`` to the output directory.

    Points whose geometry cannot be realised inside the guard region are
    reported in ``SweepResult.skipped`` and written with status ``skipped``.
    """
    sweep = cfg.sweep
    pc = cfg.pilot_config() if sweep.source == "phy" else None
    result = SweepResult(variable=sweep.variable)
    accept = _feasible(cfg) if sweep.source == "phy" else None
    for point, value in enumerate(sweep.grid):
        params = _scene_params(cfg, value)
        snr_db = _snr_db(cfg, value)
        row: dict[str, Any] = {c: None for c in COLUMNS}
        row.update(point=point, value=float(value), snr_db=snr_db, trials=sweep.trials)
        tap_sq, pos_sq = [], {m: [] for m in METHODS}
        vel_sq = {m: [] for m in METHODS}
        counts = {"ok": 0, "missed": 0, "failed": 0}
        try:
            for trial in range(sweep.trials):
                scene = sample_scene(_scene_rng(sweep.master_seed, trial), params, accept=accept,
                                     f_c=cfg.frame.f_c)
                out = run_trial(cfg, scene, snr_db, _noise_rng(sweep.master_seed, point, trial), pc)
                counts[out["status"]] += 1
                if out["status"] != "ok":
                    continue
                tap_sq.append(out["tap_err"] ** 2)
                for m in METHODS:
                    pos_sq[m].append(out["pos_se"][m])
                    vel_sq[m].extend(out["vel_se"][m])
                if progress:
                    progress(point, trial)
        except RuntimeError as exc:
            row["status"] = "skipped"
            result.skipped.append(f"{sweep.variable}={value}: {exc}")
            result.rows.append(row)
            continue
        row.update(status="ok", valid=counts["ok"], missed=counts["missed"],
                   failed=counts["failed"])
        if counts["ok"]:
            taps = np.concatenate(tap_sq) if sweep.source == "phy" else np.zeros((0, 4))
            for j, name in enumerate(TAP_COLUMNS):
                row[name] = float(np.mean(taps[:, j])) if taps.size else 0.0
            for m in METHODS:
                row[f"rmse_pos_{m}"] = math.sqrt(math.fsum(pos_sq[m]) / len(pos_sq[m]))
                row[f"rmse_vel_{m}"] = math.sqrt(math.fsum(vel_sq[m]) / len(vel_sq[m]))
        result.rows.append(row)
    if write:
        out_dir = cfg.output_dir()
        out_dir.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(out_dir / "sweep.csv", result)
    return result


# -- CSV -------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def sweep_csv_text(result: SweepResult) -> str:
    buf = io.StringIO()
    buf.write(f"# {CSV_VERSION} variable={result.variable}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in result.rows:
        w.writerow([_fmt(row[c]) for c in COLUMNS])
    return buf.getvalue()


def write_sweep_csv(path: str | PathLike, result: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(sweep_csv_text(result))


def read_sweep_csv(path: str | PathLike) -> SweepResult:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith(f"# {CSV_VERSION}"):
            raise ValueError(f"{path}: not a {CSV_VERSION} file")
        variable = first.split("variable=", 1)[1].strip()
        rows = []
        for rec in csv.DictReader(fh):
            row: dict[str, Any] = {}
            for c in COLUMNS:
                raw = rec[c]
                if c == "status":
                    row[c] = raw
                elif raw == "":
                    row[c] = None
                elif c in ("point", "trials", "valid", "missed", "failed"):
                    row[c] = int(raw)
                else:
                    row[c] = float(raw)
            rows.append(row)
    return SweepResult(variable=variable, rows=rows)


# -- plots -----------------------------------------------------------------

_LABELS = {"wls": "double WLS", "lm": "LM", "dfp": "DFP",
           "mse_los_delay": "LoS delay", "mse_los_doppler": "LoS Doppler",
           "mse_nlos_delay": "NLoS delay", "mse_nlos_doppler": "NLoS Doppler"}
_XLABEL = {"tx_power_dbm": "transmit power (dBm)", "cos_theta": "cos theta"}


def build_figures(result: SweepResult) -> dict:
    """One matplotlib figure per metric: tap MSE (log y), position RMSE, velocity RMSE."""
    if not result.rows:
        raise ValueError("sweep result is empty")
    from matplotlib.figure import Figure

    x = result.values
    charts = {
        "tap_mse": ([(c, _LABELS[c]) for c in TAP_COLUMNS], "tap MSE", True),
        "position_rmse": ([(f"rmse_pos_{m}", _LABELS[m]) for m in METHODS], "position RMSE (m)",
                          False),
        "velocity_rmse": ([(f"rmse_vel_{m}", _LABELS[m]) for m in METHODS],
                          "velocity RMSE (m/s)", False),
    }
    figs = {}
    for name, (series, ylabel, logy) in charts.items():
        fig = Figure(figsize=(6, 4))
        ax = fig.add_subplot()
        for col, label in series:
            ax.plot(x, result.column(col), marker="o", label=label, gid=col)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(_XLABEL.get(result.variable, result.variable))
        ax.set_ylabel(ylabel)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
        fig.tight_layout()
        figs[name] = fig
    return figs


def emit_plots(result: SweepResult, out_dir: str | PathLike, fmt: str = "png") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, fig in build_figures(result).items():
        path = out_dir / f"{name}.{fmt}"
        fig.savefig(path)
        paths.append(path)
    return paths


def load_config(path: str | PathLike | None) -> ExperimentConfig:
    return ExperimentConfig() if path is None else ExperimentConfig.from_yaml(path)


def config_with(cfg: ExperimentConfig, **sweep_overrides) -> ExperimentConfig:
    return dataclasses.replace(cfg, sweep=dataclasses.replace(cfg.sweep, **sweep_overrides))


