"""Command-line interface: ``otfs-isac <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path

import yaml

from . import __version__
from .bench import ExperimentConfig, emit_plots, run_sweep, config_with
from .capture import detect_frames, generate_preamble, read_capture, write_capture
from .channel import add_awgn, apply_channel, load_scenario
from .estimator import EstimationWarning, estimate_paths
from .locator import LocalizationError, initial_guess, locate, locate_dfp, locate_lm
from .modem import TimeSignal, demodulate, modulate, place_pilot, read_dd_csv, write_dd_csv
from .scene import read_measurements_csv

log = logging.getLogger("otfs_isac")


def _config(args) -> ExperimentConfig:
    return ExperimentConfig() if args.config is None else ExperimentConfig.from_yaml(args.config)


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        path = Path(args.out)
    elif cfg is not None:
        path = cfg.output_dir()
    else:
        path = ExperimentConfig().output_dir()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_signal(path, fmt, cfg: ExperimentConfig) -> TimeSignal:
    cap = read_capture(path, fmt, sample_rate=cfg.frame.sample_rate)
    return TimeSignal(samples=cap.samples, sample_rate=cap.sample_rate, cp_len=cfg.frame.cp_len)


def cmd_modulate(args) -> int:
    cfg = _config(args)
    if args.input:
        dd = read_dd_csv(args.input)
    else:
        dd = place_pilot(cfg.frame, cfg.pilot_config(), payload_seed=args.seed)
    sig = modulate(dd, cfg.frame)
    out = _out_dir(args, cfg)
    write_capture(out / f"tx.{_ext(args.format)}", sig.samples, args.format)
    if not args.input:
        write_dd_csv(out / "tx_dd.csv", dd)
    print(f"wrote {sig.samples.size} samples to {out}")
    return 0


def cmd_demodulate(args) -> int:
    cfg = _config(args)
    dd = demodulate(_read_signal(args.input, args.format, cfg), cfg.frame)
    out = _out_dir(args, cfg)
    write_dd_csv(out / "rx_dd.csv", dd)
    print(f"wrote {dd.shape[0]}x{dd.shape[1]} grid to {out / 'rx_dd.csv'}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    paths = load_scenario(args.scenario)
    dd = place_pilot(cfg.frame, cfg.pilot_config(), payload_seed=args.seed)
    rx = apply_channel(modulate(dd, cfg.frame), paths, cfg.frame, model=cfg.channel.model)
    if args.snr_db is not None:
        rx = add_awgn(rx, 10 ** (-args.snr_db / 10), seed=args.seed)
    out = _out_dir(args, cfg)
    write_capture(out / f"rx.{_ext(args.format)}", rx.samples, args.format)
    print(f"wrote {len(rx)} samples through {len(paths)} path(s) to {out}")
    return 0


def cmd_estimate(args) -> int:
    cfg = _config(args)
    if args.format == "dd":
        dd = read_dd_csv(args.input)
    else:
        dd = demodulate(_read_signal(args.input, args.format, cfg), cfg.frame)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EstimationWarning)
        est = estimate_paths(dd, cfg.pilot_config(), cfg.frame, n_paths=args.paths,
                             min_ratio=cfg.estimator.min_ratio,
                             cancel_passes=cfg.estimator.cancel_passes)
    for w in caught:
        log.warning("%s", w.message)
    out = _out_dir(args, cfg)
    rows = [["path", "k", "l", "kappa", "iota", "tau_ns", "doppler_hz", "magnitude"]]
    rows += [[j, e.k, e.l, _f(e.kappa), _f(e.iota), _f(e.tau_hat * 1e9), _f(e.nu_hat),
              _f(e.peak_magnitude)] for j, e in enumerate(est)]
    _write_rows(out / "paths.csv", rows)
    _echo(rows)
    return 0


def cmd_frames(args) -> int:
    cfg = _config(args)
    cap = read_capture(args.input, args.format)
    preamble = generate_preamble(args.preamble_len, seed=args.seed)
    sep = args.min_separation
    if sep is None:
        # a whole preamble-plus-frame block, so payload peaks never count
        sep = args.preamble_len + cfg.frame.frame_len
    idx = detect_frames(cap, preamble, p_fa=args.p_fa, min_separation=sep)
    rows = [["start", "peak"]] + [[s, _f(p)] for s, p in zip(idx.start_indices,
                                                               idx.correlation_peaks)]
    out = _out_dir(args, cfg)
    _write_rows(out / "frames.csv", rows)
    _echo(rows)
    log.info("threshold %.6g, %d frame(s)", idx.threshold, len(idx))
    return 0


def cmd_locate(args) -> int:
    cfg = _config(args)
    meas = read_measurements_csv(args.input)
    loc = cfg.locator
    res = locate(meas, eps=loc.eps, max_iter=loc.max_iter)
    doc = {
        "p_hat": [float(v) for v in res.p_hat],
        "loss": float(res.loss_L),
        "sign_choice": list(res.sign_choice),
        "z_hat": [float(v) for v in res.coarse.z_hat],
        "tse_iterations": res.coarse.iterations,
        "tse_converged": bool(res.coarse.converged),
        "velocities": [[float(v) for v in row] for row in res.velocities],
        "velocity_condition": [float(c) for c in res.velocity_condition],
        "flags": list(res.flags),
    }
    if args.baselines:
        start = initial_guess(meas, loc.init, loc.grid_step)
        doc["lm"] = [float(v) for v in locate_lm(meas, init=start, damping=loc.lm_damping,
                                                 max_iter=loc.lm_max_iter,
                                                 residual=loc.residual)]
        doc["dfp"] = [float(v) for v in locate_dfp(meas, init=start, max_iter=loc.dfp_max_iter,
                                                   fd_step=loc.dfp_fd_step,
                                                   residual=loc.residual)]
    out = _out_dir(args, cfg)
    text = json.dumps(doc, indent=2)
    (out / "location.json").write_text(text + "\n")
    vel = [["instant", "vx", "vy", "condition"]]
    vel += [[i, _f(v[0]), _f(v[1]), _f(c)]
            for i, (v, c) in enumerate(zip(res.velocities, res.velocity_condition))]
    _write_rows(out / "velocity.csv", vel)
    print(text)
    if res.flags:
        log.warning("flags: %s", ", ".join(res.flags))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.trials is not None:
        overrides["trials"] = args.trials
    if overrides:
        cfg = config_with(cfg, **overrides)
    out = _out_dir(args, cfg)
    cfg = dataclasses.replace(cfg, out_dir=str(out))
    result = run_sweep(cfg)
    for msg in result.skipped:
        print(f"skipped: {msg}", file=sys.stderr)
    if not args.no_plots:
        emit_plots(result, out)
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def _f(x) -> str:
    return repr(float(x))


def _ext(fmt: str) -> str:
    return "f32" if fmt == "f32iq" else "csv"


def _write_rows(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _echo(rows) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment configuration")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--out", help="output directory (default: $OTFS_ISAC_OUT or ./otfs_isac_out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="otfs-isac", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("modulate", parents=[common], help="DD grid -> time samples")
    p.add_argument("--input", help="DD grid CSV (default: a pilot frame from the config)")
    p.add_argument("--format", choices=("f32iq", "csv"), default="f32iq")
    p.set_defaults(func=cmd_modulate)

    p = sub.add_parser("demodulate", parents=[common], help="time samples -> DD grid CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("f32iq", "csv"), default="f32iq")
    p.set_defaults(func=cmd_demodulate)

    p = sub.add_parser("simulate", parents=[common], help="pass a pilot frame through a channel")
    p.add_argument("--scenario", required=True, help="YAML list of paths")
    p.add_argument("--snr-db", type=float, default=None)
    p.add_argument("--format", choices=("f32iq", "csv"), default="f32iq")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", parents=[common], help="delay/Doppler path estimates")
    p.add_argument("--input", required=True, help="received samples, or a DD grid CSV with --format dd")
    p.add_argument("--format", choices=("f32iq", "csv", "dd"), default="f32iq")
    p.add_argument("--paths", type=int, default=2)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("frames", parents=[common], help="preamble detection in a capture")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("f32iq", "csv"), default="f32iq")
    p.add_argument("--preamble-len", type=int, default=512)
    p.add_argument("--p-fa", type=float, default=1e-5)
    p.add_argument("--min-separation", type=int, default=None,
                   help="peak suppression radius (default: preamble plus frame length)")
    p.set_defaults(func=cmd_frames, seed=0)

    p = sub.add_parser("locate", parents=[common], help="target position and Tx velocity")
    p.add_argument("--input", required=True, help="measurement CSV")
    p.add_argument("--baselines", action="store_true", help="also run LM and DFP")
    p.set_defaults(func=cmd_locate)

    p = sub.add_parser("sweep", parents=[common], help="Monte Carlo sweep to CSV and plots")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, yaml.YAMLError, LocalizationError) as exc:
        print(f"otfs-isac {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
