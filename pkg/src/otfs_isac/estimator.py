"""Pilot-based off-grid delay/Doppler estimation.

Integer taps come from strict 3x3 local maxima of the pilot response
magnitude; fractional parts come from the magnitude ratio between the peak
and its larger neighbour along each axis.

Patches are ``(l_max + 1, 2 k_max + 1)`` arrays indexed ``[dl, dk + k_max]``
with the pilot at local origin, the layout produced by
:func:`extract_pilot_region` and :func:`otfs_isac.channel.dd_response_model`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .channel import dirichlet_delay, dirichlet_doppler, physical_from_taps
from .modem import FrameConfig, PilotConfig

__all__ = [
    "EstimationWarning",
    "PathEstimate",
    "extract_pilot_region",
    "find_integer_taps",
    "estimate_fractional_doppler",
    "estimate_fractional_delay",
    "fractional_from_neighbours",
    "transposed_fractional_doppler",
    "estimate_paths",
]


class EstimationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PathEstimate:
    l: int
    k: int
    iota: float
    kappa: float
    tau_hat: float  # s
    nu_hat: float  # Hz
    peak_magnitude: float
    flags: tuple[str, ...] = ()

    @property
    def l_tau(self) -> float:
        return self.l + self.iota

    @property
    def k_nu(self) -> float:
        return self.k + self.kappa


def extract_pilot_region(rx: np.ndarray, pc: PilotConfig) -> np.ndarray:
    """Cut the guard region out of a received DD grid and divide by the pilot."""
    rx = np.asarray(rx)
    M, N = rx.shape
    if pc.k_p - pc.k_max < 0 or pc.k_p + pc.k_max >= N or pc.l_p < 0 or pc.l_p + pc.l_max >= M:
        raise ValueError("guard region does not fit inside the received grid")
    if pc.pilot_amplitude == 0:
        raise ValueError("pilot amplitude is zero")
    region = rx[pc.l_p:pc.l_p + pc.l_max + 1, pc.k_p - pc.k_max:pc.k_p + pc.k_max + 1]
    return region / pc.pilot_amplitude


def _strict_local_maxima(mag: np.ndarray) -> np.ndarray:
    padded = np.pad(mag, 1, mode="constant", constant_values=-np.inf)
    rows, cols = mag.shape
    neighbour_max = np.full(mag.shape, -np.inf)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            shifted = padded[1 + dr:1 + dr + rows, 1 + dc:1 + dc + cols]
            np.maximum(neighbour_max, shifted, out=neighbour_max)
    return mag > neighbour_max


def find_integer_taps(
    H: np.ndarray,
    n_paths: int,
    min_ratio: float | None = None,
) -> list[tuple[int, int]]:
    """Return array indices ``(row, col)`` of the ``n_paths`` strongest strict local maxima.

    A cell qualifies when its magnitude exceeds every in-bounds cell of its
    3x3 neighbourhood. Results are ordered by magnitude, largest first. With
    ``min_ratio`` set, peaks below ``min_ratio * median(|H|)`` are discarded.
    Finding fewer than ``n_paths`` peaks raises an :class:`EstimationWarning`
    and returns what was found.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    mag = np.abs(np.asarray(H))
    if mag.ndim != 2 or min(mag.shape) < 3:
        raise ValueError(f"patch must be at least 3x3, got shape {mag.shape}")
    cand = _strict_local_maxima(mag)
    if min_ratio is not None:
        cand &= mag >= min_ratio * np.median(mag)
    rows, cols = np.nonzero(cand)
    # stable sort keeps row-major order among equal magnitudes
    order = np.argsort(-mag[rows, cols], kind="stable")
    peaks = [(int(rows[i]), int(cols[i])) for i in order[:n_paths]]
    if len(peaks) < n_paths:
        warnings.warn(f"found {len(peaks)} peaks, expected {n_paths}", EstimationWarning,
                      stacklevel=2)
    return peaks


def fractional_from_neighbours(peak: float, minus: float | None, plus: float | None):
    """Fractional offset from the peak magnitude and its two axis neighbours.

    ``None`` marks an out-of-bounds neighbour. Returns ``(fraction, flag)``
    where ``flag`` is ``None`` or a short reason string.
    """
    if minus is None and plus is None:
        return 0.0, "no_neighbours"
    if minus is None:
        side, mag = 1, plus
    elif plus is None:
        side, mag = -1, minus
    else:
        # ties go to the +1 side
        side, mag = (1, plus) if plus >= minus else (-1, minus)
    denom = peak + mag
    if denom == 0:
        return 0.0, None
    frac = side * mag / denom
    return float(np.clip(frac, -0.5, 0.5)), None


def estimate_fractional_doppler(H: np.ndarray, row: int, col: int) -> float:
    """Fractional Doppler tap at the peak ``(row, col)``, searched along the column axis."""
    frac, flag = _fractional_along(np.abs(np.asarray(H)), row, col, axis=1)
    if flag:
        warnings.warn(f"Doppler refinement at ({row}, {col}): {flag}", EstimationWarning,
                      stacklevel=2)
    return frac


def estimate_fractional_delay(H: np.ndarray, row: int, col: int) -> float:
    """Fractional delay tap at the peak ``(row, col)``, searched along the row axis."""
    frac, flag = _fractional_along(np.abs(np.asarray(H)), row, col, axis=0)
    if flag:
        warnings.warn(f"delay refinement at ({row}, {col}): {flag}", EstimationWarning,
                      stacklevel=2)
    return frac


def _fractional_along(mag: np.ndarray, row: int, col: int, axis: int):
    line = mag[row, :] if axis == 1 else mag[:, col]
    i = col if axis == 1 else row
    minus = line[i - 1] if i - 1 >= 0 else None
    plus = line[i + 1] if i + 1 < line.size else None
    return fractional_from_neighbours(line[i], minus, plus)


def transposed_fractional_doppler(H: np.ndarray, row: int, col: int) -> float:
    """Variant with the peak magnitude in the numerator and sign ``(k - k')``.

    Kept only to document that it does not recover planted offsets; the
    estimator never calls it.
    """
    mag = np.abs(np.asarray(H))
    line = mag[row, :]
    plus = line[col + 1] if col + 1 < line.size else -np.inf
    minus = line[col - 1] if col >= 1 else -np.inf
    k2 = col + 1 if plus >= minus else col - 1
    return float((col - k2) * line[col] / (line[col] + line[k2]))


def _unit_response(l_tau: float, k_nu: float, shape, cfg: FrameConfig) -> np.ndarray:
    dl = np.arange(shape[0])
    dk = np.arange(shape[1]) - (shape[1] - 1) // 2
    phase = np.exp(-2j * np.pi * k_nu * l_tau / (cfg.M * cfg.N))
    return phase * np.outer(dirichlet_delay(dl - l_tau, cfg.M), dirichlet_doppler(dk - k_nu, cfg.N))


def _refine_at(mag, row, col):
    flags = []
    kappa, f1 = _fractional_along(mag, row, col, axis=1)
    iota, f2 = _fractional_along(mag, row, col, axis=0)
    if f1:
        flags.append("doppler_" + f1)
    if f2:
        flags.append("delay_" + f2)
    return iota, kappa, flags


def _side_candidates(mag, row, col, axis):
    line = mag[row, :] if axis == 1 else mag[:, col]
    i = col if axis == 1 else row
    out = []
    for side in (-1, 1):
        j = i + side
        if 0 <= j < line.size:
            denom = line[i] + line[j]
            frac = side * line[j] / denom if denom > 0 else 0.0
            out.append((float(np.clip(frac, -0.5, 0.5)), None))
    return out or [(0.0, "no_neighbours")]


def _make_estimate(row, col, iota, kappa, peak, flags, pc, cfg):
    l_int, k_int = row, col - pc.k_max
    tau, nu = physical_from_taps(l_int + iota, k_int + kappa, cfg)
    return PathEstimate(l=l_int, k=k_int, iota=iota, kappa=kappa, tau_hat=tau, nu_hat=nu,
                        peak_magnitude=float(peak), flags=tuple(flags))


def _successive(H, n_paths, min_ratio, pc, cfg, passes):
    """Strongest-first detection with the kernel of each found path subtracted."""
    floor = None if min_ratio is None else min_ratio * np.median(np.abs(H))
    found = []  # (row, col, iota, kappa, gain)

    def residual(skip=None):
        R = H.copy()
        for j, (r, c, io, ka, g) in enumerate(found):
            if j != skip:
                R -= g * _unit_response(r + io, c - pc.k_max + ka, H.shape, cfg)
        return R

    def fit(R, row, col):
        # both neighbour sides per axis; keep the pair whose kernel fits R best
        mag = np.abs(R)
        best = None
        for iota, f_l in _side_candidates(mag, row, col, axis=0):
            for kappa, f_k in _side_candidates(mag, row, col, axis=1):
                unit = _unit_response(row + iota, col - pc.k_max + kappa, H.shape, cfg)
                gain = np.vdot(unit, R) / np.vdot(unit, unit).real
                err = np.linalg.norm(R - gain * unit)
                if best is None or err < best[0]:
                    flags = [f for f in (f_l and "delay_" + f_l, f_k and "doppler_" + f_k) if f]
                    best = (err, iota, kappa, gain, flags)
        return best[1:]

    all_flags = []
    for _ in range(n_paths):
        R = residual()
        mag = np.abs(R)
        cand = _strict_local_maxima(mag)
        if floor is not None:
            cand &= mag >= floor
        if not cand.any():
            break
        row, col = np.unravel_index(np.argmax(np.where(cand, mag, -np.inf)), mag.shape)
        iota, kappa, gain, flags = fit(R, row, col)
        found.append((int(row), int(col), iota, kappa, gain))
        all_flags.append(flags)
    # re-fit each path with all the others removed
    for _ in range(passes):
        for j, (row, col, *_rest) in enumerate(found):
            iota, kappa, gain, flags = fit(residual(skip=j), row, col)
            found[j] = (row, col, iota, kappa, gain)
            all_flags[j] = flags
    return [(row, col, iota, kappa, abs(gain), flags)
            for (row, col, iota, kappa, gain), flags in zip(found, all_flags)]


def estimate_paths(
    rx: np.ndarray,
    pc: PilotConfig,
    cfg: FrameConfig,
    n_paths: int = 2,
    min_ratio: float | None = 6.0,
    cancel_passes: int | None = None,
) -> list[PathEstimate]:
    """Integer search, fractional refinement and physical conversion for each path.

    By default all paths are read off the same patch. With ``cancel_passes``
    set, paths are found strongest first and the modelled response of every
    path already found is subtracted before the next search, followed by
    ``cancel_passes`` re-fits of each path against the others; this removes
    the sidelobe leakage of a strong path into the neighbours of a weak one.
    In this mode the neighbour side on each axis is the one whose kernel
    best fits the residual patch, rather than the larger neighbour.

    Estimates are returned sorted by delay, shortest (line of sight) first.
    """
    H = extract_pilot_region(rx, pc)
    if cancel_passes is not None:
        found = _successive(H, n_paths, min_ratio, pc, cfg, cancel_passes)
        missing = ("missing_paths",) if len(found) < n_paths else ()
        out = [_make_estimate(r, c, io, ka, pk, missing + tuple(fl), pc, cfg)
               for r, c, io, ka, pk, fl in found]
    else:
        mag = np.abs(H)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", EstimationWarning)
            peaks = find_integer_taps(H, n_paths, min_ratio=min_ratio)
        missing = ("missing_paths",) if caught else ()
        out = []
        for row, col in peaks:
            iota, kappa, flags = _refine_at(mag, row, col)
            out.append(_make_estimate(row, col, iota, kappa, mag[row, col], missing + tuple(flags),
                                      pc, cfg))
    if len(out) < n_paths:
        warnings.warn(f"found {len(out)} paths, expected {n_paths}", EstimationWarning,
                      stacklevel=2)
    out.sort(key=lambda e: (e.tau_hat, e.nu_hat))
    return out
