"""OTFS modulation and demodulation.

Delay-Doppler grids are stored as ``(M, N)`` complex arrays indexed
``[l, k]`` (delay bin, Doppler bin). Time-frequency grids are ``(N, M)``
arrays indexed ``[n, m]`` (symbol block, subcarrier). All four transforms
use unitary normalisation, so energy is preserved end to end.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from os import PathLike

import numpy as np

__all__ = [
    "FrameConfig",
    "PilotConfig",
    "TimeSignal",
    "isfft",
    "sfft",
    "heisenberg",
    "wigner",
    "modulate",
    "demodulate",
    "place_pilot",
    "guard_mask",
    "qpsk_symbols",
    "write_dd_csv",
    "read_dd_csv",
]


@dataclass(frozen=True)
class FrameConfig:
    """OTFS frame numerology.

    Parameters
    ----------
    M : int
        Number of delay bins (subcarriers).
    N : int
        Number of Doppler bins (symbol blocks).
    delta_f : float
        Subcarrier spacing in Hz.
    f_c : float
        Carrier frequency in Hz.
    cp_len : int, optional
        Frame-level cyclic prefix length in samples. Defaults to ``M // 8``.
    """

    M: int
    N: int
    delta_f: float = 93.75e3
    f_c: float = 5.6e9
    cp_len: int | None = None

    def __post_init__(self):
        if self.M < 2 or self.N < 2:
            raise ValueError(f"M and N must be >= 2, got M={self.M}, N={self.N}")
        if self.delta_f <= 0:
            raise ValueError("delta_f must be positive")
        if self.cp_len is None:
            object.__setattr__(self, "cp_len", self.M // 8)
        if not 0 <= self.cp_len <= self.M * self.N:
            raise ValueError(f"cp_len must lie in [0, M*N], got {self.cp_len}")

    @classmethod
    def full_scale(cls, cp_len: int | None = None) -> "FrameConfig":
        """Full-size numerology: 1024 x 1024 grid, 93.75 kHz spacing, 5.6 GHz."""
        return cls(M=1024, N=1024, delta_f=93.75e3, f_c=5.6e9, cp_len=cp_len)

    @classmethod
    def desk(cls, cp_len: int | None = None) -> "FrameConfig":
        """Desk-scale numerology: 256 x 256 grid with the full-size spacing."""
        return cls(M=256, N=256, delta_f=93.75e3, f_c=5.6e9, cp_len=cp_len)

    @property
    def T(self) -> float:
        return 1.0 / self.delta_f

    @property
    def bandwidth(self) -> float:
        return self.M * self.delta_f

    @property
    def sample_rate(self) -> float:
        return self.bandwidth

    @property
    def frame_duration(self) -> float:
        return self.N * self.T

    @property
    def delay_resolution(self) -> float:
        return 1.0 / self.bandwidth

    @property
    def doppler_resolution(self) -> float:
        return self.bandwidth / (self.M * self.N)

    @property
    def frame_len(self) -> int:
        """Number of time samples in one frame including the cyclic prefix."""
        return self.M * self.N + self.cp_len


@dataclass(frozen=True)
class PilotConfig:
    """Embedded pilot and guard region.

    The guard covers Doppler bins ``[k_p - k_max, k_p + k_max]`` and delay
    bins ``[l_p, l_p + l_max]``; the pilot sits at ``(l_p, k_p)``.
    """

    k_p: int
    l_p: int
    l_max: int
    k_max: int
    pilot_amplitude: float = float(np.sqrt(1e3))
    data_power: float = 1.0

    def __post_init__(self):
        if min(self.l_max, self.k_max) < 0:
            raise ValueError("guard extents must be non-negative")
        if self.pilot_amplitude < 0 or self.data_power < 0:
            raise ValueError("pilot_amplitude and data_power must be non-negative")
        if self.data_power > 0 and self.pilot_amplitude**2 < self.data_power:
            raise ValueError("pilot power must be at least the data power")

    @classmethod
    def centered(
        cls,
        cfg: FrameConfig,
        l_max: int,
        k_max: int,
        boost_db: float = 30.0,
        data_power: float = 1.0,
    ) -> "PilotConfig":
        """Pilot in the middle of the Doppler axis, guard centred on the delay axis."""
        l_p = (cfg.M - l_max) // 2
        amp = float(np.sqrt(max(data_power, 1.0) * 10 ** (boost_db / 10)))
        return cls(k_p=cfg.N // 2, l_p=l_p, l_max=l_max, k_max=k_max,
                   pilot_amplitude=amp, data_power=data_power)

    def check_fits(self, cfg: FrameConfig) -> None:
        if not (0 <= self.k_p - self.k_max and self.k_p + self.k_max < cfg.N):
            raise ValueError(
                f"Doppler guard [{self.k_p - self.k_max}, {self.k_p + self.k_max}] "
                f"outside 0..{cfg.N - 1}")
        if not (0 <= self.l_p and self.l_p + self.l_max < cfg.M):
            raise ValueError(
                f"delay guard [{self.l_p}, {self.l_p + self.l_max}] outside 0..{cfg.M - 1}")


@dataclass
class TimeSignal:
    """Sampled baseband signal; ``cp_len`` records the prefix still attached."""

    samples: np.ndarray
    sample_rate: float
    cp_len: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def body(self) -> np.ndarray:
        return self.samples[self.cp_len:]


def _check_dd(dd: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    dd = np.asarray(dd)
    if dd.shape != (cfg.M, cfg.N):
        raise ValueError(f"DD grid shape {dd.shape} does not match (M, N) = ({cfg.M}, {cfg.N})")
    return dd


def _check_tf(tf: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    tf = np.asarray(tf)
    if tf.shape != (cfg.N, cfg.M):
        raise ValueError(f"TF grid shape {tf.shape} does not match (N, M) = ({cfg.N}, {cfg.M})")
    return tf


def isfft(dd: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Inverse symplectic finite Fourier transform, DD ``(M, N)`` -> TF ``(N, M)``.

    ``X_tf[n, m] = 1/sqrt(MN) * sum_k sum_l X_dd[l, k] exp(-j2pi(ml/M - nk/N))``
    """
    dd = _check_dd(dd, cfg)
    # forward DFT over delay (l -> m), inverse DFT over Doppler (k -> n)
    return np.fft.ifft(np.fft.fft(dd, axis=0, norm="ortho"), axis=1, norm="ortho").T


def sfft(tf: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Symplectic finite Fourier transform, TF ``(N, M)`` -> DD ``(M, N)``."""
    tf = _check_tf(tf, cfg)
    return np.fft.fft(np.fft.ifft(tf.T, axis=0, norm="ortho"), axis=1, norm="ortho")


def heisenberg(tf: np.ndarray, cfg: FrameConfig) -> TimeSignal:
    """Rectangular-pulse Heisenberg transform with a frame-level cyclic prefix.

    Each symbol block ``n`` becomes an M-point unitary inverse DFT of
    ``tf[n, :]``; blocks are concatenated and the last ``cp_len`` samples are
    prepended.
    """
    tf = _check_tf(tf, cfg)
    body = np.fft.ifft(tf, axis=1, norm="ortho").reshape(-1)
    samples = np.concatenate([body[len(body) - cfg.cp_len:], body]) if cfg.cp_len else body
    return TimeSignal(samples=samples, sample_rate=cfg.sample_rate, cp_len=cfg.cp_len)


def wigner(sig: TimeSignal, cfg: FrameConfig) -> np.ndarray:
    """Matched-filter (Wigner) transform: strip the prefix, per-block M-point DFT."""
    body = np.asarray(sig.samples)[sig.cp_len:]
    if body.size != cfg.M * cfg.N:
        raise ValueError(
            f"signal body has {body.size} samples, expected M*N = {cfg.M * cfg.N}")
    return np.fft.fft(body.reshape(cfg.N, cfg.M), axis=1, norm="ortho")


def modulate(dd: np.ndarray, cfg: FrameConfig) -> TimeSignal:
    """DD grid -> time samples (ISFFT then Heisenberg)."""
    return heisenberg(isfft(dd, cfg), cfg)


def demodulate(sig: TimeSignal, cfg: FrameConfig) -> np.ndarray:
    """Time samples -> DD grid (Wigner then SFFT)."""
    return sfft(wigner(sig, cfg), cfg)


def qpsk_symbols(n: int, rng: np.random.Generator, power: float = 1.0) -> np.ndarray:
    bits = rng.integers(0, 2, size=(2, n))
    return np.sqrt(power / 2) * ((1 - 2 * bits[0]) + 1j * (1 - 2 * bits[1]))


def guard_mask(cfg: FrameConfig, pc: PilotConfig) -> np.ndarray:
    """Boolean ``(M, N)`` mask of the pilot plus guard cells."""
    pc.check_fits(cfg)
    mask = np.zeros((cfg.M, cfg.N), dtype=bool)
    mask[pc.l_p:pc.l_p + pc.l_max + 1, pc.k_p - pc.k_max:pc.k_p + pc.k_max + 1] = True
    return mask


def place_pilot(cfg: FrameConfig, pc: PilotConfig, payload_seed: int | None = 0) -> np.ndarray:
    """Build a pilot frame: pilot at ``(l_p, k_p)``, zeros over the guard, QPSK data elsewhere.

    Data symbols are drawn from ``payload_seed`` so equal seeds give equal
    grids. With ``data_power == 0`` the frame carries only the pilot.
    """
    mask = guard_mask(cfg, pc)
    dd = np.zeros((cfg.M, cfg.N), dtype=complex)
    if pc.data_power > 0:
        rng = np.random.default_rng(payload_seed)
        n_data = int((~mask).sum())
        dd[~mask] = qpsk_symbols(n_data, rng, pc.data_power)
    dd[pc.l_p, pc.k_p] = pc.pilot_amplitude
    return dd


def write_dd_csv(path: str | PathLike, dd: np.ndarray) -> None:
    """One row per delay bin; each Doppler bin contributes a ``re, im`` column pair."""
    dd = np.asarray(dd)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in dd:
            inter = np.empty(2 * row.size)
            inter[0::2] = row.real
            inter[1::2] = row.imag
            w.writerow([repr(float(v)) for v in inter])


def read_dd_csv(path: str | PathLike) -> np.ndarray:
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    if raw.shape[1] % 2:
        raise ValueError(f"{path}: odd number of columns, expected re,im pairs")
    return raw[:, 0::2] + 1j * raw[:, 1::2]
