"""OTFS integrated sensing and communication toolkit.

Delay-Doppler modem, doubly dispersive channel, pilot-based path
estimation, single-receiver localization and an offline capture reader.
"""

__version__ = "0.1.0"

from .modem import FrameConfig, PilotConfig, TimeSignal, demodulate, modulate, place_pilot
from .channel import ChannelPath, add_awgn, apply_channel
from .estimator import PathEstimate, estimate_paths
from .scene import Scene, SensingMeasurement
from .locator import LocalizationResult, locate
from .capture import Capture, FrameIndex, detect_frames, read_capture

__all__ = [
    "__version__",
    "FrameConfig", "PilotConfig", "TimeSignal", "modulate", "demodulate", "place_pilot",
    "ChannelPath", "apply_channel", "add_awgn",
    "PathEstimate", "estimate_paths",
    "Scene", "SensingMeasurement",
    "LocalizationResult", "locate",
    "Capture", "FrameIndex", "read_capture", "detect_frames",
]
