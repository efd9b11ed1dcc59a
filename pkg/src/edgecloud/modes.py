"""Edge operating modes, device throughput profiles and reconfiguration messages."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import UnknownMode

MB = 1_000_000  # bytes

# (width, height, fps) per level
RESOLUTIONS = {0: (320, 240, 5), 1: (640, 480, 15), 2: (1280, 960, 30)}

# livestream bandwidth per level, MB/s
RATE_PRESETS = {
    "table2": {0: 0.41, 1: 1.90, 2: 8.40},
    "fig6": {0: 6.9, 1: 27.6, 2: 110.6},
}
RATE_ALIASES = {"table2": "table2", "fig6": "fig6", "fig6_rates": "fig6"}

# measured edge processing throughput, frames per second
DEVICE_FPS = {
    "TX2": {0: 69.3, 1: 44.2, 2: 31.7},
    "Xavier": {0: 98.3, 1: 70.5, 2: 50.4},
}


@dataclass(frozen=True)
class OperatingMode:
    level: int
    width: int
    height: int
    fps: int
    bandwidth_mbps: float

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.width, self.height)

    @property
    def frame_period_ms(self) -> float:
        return 1000.0 / self.fps

    @property
    def chunk_bytes(self) -> int:
        """Size of one frame's worth of livestream video."""
        return round(self.bandwidth_mbps * MB / self.fps)

    @property
    def effective_rate_bps(self) -> int:
        """Bytes per second actually emitted (chunk size times frame rate)."""
        return self.chunk_bytes * self.fps


def canonical_rates(preset: str) -> str:
    try:
        return RATE_ALIASES[preset]
    except KeyError:
        raise ValueError(f"unknown rates preset {preset!r}; expected one of "
                         f"{sorted(RATE_ALIASES)}") from None


def mode_for(level: int, rates: str = "table2") -> OperatingMode:
    if level not in RESOLUTIONS:
        raise UnknownMode(f"unknown operating mode level {level!r}")
    w, h, fps = RESOLUTIONS[level]
    return OperatingMode(level, w, h, fps, RATE_PRESETS[canonical_rates(rates)][level])


def processing_latency_ms(device: str, level: int) -> float:
    return 1000.0 / DEVICE_FPS[device][level]


class Cause(str, Enum):
    NOTHING_RELEVANT = "nothing_relevant"
    DETECTION = "detection"
    POSSIBLE_INTRUSION = "possible_intrusion"
    PREDICTED_ENTRY = "predicted_entry"
    CONFIRMED_INTRUSION = "confirmed_intrusion"
    BROKEN_PERIMETER = "broken_perimeter"

    def __str__(self):
        return self.value


CAUSE_LEVEL = {
    Cause.NOTHING_RELEVANT: 0,
    Cause.DETECTION: 1,
    Cause.POSSIBLE_INTRUSION: 1,
    Cause.PREDICTED_ENTRY: 1,
    Cause.CONFIRMED_INTRUSION: 2,
    Cause.BROKEN_PERIMETER: 2,
}


def cause_level(cause: Cause, handoff_escalates_to_2: bool = False) -> int:
    if cause is Cause.PREDICTED_ENTRY and handoff_escalates_to_2:
        return 2
    return CAUSE_LEVEL[cause]


@dataclass(frozen=True)
class ReconfigCommand:
    camera_id: str
    target_level: int
    cause: Cause
    issued_at: float  # ms

    def __post_init__(self):
        if self.target_level not in RESOLUTIONS:
            raise UnknownMode(f"unknown operating mode level {self.target_level!r}")
