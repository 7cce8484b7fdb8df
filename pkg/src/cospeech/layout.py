"""Body layout and motion-sequence primitives.

A pose vector of D channels is partitioned into four contiguous body-part
ranges (face, upper, hands, lower); every downstream stage (per-part codecs,
the attention cascade, the fusion rule) works on that partition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

PART_NAMES = ("face", "upper", "hands", "lower")


@dataclass(frozen=True)
class BodyLayout:
    """Disjoint contiguous channel ranges covering [0, total_channels) exactly."""

    part_ranges: Dict[str, Tuple[int, int]]
    total_channels: int
    fps: float = 30.0

    def __post_init__(self):
        if set(self.part_ranges) != set(PART_NAMES):
            raise ValueError(
                f"layout must define exactly the parts {PART_NAMES}, got {sorted(self.part_ranges)}"
            )
        if self.total_channels <= 0:
            raise ValueError("total_channels must be positive")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        covered = np.zeros(self.total_channels, dtype=bool)
        for part, (start, stop) in self.part_ranges.items():
            if not (0 <= start < stop <= self.total_channels):
                raise ValueError(f"part '{part}' range ({start}, {stop}) is empty or out of bounds")
            if covered[start:stop].any():
                raise ValueError(f"part '{part}' range overlaps another part")
            covered[start:stop] = True
        if not covered.all():
            raise ValueError("part ranges do not cover every channel")

    def channel_slice(self, part: str) -> slice:
        start, stop = self.part_ranges[part]
        return slice(start, stop)

    def part_width(self, part: str) -> int:
        start, stop = self.part_ranges[part]
        return stop - start

    def to_spec(self) -> str:
        """Serialize as 'face:0:4,upper:4:8,...' for text sidecars."""
        return ",".join(f"{p}:{self.part_ranges[p][0]}:{self.part_ranges[p][1]}" for p in PART_NAMES)

    @classmethod
    def from_spec(cls, spec: str, total_channels: int, fps: float) -> "BodyLayout":
        ranges = {}
        for item in spec.split(","):
            part, start, stop = item.split(":")
            ranges[part] = (int(start), int(stop))
        return cls(part_ranges=ranges, total_channels=total_channels, fps=fps)


def default_layout(fps: float = 30.0) -> BodyLayout:
    """Desk-scale layout: D=16 with 4 channels per part."""
    return BodyLayout(
        part_ranges={"face": (0, 4), "upper": (4, 8), "hands": (8, 12), "lower": (12, 16)},
        total_channels=16,
        fps=fps,
    )


@dataclass
class MotionSequence:
    """Frames x channels array of pose parameters at layout.fps."""

    values: np.ndarray
    layout: BodyLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"motion values must be 2-D (frames, channels), got ndim={self.values.ndim}")
        if self.values.shape[1] != self.layout.total_channels:
            raise ValueError(
                f"motion has {self.values.shape[1]} channels, layout expects {self.layout.total_channels}"
            )

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.layout.fps

    def part(self, part: str) -> np.ndarray:
        return self.values[:, self.layout.channel_slice(part)]


def split_parts(motion: MotionSequence) -> Dict[str, np.ndarray]:
    """Split the channel axis into the four per-part arrays."""
    return {part: motion.values[:, motion.layout.channel_slice(part)].copy() for part in PART_NAMES}


def join_parts(parts: Dict[str, np.ndarray], layout: BodyLayout) -> MotionSequence:
    """Inverse of split_parts; exact round trip."""
    missing = set(PART_NAMES) - set(parts)
    if missing:
        raise ValueError(f"missing parts: {sorted(missing)}")
    lengths = {np.asarray(a).shape[0] for a in parts.values()}
    if len(lengths) != 1:
        raise ValueError(f"parts disagree on frame count: {sorted(lengths)}")
    n = lengths.pop()
    values = np.zeros((n, layout.total_channels), dtype=np.float32)
    for part in PART_NAMES:
        arr = np.asarray(parts[part], dtype=np.float32)
        width = layout.part_width(part)
        if arr.ndim != 2 or arr.shape[1] != width:
            raise ValueError(
                f"part '{part}' array has shape {arr.shape}, layout expects width {width}"
            )
        values[:, layout.channel_slice(part)] = arr
    return MotionSequence(values=values, layout=layout)
