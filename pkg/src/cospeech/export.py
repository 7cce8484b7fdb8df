"""Motion export: CSV tables and stick-figure frame rasters."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .layout import MotionSequence


def export_csv(motion: MotionSequence, out_path: Path) -> None:
    """N rows x (1 + D) columns: time in seconds, then every channel."""
    n = motion.num_frames
    t = np.arange(n) / motion.layout.fps
    table = np.column_stack([t, motion.values])
    with open(out_path, "w") as fh:
        for row in table:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")


def _limb(ax, x0, y0, angle, length, **kw):
    x1 = x0 + length * np.sin(angle)
    y1 = y0 - length * np.cos(angle)
    ax.plot([x0, x1], [y0, y1], **kw)
    return x1, y1


def render_stick_frame(ax, pose: np.ndarray, motion: MotionSequence) -> None:
    """Map the abstract channel blocks onto a fixed 2D skeleton: face drives
    head tilt/mouth, upper the shoulder/elbow angles, hands the wrists,
    lower the legs. Purely for visual audit."""
    layout = motion.layout
    face = pose[layout.channel_slice("face")]
    upper = pose[layout.channel_slice("upper")]
    hands = pose[layout.channel_slice("hands")]
    lower = pose[layout.channel_slice("lower")]
    style = {"color": "black", "lw": 2}

    hip = (0.0, 0.0)
    neck = (0.1 * float(upper[0]), 1.0)
    ax.plot([hip[0], neck[0]], [hip[1], neck[1]], **style)
    head_x = neck[0] + 0.15 * float(face[0])
    ax.add_patch(plt.Circle((head_x, neck[1] + 0.25), 0.18, fill=False, color="black", lw=2))
    mouth = 0.02 + 0.05 * abs(float(face[1]))
    ax.plot([head_x - mouth, head_x + mouth], [neck[1] + 0.17] * 2, color="black", lw=1.5)

    for side, (sh, el, wr) in ((-1, (upper[1], upper[2], hands[0])), (1, (upper[3], upper[2], hands[1]))):
        x, y = _limb(ax, neck[0], neck[1], side * (0.6 + 0.3 * float(sh)), 0.45, **style)
        _limb(ax, x, y, side * (0.3 + 0.3 * float(el)) + 0.4 * float(wr), 0.4, **style)
    for side, lg in ((-1, lower[0]), (1, lower[1])):
        x, y = _limb(ax, hip[0], hip[1], side * (0.25 + 0.15 * float(lg)), 0.55, **style)
        _limb(ax, x, y, side * 0.1, 0.5, **style)

    ax.set_xlim(-1.6, 1.6)
    ax.set_ylim(-1.4, 1.8)
    ax.set_aspect("equal")
    ax.axis("off")


def export_frames(motion: MotionSequence, out_dir: Path, max_frames: int | None = None) -> int:
    """One PNG per motion frame; returns the number of frames written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = motion.num_frames if max_frames is None else min(max_frames, motion.num_frames)
    for i in range(n):
        fig, ax = plt.subplots(figsize=(3, 3), dpi=72)
        render_stick_frame(ax, motion.values[i], motion)
        fig.savefig(out_dir / f"frame_{i:05d}.png", metadata={"Software": None})
        plt.close(fig)
    return n
