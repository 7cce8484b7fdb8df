"""Clip records, validation, and on-disk format.

One directory per clip: motion.bin (row-major float32) + motion.meta text
sidecar, audio.wav (16-bit mono PCM), annot (JSON document with words,
labels, emotion, speaker). All pieces round-trip exactly.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .layout import BodyLayout, MotionSequence

MOTION_BIN = "motion.bin"
MOTION_META = "motion.meta"
AUDIO_WAV = "audio.wav"
ANNOT = "annot"


@dataclass
class SemanticLabelTrack:
    """Per-frame semantic relevance scores in [0,1]; label_i = score_i > threshold."""

    scores: np.ndarray
    binarization_threshold: float = 0.0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)

    def binary(self) -> np.ndarray:
        return (self.scores > self.binarization_threshold).astype(np.float64)


@dataclass
class ClipRecord:
    motion: MotionSequence
    audio: np.ndarray            # mono waveform in [-1, 1]
    sample_rate: int
    words: List[Tuple[int, float, float]]   # (token id, start s, end s)
    emotion: int
    speaker: int
    labels: SemanticLabelTrack

    @property
    def duration_s(self) -> float:
        return len(self.audio) / self.sample_rate


@dataclass
class ValidationReport:
    ok: bool
    violations: List[str] = field(default_factory=list)


def validate_clip(clip: ClipRecord) -> ValidationReport:
    """Check every type invariant; violations are reported, never raised."""
    v: List[str] = []
    n = clip.motion.num_frames
    fps = clip.motion.layout.fps
    if n < 1:
        v.append("motion has no frames")
    if not np.isfinite(clip.motion.values).all():
        v.append("motion contains non-finite values")
    frames_from_audio = clip.duration_s * fps
    if abs(n - frames_from_audio) > 1.0:
        v.append(
            f"motion frame count {n} disagrees with audio duration "
            f"({frames_from_audio:.2f} frames) by more than one frame"
        )
    if clip.labels.scores.shape[0] != n:
        v.append(
            f"label track length {clip.labels.scores.shape[0]} does not match motion frames {n}"
        )
    if clip.labels.scores.size and (
        clip.labels.scores.min() < 0.0 or clip.labels.scores.max() > 1.0
    ):
        v.append("label scores outside [0, 1]")
    duration = clip.duration_s
    spans = sorted((s, e) for _, s, e in clip.words)
    for tid, s, e in clip.words:
        if not (0.0 <= s < e <= duration + 1.0 / fps):
            v.append(f"word {tid} interval ({s:.3f}, {e:.3f}) outside clip duration {duration:.3f}")
    for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
        if s2 < e1 - 1e-9:
            v.append(f"word intervals ({s1:.3f},{e1:.3f}) and ({s2:.3f},{e2:.3f}) overlap")
    return ValidationReport(ok=not v, violations=v)


def write_wav(path: Path, waveform: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(waveform, dtype=np.float64) * 32767.0), -32768, 32767)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.astype("<i2").tobytes())


def read_wav(path: Path) -> Tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"audio file {path} is not 16-bit mono PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return samples, rate


def write_matrix(bin_path: Path, arr: np.ndarray, meta: Optional[dict] = None) -> None:
    """Row-major float32 binary plus a key=value text sidecar."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    bin_path.write_bytes(arr.tobytes())
    lines = [f"rows={arr.shape[0]}", f"cols={arr.shape[1]}", "dtype=float32"]
    for k, val in (meta or {}).items():
        lines.append(f"{k}={val}")
    bin_path.with_suffix(".meta").write_text("\n".join(lines) + "\n")


def read_matrix(bin_path: Path) -> Tuple[np.ndarray, dict]:
    meta_path = bin_path.with_suffix(".meta")
    if not meta_path.exists():
        raise FileNotFoundError(f"matrix sidecar missing: {meta_path}")
    meta = {}
    for line in meta_path.read_text().splitlines():
        if "=" in line:
            k, _, val = line.partition("=")
            meta[k.strip()] = val.strip()
    rows, cols = int(meta["rows"]), int(meta["cols"])
    data = np.frombuffer(bin_path.read_bytes(), dtype=np.float32)
    if data.size != rows * cols:
        raise ValueError(
            f"matrix file {bin_path} holds {data.size} values, sidecar promises {rows}x{cols}"
        )
    return data.reshape(rows, cols).copy(), meta


def save_clip(clip: ClipRecord, clip_dir: Path) -> None:
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    layout = clip.motion.layout
    write_matrix(
        clip_dir / MOTION_BIN,
        clip.motion.values,
        meta={"fps": repr(layout.fps), "layout": layout.to_spec()},
    )
    write_wav(clip_dir / AUDIO_WAV, clip.audio, clip.sample_rate)
    annot = {
        "words": [[int(t), float(s), float(e)] for t, s, e in clip.words],
        "labels": [float(x) for x in clip.labels.scores],
        "binarization_threshold": clip.labels.binarization_threshold,
        "emotion": int(clip.emotion),
        "speaker": int(clip.speaker),
    }
    (clip_dir / ANNOT).write_text(json.dumps(annot, sort_keys=True))


def load_clip(clip_dir: Path, expected_fps: Optional[float] = None) -> ClipRecord:
    """Load a clip directory; save followed by load is field-identical.

    expected_fps, when given (e.g. from a corpus manifest), must match the
    fps recorded in the motion sidecar.
    """
    clip_dir = Path(clip_dir)
    bin_path = clip_dir / MOTION_BIN
    if not bin_path.exists():
        raise FileNotFoundError(f"clip {clip_dir} is missing motion data ({MOTION_BIN})")
    values, meta = read_matrix(bin_path)
    try:
        fps = float(meta["fps"])
        layout = BodyLayout.from_spec(meta["layout"], total_channels=values.shape[1], fps=fps)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"clip {clip_dir} has a corrupt {MOTION_META}: {exc}") from exc
    if expected_fps is not None and abs(fps - expected_fps) > 1e-9:
        raise ValueError(
            f"clip {clip_dir}: fps mismatch with manifest (clip fps {fps}, manifest fps {expected_fps})"
        )
    wav_path = clip_dir / AUDIO_WAV
    if not wav_path.exists():
        raise FileNotFoundError(f"clip {clip_dir} is missing audio ({AUDIO_WAV})")
    audio, rate = read_wav(wav_path)
    annot_path = clip_dir / ANNOT
    if not annot_path.exists():
        raise FileNotFoundError(f"clip {clip_dir} is missing annotations ({ANNOT})")
    try:
        annot = json.loads(annot_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"clip {clip_dir} has a corrupt {ANNOT} document: {exc}") from exc
    return ClipRecord(
        motion=MotionSequence(values=values, layout=layout),
        audio=audio,
        sample_rate=rate,
        words=[(int(t), float(s), float(e)) for t, s, e in annot["words"]],
        emotion=int(annot["emotion"]),
        speaker=int(annot["speaker"]),
        labels=SemanticLabelTrack(
            scores=np.asarray(annot["labels"], dtype=np.float64),
            binarization_threshold=float(annot.get("binarization_threshold", 0.0)),
        ),
    )
