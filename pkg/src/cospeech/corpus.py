"""Synthetic oracle corpus with known ground truth.

Every clip is built from three ingredients whose parameters we control and
record, so each downstream claim has an oracle:

* audio: an impulse train at the clip's beat grid plus low-amplitude noise;
* base motion: per-part cosines phase-locked to the beat grid (phase zero at
  every impulse) with speaker-dependent amplitude/offset;
* sparse events: rare contiguous spans (0.3-0.8 s) where a gesture template
  (a smooth amplitude bump on designated upper/hands channels, scaled by the
  emotion tag) overlays the base motion. Labels are 1 exactly on event
  frames and every event co-occurs with a trigger token in the transcript.

Identical (seed, params) produce byte-identical corpora.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .clips import ClipRecord, SemanticLabelTrack, load_clip, save_clip
from .layout import PART_NAMES, MotionSequence, default_layout

MANIFEST = "manifest"
CLIPS_DIR = "clips"

# oscillation frequency per part, in multiples of the beat frequency
PART_FREQ_MULT = {"face": 2.0, "upper": 1.0, "hands": 1.0, "lower": 1.0}
PART_BASE_AMP = {"face": 0.6, "upper": 1.0, "hands": 0.9, "lower": 0.7}

NUM_TEMPLATES = 4
EVENT_MIN_S = 0.3
EVENT_MAX_S = 0.8
EVENT_AMP = 1.8
IMPULSE_AMP = 0.8
NOISE_AMP = 0.005


@dataclass(frozen=True)
class CorpusParams:
    num_clips: int = 200
    duration_s: float = 8.0
    fps: float = 30.0
    sample_rate: int = 16000
    beat_period_s: float = 0.5
    event_rate: float = 0.1
    vocab_size: int = 32
    num_speakers: int = 4
    num_emotions: int = 4
    seed: int = 0
    beat_phase_jitter: float = 0.0   # fraction of beat period used for per-clip phase offsets
    train_frac: float = 0.85
    val_frac: float = 0.075

    def validate(self) -> None:
        if self.num_clips < 3:
            raise ValueError("num_clips must be >= 3 so every split is non-empty")
        if not (0.0 < self.event_rate <= 0.3):
            raise ValueError(f"event_rate must be in (0, 0.3], got {self.event_rate}")
        if self.beat_period_s <= 2.0 / self.fps:
            raise ValueError(
                f"beat_period_s must exceed 2/fps = {2.0 / self.fps:.4f}, got {self.beat_period_s}"
            )
        n = self.frame_count
        min_span = max(4, int(math.ceil(EVENT_MIN_S * self.fps / 4)) * 4)
        if 1.5 * self.event_rate * n < min_span:
            raise ValueError(
                "event_rate x duration too small to fit one minimum-length event span"
            )
        if self.vocab_size < NUM_TEMPLATES + 1:
            raise ValueError(f"vocab_size must be > {NUM_TEMPLATES}")
        if self.num_speakers < 1 or self.num_emotions < 1:
            raise ValueError("num_speakers and num_emotions must be positive")
        if not (0.0 <= self.beat_phase_jitter <= 1.0):
            raise ValueError("beat_phase_jitter must be in [0, 1]")
        if self.train_frac <= 0 or self.val_frac <= 0 or self.train_frac + self.val_frac >= 1:
            raise ValueError("split fractions must be positive and sum below 1")

    @property
    def frame_count(self) -> int:
        return int(round(self.duration_s * self.fps))

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))


@dataclass
class CorpusManifest:
    params: CorpusParams
    splits: Dict[str, str]   # clip id -> train|val|test

    def clip_ids(self, split: Optional[str] = None) -> List[str]:
        ids = sorted(self.splits)
        if split is None:
            return ids
        return [c for c in ids if self.splits[c] == split]

    def to_json(self) -> str:
        return json.dumps(
            {"params": asdict(self.params), "splits": self.splits}, sort_keys=True, indent=1
        )

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        doc = json.loads(text)
        return cls(params=CorpusParams(**doc["params"]), splits=dict(doc["splits"]))


def corpus_hash(manifest: CorpusManifest) -> str:
    return hashlib.sha256(manifest.to_json().encode()).hexdigest()[:16]


def _speaker_style(params: CorpusParams) -> Tuple[np.ndarray, np.ndarray]:
    """Per-speaker amplitude factor and per-channel DC offsets, corpus-seeded."""
    rng = np.random.default_rng([params.seed, 0xA5])
    amp = 0.75 + 0.5 * rng.random(params.num_speakers)
    d = default_layout().total_channels
    offsets = rng.uniform(-0.3, 0.3, size=(params.num_speakers, d))
    return amp, offsets


def _gesture_templates() -> List[Tuple[str, float]]:
    """(part, sign) per template: the gesture freezes that part at a held
    amplitude spike while the rest of the body keeps the rhythm."""
    return [("upper", +1.0), ("upper", -1.0), ("hands", +1.0), ("hands", -1.0)]


def trigger_token(params: CorpusParams, template: int) -> int:
    return params.vocab_size - 1 - template


GRID = 4   # event spans snap to the codec's latent grid


def _place_events(
    rng: np.random.Generator, n_frames: int, fps: float, event_rate: float
) -> List[Tuple[int, int]]:
    """Non-overlapping event spans totalling within [0.5, 1.5] x event_rate x N
    frames. Spans are aligned to the 4-frame latent grid (lengths 0.4-0.8 s)
    so frame labels survive the latent-rate pooling/upsampling round trip."""
    target = event_rate * n_frames
    hi = int(math.floor(1.5 * target))
    min_len = max(GRID, int(math.ceil(EVENT_MIN_S * fps / GRID)) * GRID)
    max_len = max(min_len, int(math.floor(EVENT_MAX_S * fps / GRID)) * GRID)
    occupied = np.zeros(n_frames, dtype=bool)
    spans: List[Tuple[int, int]] = []
    total = 0
    attempts = 0
    while total < target and hi - total >= min_len and attempts < 200:
        attempts += 1
        length = int(rng.integers(min_len // GRID, max_len // GRID + 1)) * GRID
        length = min(length, (hi - total) // GRID * GRID)
        if length < min_len:
            break
        start = int(rng.integers(0, (n_frames - length) // GRID + 1)) * GRID
        # one-grid-cell gap so events stay distinct at latent rate
        lo_chk = max(0, start - GRID)
        if occupied[lo_chk : start + length + GRID].any():
            continue
        occupied[start : start + length] = True
        spans.append((start, start + length))
        total += length
    spans.sort()
    return spans


def generate_clip_record(params: CorpusParams, index: int) -> ClipRecord:
    """Deterministic clip construction, seeded by (corpus seed, clip index)."""
    params.validate()
    rng = np.random.default_rng([params.seed, index])
    layout = default_layout(fps=params.fps)
    n = params.frame_count
    t = np.arange(n) / params.fps

    speaker = index % params.num_speakers
    emotion = int(rng.integers(0, params.num_emotions))
    amp_table, offset_table = _speaker_style(params)

    phase_offset = float(rng.uniform(0.0, params.beat_period_s)) * params.beat_phase_jitter
    beat_times = np.arange(phase_offset, params.duration_s - 1e-9, params.beat_period_s)

    # audio: impulse train plus low-amplitude noise
    audio = rng.normal(0.0, NOISE_AMP, size=params.num_samples)
    beat_samples = np.round(beat_times * params.sample_rate).astype(int)
    audio[np.clip(beat_samples, 0, params.num_samples - 1)] += IMPULSE_AMP

    # base motion: per-part harmonic sinusoids, phase zero at every beat time.
    # Every harmonic is a cosine of a multiple of the beat phase, so each
    # channel peaks exactly on the beats while the waveform itself carries
    # channel-specific texture. Amplitudes/offsets depend on the speaker and
    # corpus only, so codes stay predictable from the conditioning.
    values = np.zeros((n, layout.total_channels), dtype=np.float64)
    chan_rng = np.random.default_rng([params.seed, 0xC4])
    for part in PART_NAMES:
        sl = layout.channel_slice(part)
        phase = 2.0 * np.pi * PART_FREQ_MULT[part] * (t - phase_offset) / params.beat_period_s
        width = layout.part_width(part)
        chan_amp = PART_BASE_AMP[part] * amp_table[speaker] * (1.0 + 0.15 * chan_rng.random(width))
        h2 = 0.2 + 0.3 * chan_rng.random(width)
        h3 = 0.05 + 0.2 * chan_rng.random(width)
        wave = (
            np.cos(phase)[:, None]
            + h2[None, :] * np.cos(2.0 * phase)[:, None]
            + h3[None, :] * np.cos(3.0 * phase)[:, None]
        )
        values[:, sl] = wave * chan_amp[None, :]
    values += offset_table[speaker][None, :]

    # sparse semantic events: cross-fade one body part to a held template
    # spike (rise, plateau, fall). Interior event frames look identical for a
    # given (template, emotion), which keeps sparse codes predictable.
    spans = _place_events(rng, n, params.fps, params.event_rate)
    labels = np.zeros(n, dtype=np.float64)
    templates = _gesture_templates()
    words: List[Tuple[int, float, float]] = []
    for start, stop in spans:
        tpl = int(rng.integers(0, NUM_TEMPLATES))
        part, sign = templates[tpl]
        sl = layout.channel_slice(part)
        length = stop - start
        ramp = min(GRID, length // 2)
        rise = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp) + 1) / (ramp + 1))
        bump = np.concatenate([rise, np.ones(length - 2 * ramp), rise[::-1]])
        level = EVENT_AMP * (1.0 + 0.3 * emotion) * sign
        values[start:stop, sl] = (
            (1.0 - bump)[:, None] * values[start:stop, sl] + bump[:, None] * level
        )
        labels[start:stop] = 1.0
        words.append((trigger_token(params, tpl), start / params.fps, stop / params.fps))

    # background words in event-free gaps
    free = np.flatnonzero(labels == 0.0)
    n_background = int(rng.integers(3, 8))
    for _ in range(n_background):
        if free.size < 6:
            break
        pos = int(rng.choice(free[:-5]))
        span = int(rng.integers(3, 6))
        stop = min(pos + span, n)
        if labels[pos:stop].any():
            continue
        overlap = any(not (stop / params.fps <= s or pos / params.fps >= e) for _, s, e in words)
        if overlap:
            continue
        token = int(rng.integers(0, params.vocab_size - NUM_TEMPLATES))
        words.append((token, pos / params.fps, stop / params.fps))

    words.sort(key=lambda w: w[1])
    return ClipRecord(
        motion=MotionSequence(values=values.astype(np.float32), layout=layout),
        audio=audio,
        sample_rate=params.sample_rate,
        words=words,
        emotion=emotion,
        speaker=speaker,
        labels=SemanticLabelTrack(scores=labels, binarization_threshold=0.0),
    )


def _assign_splits(params: CorpusParams, ids: List[str]) -> Dict[str, str]:
    rng = np.random.default_rng([params.seed, 0x51])
    perm = rng.permutation(len(ids))
    n = len(ids)
    n_val = max(1, int(round(params.val_frac * n)))
    n_test = max(1, int(round((1.0 - params.train_frac - params.val_frac) * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError("split fractions leave no training clips")
    splits = {}
    for rank, clip_idx in enumerate(perm):
        if rank < n_train:
            tag = "train"
        elif rank < n_train + n_val:
            tag = "val"
        else:
            tag = "test"
        splits[ids[clip_idx]] = tag
    return splits


def clip_id(index: int) -> str:
    return f"clip_{index:04d}"


def make_synthetic_corpus(params: CorpusParams, out_dir: Path) -> CorpusManifest:
    """Generate and store the corpus; returns the manifest (also written to disk)."""
    params.validate()
    out_dir = Path(out_dir)
    (out_dir / CLIPS_DIR).mkdir(parents=True, exist_ok=True)
    ids = [clip_id(i) for i in range(params.num_clips)]
    for i, cid in enumerate(ids):
        record = generate_clip_record(params, i)
        save_clip(record, out_dir / CLIPS_DIR / cid)
    manifest = CorpusManifest(params=params, splits=_assign_splits(params, ids))
    (out_dir / MANIFEST).write_text(manifest.to_json())
    return manifest


def load_manifest(corpus_dir: Path) -> CorpusManifest:
    path = Path(corpus_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"corpus manifest missing: {path}")
    return CorpusManifest.from_json(path.read_text())


def load_corpus_clip(corpus_dir: Path, cid: str, manifest: Optional[CorpusManifest] = None) -> ClipRecord:
    manifest = manifest or load_manifest(corpus_dir)
    return load_clip(Path(corpus_dir) / CLIPS_DIR / cid, expected_fps=manifest.params.fps)


def iter_split(
    corpus_dir: Path, split: Optional[str] = None, manifest: Optional[CorpusManifest] = None
) -> Iterator[Tuple[str, ClipRecord]]:
    manifest = manifest or load_manifest(corpus_dir)
    for cid in manifest.clip_ids(split):
        yield cid, load_corpus_clip(corpus_dir, cid, manifest)
