"""Speech feature extraction aligned to motion frames.

Audio is cut into one window per motion frame: window i covers samples in
[i/fps, (i+1)/fps), i.e. a window of length 1/fps centered on the frame
center. Beat features come from amplitude, short-time energy and spectral
flux over those windows; the high-level audio embedding is a log-mel
filterbank by default, with a file-backed provider for precomputed external
features. Text and emotion embeddings are deterministic substitutes with the
same shape contracts as the real upstream encoders.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .clips import read_matrix

EPS = 1e-8

D_AUDIO = 40
D_TEXT_LOCAL = 32
D_TEXT_GLOBAL = 32
D_EMOTION = 8
LATENT_STRIDE = 4   # motion frames per latent frame, matches the codec downsampling


def frame_windows(waveform: np.ndarray, sample_rate: int, fps: float, frame_count: int) -> np.ndarray:
    """(frame_count, L) sample windows, zero-padded past the end of the audio."""
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if waveform.size == 0:
        raise ValueError("empty audio")
    min_duration = (frame_count - 1) / fps
    if waveform.size / sample_rate < min_duration - 1e-9:
        raise ValueError(
            f"audio of {waveform.size / sample_rate:.3f}s too short for {frame_count} frames at {fps} fps"
        )
    length = int(round(sample_rate / fps))
    out = np.zeros((frame_count, length), dtype=np.float64)
    for i in range(frame_count):
        start = int(round(i * sample_rate / fps))
        chunk = waveform[start : start + length]
        out[i, : chunk.size] = chunk
    return out


def extract_beats(
    waveform: np.ndarray, sample_rate: int, fps: float, frame_count: int
) -> np.ndarray:
    """Per-frame beat features gamma_b, shape (frame_count, 4).

    Channels: max-normalized RMS amplitude; log short-time energy
    (log1p(energy/eps), zero for silence); half-wave-rectified spectral-flux
    onset strength; binary beat indicator (onset local maxima above the
    clip's mean + 1 std). The indicator is invariant to positive rescaling
    of the waveform.
    """
    windows = frame_windows(waveform, sample_rate, fps, frame_count)
    n = frame_count

    energy = (windows**2).sum(axis=1)
    rms = np.sqrt(energy / windows.shape[1])
    amplitude = rms / max(rms.max(), EPS)
    log_energy = np.log1p(energy / EPS)

    spectra = np.abs(np.fft.rfft(windows, axis=1))
    prev = np.vstack([np.zeros((1, spectra.shape[1])), spectra[:-1]])
    onset = np.maximum(spectra - prev, 0.0).sum(axis=1)

    beats = np.zeros(n)
    thresh = onset.mean() + onset.std()
    padded = np.concatenate([[0.0], onset, [0.0]])
    for i in range(n):
        if onset[i] > thresh and padded[i] < onset[i] and onset[i] >= padded[i + 2]:
            beats[i] = 1.0

    return np.stack([amplitude, log_energy, onset, beats], axis=1)


def beat_times(gamma_b: np.ndarray, fps: float) -> np.ndarray:
    """Seconds of frames flagged by the beat-indicator channel."""
    return np.flatnonzero(gamma_b[:, 3] > 0.5) / fps


def _mel_filterbank(num_bands: int, num_bins: int, sample_rate: int) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), num_bands + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.linspace(0.0, sample_rate / 2.0, num_bins)
    fb = np.zeros((num_bands, num_bins))
    for b in range(num_bands):
        left, center, right = hz_pts[b], hz_pts[b + 1], hz_pts[b + 2]
        up = (bin_freqs - left) / max(center - left, 1e-12)
        down = (right - bin_freqs) / max(right - center, 1e-12)
        fb[b] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


class FeatureProvider:
    """Shape contract for frame-aligned feature sources (builtin or file-backed)."""

    name: str = "provider"
    dim: int = 0
    mode: str = "builtin"

    def frame_features(
        self, clip_id: Optional[str], waveform: np.ndarray, sample_rate: int, fps: float, frame_count: int
    ) -> np.ndarray:
        raise NotImplementedError


class MelAudioProvider(FeatureProvider):
    """Deterministic builtin substitute for a pretrained speech encoder:
    40-band log-mel filterbank, standardized per clip."""

    name = "mel"
    mode = "builtin"

    def __init__(self, dim: int = D_AUDIO):
        self.dim = dim

    def frame_features(self, clip_id, waveform, sample_rate, fps, frame_count):
        windows = frame_windows(waveform, sample_rate, fps, frame_count)
        power = np.abs(np.fft.rfft(windows, axis=1)) ** 2
        fb = _mel_filterbank(self.dim, power.shape[1], sample_rate)
        return np.log(power @ fb.T + EPS)


class FileAudioProvider(FeatureProvider):
    """Loads precomputed per-clip feature matrices (<dir>/<clip_id>.bin + .meta)."""

    mode = "file-backed"

    def __init__(self, directory: Path, dim: int = D_AUDIO, name: str = "file"):
        self.directory = Path(directory)
        self.dim = dim
        self.name = name

    def frame_features(self, clip_id, waveform, sample_rate, fps, frame_count):
        if clip_id is None:
            raise ValueError("file-backed provider requires a clip id")
        arr, _ = read_matrix(self.directory / f"{clip_id}.bin")
        if arr.shape[0] != frame_count:
            raise ValueError(
                f"provider '{self.name}' returned {arr.shape[0]} rows for clip {clip_id}, "
                f"expected {frame_count}"
            )
        if arr.shape[1] != self.dim:
            raise ValueError(
                f"provider '{self.name}' returned dim {arr.shape[1]}, configured dim {self.dim}"
            )
        return arr.astype(np.float64)


def extract_audio_embedding(
    waveform: np.ndarray,
    sample_rate: int,
    fps: float,
    frame_count: int,
    provider: Optional[FeatureProvider] = None,
    clip_id: Optional[str] = None,
) -> np.ndarray:
    """High-level audio embedding gamma_h, (frame_count, d_a), standardized per clip."""
    provider = provider or MelAudioProvider()
    feats = provider.frame_features(clip_id, waveform, sample_rate, fps, frame_count)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    return (feats - mean) / np.maximum(std, EPS)


def token_embedding(vocab_size: int, token_id: int, dim: int = D_TEXT_LOCAL) -> np.ndarray:
    """Fixed pseudo-random embedding keyed by (vocab, token id)."""
    rng = np.random.default_rng([0x7E, vocab_size, token_id])
    return rng.standard_normal(dim) / np.sqrt(dim)


def embed_transcript(
    words: Sequence[Tuple[int, float, float]],
    vocab_size: int,
    fps: float,
    frame_count: int,
    d_local: int = D_TEXT_LOCAL,
    d_global: int = D_TEXT_GLOBAL,
) -> Tuple[np.ndarray, np.ndarray]:
    """Frame-level phi_l (word embedding broadcast over its frame span) and
    clip-level phi_g (mean of word embeddings; zero vector when no words)."""
    spans = sorted(((s, e, t) for t, s, e in words))
    for (s1, e1, _), (s2, e2, _) in zip(spans, spans[1:]):
        if s2 < e1 - 1e-9:
            raise ValueError(f"overlapping word intervals ({s1},{e1}) and ({s2},{e2})")
    phi_l = np.zeros((frame_count, d_local))
    embs = []
    for token, start, end in words:
        if token >= vocab_size or token < 0:
            raise ValueError(f"token id {token} outside vocab of size {vocab_size}")
        vec = token_embedding(vocab_size, token, d_local)
        embs.append(vec)
        lo = int(round(start * fps))
        hi = int(round(end * fps))
        phi_l[max(lo, 0) : min(hi, frame_count)] = vec
    if embs:
        mean = np.mean(embs, axis=0)
        phi_g = np.zeros(d_global)
        phi_g[: min(d_local, d_global)] = mean[: min(d_local, d_global)]
    else:
        phi_g = np.zeros(d_global)
    return phi_l, phi_g


def embed_emotion(tag: int, num_emotions: int, dim: int = D_EMOTION) -> np.ndarray:
    """One-hot emotion embedding with zero padding up to dim."""
    if not (0 <= tag < num_emotions):
        raise ValueError(f"emotion tag {tag} outside [0, {num_emotions})")
    if num_emotions > dim:
        raise ValueError(f"num_emotions {num_emotions} exceeds embedding dim {dim}")
    vec = np.zeros(dim)
    vec[tag] = 1.0
    return vec


class FileTextProvider:
    """Precomputed transcript features: <dir>/<id>.phi_l.bin (N x d_l) and
    <dir>/<id>.phi_g.bin (1 x d_g), each with a text sidecar."""

    mode = "file-backed"
    name = "file-text"

    def __init__(self, directory):
        self.directory = Path(directory)

    def transcript_features(self, clip_id: str, frame_count: int) -> Tuple[np.ndarray, np.ndarray]:
        phi_l, _ = read_matrix(self.directory / f"{clip_id}.phi_l.bin")
        if phi_l.shape[0] != frame_count:
            raise ValueError(
                f"provider '{self.name}' returned {phi_l.shape[0]} rows for clip {clip_id}, "
                f"expected {frame_count}"
            )
        phi_g, _ = read_matrix(self.directory / f"{clip_id}.phi_g.bin")
        return phi_l.astype(np.float64), phi_g.reshape(-1).astype(np.float64)


class FileEmotionProvider:
    """Precomputed emotion vectors: <dir>/<id>.phi_e.bin (1 x d_e)."""

    mode = "file-backed"
    name = "file-emotion"

    def __init__(self, directory):
        self.directory = Path(directory)

    def emotion_features(self, clip_id: str) -> np.ndarray:
        phi_e, _ = read_matrix(self.directory / f"{clip_id}.phi_e.bin")
        return phi_e.reshape(-1).astype(np.float64)


class FeatureProviders:
    """Provider choice per modality; None means the deterministic builtin."""

    def __init__(self, audio=None, text=None, emotion=None):
        self.audio = audio
        self.text = text
        self.emotion = emotion

    def audio_embedding(self, clip_id, waveform, sample_rate, fps, frame_count):
        return extract_audio_embedding(
            waveform, sample_rate, fps, frame_count, provider=self.audio, clip_id=clip_id
        )

    def transcript_features(self, clip_id, words, vocab_size, fps, frame_count):
        if self.text is None:
            return embed_transcript(words, vocab_size, fps, frame_count)
        return self.text.transcript_features(clip_id, frame_count)

    def emotion_features(self, clip_id, tag, num_emotions):
        if self.emotion is None:
            return embed_emotion(tag, num_emotions)
        return self.emotion.emotion_features(clip_id)


def parse_provider_spec(spec: str, modality: str):
    """'builtin' -> None; 'file:<dir>' -> the matching file-backed provider."""
    if spec == "builtin":
        return None
    if spec.startswith("file:"):
        directory = spec[len("file:"):]
        if modality == "audio":
            return FileAudioProvider(directory)
        if modality == "text":
            return FileTextProvider(directory)
        if modality == "emotion":
            return FileEmotionProvider(directory)
        raise ValueError(f"unknown provider modality '{modality}'")
    raise ValueError(f"provider spec must be 'builtin' or 'file:<dir>', got '{spec}'")


def pool_to_latent(x: np.ndarray, stride: int = LATENT_STRIDE, reduce: str = "mean") -> np.ndarray:
    """Pool frame-rate rows to latent rate in groups of `stride` (mean or max)."""
    x = np.asarray(x)
    n = x.shape[0]
    if n % stride:
        pad = stride - n % stride
        x = np.concatenate([x, np.repeat(x[-1:], pad, axis=0)], axis=0)
    grouped = x.reshape(-1, stride, *x.shape[1:])
    if reduce == "mean":
        return grouped.mean(axis=1)
    if reduce == "max":
        return grouped.max(axis=1)
    raise ValueError(f"unknown reduction '{reduce}'")
