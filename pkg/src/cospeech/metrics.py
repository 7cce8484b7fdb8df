"""Quantitative evaluation surface: FGD, beat consistency, diversity, facial
MSE/LVD, sem-gate accuracy, kinematic beat extraction, and the small motion
embedder that FGD depends on.

The FGD embedder is a locally trained autoencoder, not the external
pretrained evaluator, so absolute FGD values are comparable only within this
artifact (orderings and ablation directions); reports carry that caveat.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .clips import SemanticLabelTrack
from .layout import MotionSequence

EMBED_DIM = 32
EMBED_WINDOW = 32
BC_SIGMA_S = 0.1
FGD_CAVEAT = (
    "FGD uses a locally trained embedder; absolute values are not comparable "
    "to externally published numbers, only orderings within this artifact."
)


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "GaussianStats":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValueError("need at least 2 samples (rows) to fit Gaussian statistics")
        return cls(mean=x.mean(axis=0), cov=np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1]))


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root by eigendecomposition, negative eigenvalues clipped at 0."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def sqrtm_product(sigma1: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """Matrix square root of sigma1 @ sigma2 via the symmetric similarity
    S1 (S1 sigma2 S1)^{1/2} S1^{-1}; requires sigma1 nonsingular."""
    s1 = _sym_sqrt(sigma1)
    inner = _sym_sqrt(s1 @ sigma2 @ s1)
    vals, vecs = np.linalg.eigh((sigma1 + sigma1.T) / 2.0)
    if vals.min() <= 0:
        raise ValueError("sigma1 must be positive definite for the full product square root")
    s1_inv = (vecs / np.sqrt(vals)) @ vecs.T
    return s1 @ inner @ s1_inv


def frechet_distance(stats1: GaussianStats, stats2: GaussianStats) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), clipped at 0.

    The trace term uses eigvals of sqrt(S1) S2 sqrt(S1), which equals
    Tr((S1 S2)^{1/2}) without inverting (possibly singular) covariances."""
    diff = stats1.mean - stats2.mean
    s1 = _sym_sqrt(stats1.cov)
    inner = s1 @ stats2.cov @ s1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(stats1.cov) + np.trace(stats2.cov) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fgd(real_embeddings: np.ndarray, gen_embeddings: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of embedded real vs generated motion."""
    s_real = GaussianStats.from_samples(real_embeddings)
    s_gen = GaussianStats.from_samples(gen_embeddings)
    if s_real.mean.shape != s_gen.mean.shape:
        raise ValueError("embedding sets disagree on dimensionality")
    return frechet_distance(s_real, s_gen)


def extract_kinematic_beats(
    motion: MotionSequence,
    parts: Sequence[str] = ("upper", "hands"),
    smooth: int = 3,
    percentile: float = 30.0,
) -> np.ndarray:
    """Beat times (s): local minima of the smoothed joint-velocity magnitude
    over the selected parts, below the given percentile of the track.
    Constant motion has no beats."""
    if motion.num_frames < 3:
        raise ValueError("need at least 3 frames for kinematic beats")
    channels = np.concatenate([motion.part(p) for p in parts], axis=1).astype(np.float64)
    vel = np.linalg.norm(np.diff(channels, axis=0), axis=1)
    smooth += 1 - smooth % 2   # odd width keeps the window centered
    kernel = np.ones(smooth) / smooth
    vel_s = np.convolve(np.pad(vel, smooth // 2, mode="edge"), kernel, mode="valid")
    cutoff = np.percentile(vel_s, percentile)
    times = []
    fps = motion.layout.fps
    for i in range(1, len(vel_s) - 1):
        if vel_s[i] < vel_s[i - 1] and vel_s[i] <= vel_s[i + 1] and vel_s[i] < cutoff:
            times.append((i + 0.5) / fps)   # velocity sample i sits between frames i and i+1
    return np.asarray(times)


def beat_consistency(
    audio_beats: np.ndarray, kinematic_beats: np.ndarray, sigma_s: float = BC_SIGMA_S
) -> float:
    """Mean Gaussian-kernel agreement: for each audio beat, exp(-d^2/(2 sigma^2))
    to the nearest kinematic beat. Empty kinematic beats score 0 by convention."""
    if sigma_s <= 0:
        raise ValueError("sigma must be positive")
    audio_beats = np.asarray(audio_beats, dtype=np.float64).reshape(-1)
    if audio_beats.size == 0:
        raise ValueError("BC undefined for empty audio beats")
    kin = np.asarray(kinematic_beats, dtype=np.float64).reshape(-1)
    if kin.size == 0:
        return 0.0
    d = np.abs(audio_beats[:, None] - kin[None, :]).min(axis=1)
    return float(np.exp(-(d**2) / (2.0 * sigma_s**2)).mean())


def diversity(clips: Sequence[np.ndarray]) -> float:
    """Mean pairwise L1 distance across clips, normalized per frame per channel."""
    if len(clips) < 2:
        raise ValueError("diversity needs at least 2 clips")
    arrays = [np.asarray(c, dtype=np.float64) for c in clips]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError("all clips must share one shape")
    denom = float(np.prod(shape))
    total = 0.0
    count = 0
    for i in range(len(arrays)):
        for j in range(i + 1, len(arrays)):
            total += np.abs(arrays[i] - arrays[j]).sum() / denom
            count += 1
    return total / count


def face_mse(gt: MotionSequence, gen: MotionSequence) -> float:
    """Mean squared positional difference over the face channel block."""
    a, b = gt.part("face"), gen.part("face")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


def face_lvd(gt: MotionSequence, gen: MotionSequence) -> float:
    """Mean absolute difference of face-channel velocities (first-order frame
    differences); invariant to any constant positional offset."""
    a, b = gt.part("face"), gen.part("face")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    va = np.diff(a.astype(np.float64), axis=0)
    vb = np.diff(b.astype(np.float64), axis=0)
    return float(np.mean(np.abs(va - vb)))


def semgate_accuracy(psi_frames: np.ndarray, labels: SemanticLabelTrack, beta: float) -> float:
    """Fraction of frames where (psi > beta) agrees with the binary label."""
    psi_frames = np.asarray(psi_frames, dtype=np.float64).reshape(-1)
    binary = labels.binary()
    if psi_frames.shape[0] != binary.shape[0]:
        raise ValueError(
            f"psi has {psi_frames.shape[0]} frames, labels have {binary.shape[0]}"
        )
    return float(np.mean((psi_frames > beta) == (binary > 0.5)))


class MotionEmbedder(nn.Module):
    """Small temporal autoencoder over fixed-length motion windows; the
    bottleneck is the FGD embedding."""

    def __init__(self, channels: int, window: int = EMBED_WINDOW, embed_dim: int = EMBED_DIM, hidden: int = 64):
        super().__init__()
        self.window = window
        self.channels = channels
        self.encoder = nn.Sequential(
            nn.Conv1d(channels, hidden, kernel_size=4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv1d(hidden, hidden, kernel_size=4, stride=2, padding=1),
            nn.GELU(),
        )
        self.to_embed = nn.Linear(hidden * (window // 4), embed_dim)
        self.from_embed = nn.Linear(embed_dim, hidden * (window // 4))
        self.decoder = nn.Sequential(
            nn.ConvTranspose1d(hidden, hidden, kernel_size=4, stride=2, padding=1),
            nn.GELU(),
            nn.ConvTranspose1d(hidden, channels, kernel_size=4, stride=2, padding=1),
        )
        self.hidden = hidden

    def embed(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, W, C) -> (B, embed_dim)."""
        h = self.encoder(windows.transpose(1, 2))
        return self.to_embed(h.reshape(h.shape[0], -1))

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        z = self.embed(windows)
        h = self.from_embed(z).reshape(windows.shape[0], self.hidden, self.window // 4)
        return self.decoder(h).transpose(1, 2)


def motion_windows(values: np.ndarray, window: int = EMBED_WINDOW, stride: int = EMBED_WINDOW // 2) -> np.ndarray:
    """(N, C) -> (num_windows, window, C); clips shorter than one window yield none."""
    n = values.shape[0]
    if n < window:
        return np.zeros((0, window, values.shape[1]), dtype=np.float32)
    starts = range(0, n - window + 1, stride)
    return np.stack([values[s : s + window] for s in starts]).astype(np.float32)


def embed_clips(embedder: MotionEmbedder, clips: Sequence[np.ndarray]) -> np.ndarray:
    """Pool all windows of all clips into one embedding matrix."""
    wins = [motion_windows(c) for c in clips]
    stacked = np.concatenate([w for w in wins if len(w)], axis=0)
    embedder.eval()
    with torch.no_grad():
        return embedder.embed(torch.tensor(stacked)).numpy().astype(np.float64)


def train_embedder(
    clips: Sequence[np.ndarray],
    channels: int,
    corpus_hash: str,
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> Tuple[MotionEmbedder, str]:
    """Reconstruction-train the embedder on GT motion; returns (model, corpus hash)
    so FGD evaluations can flag reuse against a different corpus."""
    torch.manual_seed(seed)
    model = MotionEmbedder(channels)
    data = np.concatenate([motion_windows(c) for c in clips], axis=0)
    tensor = torch.tensor(data)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for _ in range(epochs):
        perm = rng.permutation(len(tensor))
        for s in range(0, len(tensor), batch_size):
            batch = tensor[perm[s : s + batch_size]]
            loss = F.mse_loss(model(batch), batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model, corpus_hash


@dataclass
class EvaluationReport:
    metrics: Dict[str, float]
    config: Dict[str, object]
    caveats: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
                "config": self.config,
                "caveats": self.caveats,
                "warnings": self.warnings,
            },
            sort_keys=True,
            indent=1,
        )
