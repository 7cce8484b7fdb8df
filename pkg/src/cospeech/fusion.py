"""Adaptive fusion of base and sparse codes by thresholded semantic score,
decoding of fused codes to full-body motion, and long-form chaining.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .base_branch import BaseGenerator, GenerationContext
from .features import (
    LATENT_STRIDE,
    MelAudioProvider,
    embed_emotion,
    embed_transcript,
    extract_audio_embedding,
    extract_beats,
)
from .layout import PART_NAMES, BodyLayout, MotionSequence, join_parts
from .rvq import PartCodec
from .sparse_branch import SemanticScore, SparseGenerator


@dataclass(frozen=True)
class FusionConfig:
    beta: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must lie in (0,1), got {self.beta}")


@dataclass
class SemanticInputs:
    phi_l: np.ndarray
    phi_g: np.ndarray
    phi_e: np.ndarray


@dataclass
class GenerationResult:
    motion: MotionSequence
    psi: Optional[SemanticScore]
    base_codes: Dict[str, np.ndarray]            # (n, V) per part
    sparse_codes: Optional[Dict[str, np.ndarray]]  # body parts only
    fused_codes: Dict[str, np.ndarray]


def fuse_codes(
    base_codes: Dict[str, np.ndarray],
    sparse_codes: Optional[Dict[str, np.ndarray]],
    psi: Optional[np.ndarray],
    cfg: FusionConfig,
) -> Dict[str, np.ndarray]:
    """Per latent frame i: body parts take all V sparse codes when
    psi_i > beta (strict), base codes otherwise; the face always comes from
    the base branch. The replaced frame set is identical across body parts.
    """
    fused = {part: np.array(base_codes[part], copy=True) for part in base_codes}
    if sparse_codes is None or psi is None:
        return fused
    n = next(iter(base_codes.values())).shape[0]
    psi = np.asarray(psi).reshape(-1)
    if psi.shape[0] != n:
        raise ValueError(f"psi has {psi.shape[0]} frames, codes have {n}")
    replace = psi > cfg.beta
    for part, q_s in sparse_codes.items():
        if part == "face":
            continue
        if q_s.shape != base_codes[part].shape:
            raise ValueError(
                f"part '{part}': sparse codes {q_s.shape} vs base codes {base_codes[part].shape}"
            )
        fused[part][replace] = q_s[replace]
    return fused


def decode_motion(
    fused_codes: Dict[str, np.ndarray], codecs: Dict[str, PartCodec], layout: BodyLayout
) -> MotionSequence:
    """Dequantize and conv-decode each part, then join channels."""
    parts = {}
    with torch.no_grad():
        for part in PART_NAMES:
            codes = torch.tensor(np.asarray(fused_codes[part]), dtype=torch.long)
            z_hat = codecs[part].quantizer.dequantize(codes)
            parts[part] = codecs[part].decode(z_hat.unsqueeze(0)).squeeze(0).numpy()
    return join_parts(parts, layout)


@dataclass
class ModelBundle:
    """Everything generation needs, checked for a shared config hash."""

    layout: BodyLayout
    codecs: Dict[str, PartCodec]
    base: BaseGenerator
    sparse: Optional[SparseGenerator]
    config_hash: str
    fusion: FusionConfig = field(default_factory=FusionConfig)
    window_s: float = 4.0   # generation window, mirrors the training window

    def without_sparse(self) -> "ModelBundle":
        return ModelBundle(
            layout=self.layout, codecs=self.codecs, base=self.base, sparse=None,
            config_hash=self.config_hash, fusion=self.fusion, window_s=self.window_s,
        )


def _codes_to_numpy(codes: Dict[str, torch.Tensor]) -> Dict[str, np.ndarray]:
    return {part: c.squeeze(0).numpy().astype(np.int64) for part, c in codes.items()}


def generate_clip(
    ctx: GenerationContext,
    semantics: Optional[SemanticInputs],
    bundle: ModelBundle,
    cfg: Optional[FusionConfig] = None,
) -> GenerationResult:
    """Full two-branch pipeline for one window; greedy decoding, deterministic
    given parameters. Returns all intermediates for inspection."""
    cfg = cfg or bundle.fusion
    base, sparse = bundle.base, bundle.sparse
    base.eval()
    with torch.no_grad():
        seed = torch.tensor(ctx.seed_pose, dtype=torch.float32).unsqueeze(0)
        speaker = torch.tensor([ctx.speaker], dtype=torch.long)
        gb = torch.tensor(ctx.gamma_b, dtype=torch.float32).unsqueeze(0)
        gh = torch.tensor(ctx.gamma_h, dtype=torch.float32).unsqueeze(0)
        tokens, refined, _, base_codes_t = base(seed, speaker, gb, gh, bundle.codecs)
        base_codes = _codes_to_numpy(base_codes_t)

        psi_track: Optional[SemanticScore] = None
        sparse_codes: Optional[Dict[str, np.ndarray]] = None
        if sparse is not None and semantics is not None:
            sparse.eval()
            phi_l = torch.tensor(semantics.phi_l, dtype=torch.float32).unsqueeze(0)
            phi_g = torch.tensor(semantics.phi_g, dtype=torch.float32).unsqueeze(0)
            phi_e = torch.tensor(semantics.phi_e, dtype=torch.float32).unsqueeze(0)
            _, psi_t, _, _, codes_t, _ = sparse(phi_l, phi_g, phi_e, gh, refined)
            psi_track = SemanticScore(latent=psi_t.squeeze(0).numpy().astype(np.float64))
            sparse_codes = _codes_to_numpy(codes_t)

        fused = fuse_codes(
            base_codes, sparse_codes, psi_track.latent if psi_track else None, cfg
        )
        motion = decode_motion(fused, bundle.codecs, bundle.layout)
    return GenerationResult(
        motion=motion,
        psi=psi_track,
        base_codes=base_codes,
        sparse_codes=sparse_codes,
        fused_codes=fused,
    )


def context_from_audio(
    audio: np.ndarray,
    sample_rate: int,
    layout: BodyLayout,
    speaker: int,
    seed_pose: Optional[np.ndarray] = None,
    frame_count: Optional[int] = None,
    seed_len: int = 4,
) -> GenerationContext:
    """Build a GenerationContext from raw audio (zero seed pose by default)."""
    fps = layout.fps
    n = frame_count or int(len(audio) / sample_rate * fps)
    if seed_pose is None:
        seed_pose = np.zeros((seed_len, layout.total_channels), dtype=np.float32)
    return GenerationContext(
        seed_pose=np.asarray(seed_pose, dtype=np.float32),
        speaker=speaker,
        gamma_b=extract_beats(audio, sample_rate, fps, n),
        gamma_h=extract_audio_embedding(audio, sample_rate, fps, n),
        frame_count=n,
    )


def semantics_from_annotations(
    words, emotion: int, vocab_size: int, num_emotions: int, fps: float, frame_count: int
) -> SemanticInputs:
    phi_l, phi_g = embed_transcript(words, vocab_size, fps, frame_count)
    phi_e = embed_emotion(emotion, num_emotions)
    return SemanticInputs(phi_l=phi_l, phi_g=phi_g, phi_e=phi_e)


def generate_long(
    audio: np.ndarray,
    sample_rate: int,
    bundle: ModelBundle,
    speaker: int,
    window_s: float = 4.0,
    semantics: Optional[SemanticInputs] = None,
    cfg: Optional[FusionConfig] = None,
    seed_pose: Optional[np.ndarray] = None,
    frame_count: Optional[int] = None,
    features: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> GenerationResult:
    """Sliding-window generation over a stream of any length.

    Each window's seed pose is the last generated frames of the previous
    window; concatenation drops the seed overlap. Rhythm features are
    computed once over the whole stream and sliced per window, matching how
    training windows see clip-level features; precomputed full-stream
    (gamma_b, gamma_h) can be passed via `features`. `semantics`, when given,
    carries frame-rate phi_l for the full stream plus clip-level phi_g/phi_e
    reused by every window. Streams at most one window long reduce to a
    single generate_clip call.
    """
    layout = bundle.layout
    fps = layout.fps
    seed_len = bundle.base.seed_len
    total = frame_count if frame_count is not None else int(round(len(audio) / sample_rate * fps))
    if total < 1:
        raise ValueError("stream too short to generate any frames")
    padded = -(-total // LATENT_STRIDE) * LATENT_STRIDE
    win = int(round(window_s * fps))
    win -= win % LATENT_STRIDE
    win = max(LATENT_STRIDE, min(win, padded))

    if features is not None:
        gamma_b, gamma_h = features
        if gamma_b.shape[0] < padded or gamma_h.shape[0] < padded:
            raise ValueError(f"precomputed features must cover {padded} frames")
        gamma_b, gamma_h = gamma_b[:padded], gamma_h[:padded]
    else:
        need = int(round(padded * sample_rate / fps)) + 1
        buf = audio if len(audio) >= need else np.concatenate([audio, np.zeros(need - len(audio))])
        gamma_b = extract_beats(buf, sample_rate, fps, padded)
        gamma_h = extract_audio_embedding(buf, sample_rate, fps, padded)
    initial_seed = (
        seed_pose if seed_pose is not None
        else np.zeros((seed_len, layout.total_channels), np.float32)
    )

    def window_semantics(start: int) -> Optional[SemanticInputs]:
        if semantics is None:
            return None
        phi_l = semantics.phi_l
        if phi_l.shape[0] < start + win:
            phi_l = np.concatenate(
                [phi_l, np.zeros((start + win - phi_l.shape[0], phi_l.shape[1]))]
            )
        return SemanticInputs(
            phi_l=phi_l[start : start + win], phi_g=semantics.phi_g, phi_e=semantics.phi_e
        )

    def window_result(start: int, seed: np.ndarray) -> GenerationResult:
        ctx = GenerationContext(
            seed_pose=np.asarray(seed, dtype=np.float32),
            speaker=speaker,
            gamma_b=gamma_b[start : start + win],
            gamma_h=gamma_h[start : start + win],
            frame_count=win,
        )
        return generate_clip(ctx, window_semantics(start), bundle, cfg)

    if padded <= win:
        result = window_result(0, initial_seed)
        result.motion = MotionSequence(values=result.motion.values[:total], layout=layout)
        return result

    starts: List[int] = [0]
    while starts[-1] + win < padded:
        nxt = starts[-1] + (win - seed_len)
        if nxt + win >= padded:
            nxt = padded - win
        starts.append(nxt)

    out = np.zeros((padded, layout.total_channels), dtype=np.float32)
    psi_parts: List[np.ndarray] = []
    code_parts: Dict[str, List[np.ndarray]] = {}
    sparse_parts: Dict[str, List[np.ndarray]] = {}
    fused_parts: Dict[str, List[np.ndarray]] = {}
    have_sparse = True
    written = 0
    for i, start in enumerate(starts):
        seed = initial_seed if i == 0 else out[start : start + seed_len]
        res = window_result(start, seed)
        out[written : start + win] = res.motion.values[written - start :]
        lat_drop = (written - start) // LATENT_STRIDE
        if res.psi is not None:
            psi_parts.append(res.psi.latent[lat_drop:])
        for part, arr in res.base_codes.items():
            code_parts.setdefault(part, []).append(arr[lat_drop:])
        if res.sparse_codes is None:
            have_sparse = False
        else:
            for part, arr in res.sparse_codes.items():
                sparse_parts.setdefault(part, []).append(arr[lat_drop:])
        for part, arr in res.fused_codes.items():
            fused_parts.setdefault(part, []).append(arr[lat_drop:])
        written = start + win

    psi = SemanticScore(latent=np.concatenate(psi_parts)) if psi_parts else None
    return GenerationResult(
        motion=MotionSequence(values=out[:total], layout=layout),
        psi=psi,
        base_codes={p: np.concatenate(v) for p, v in code_parts.items()},
        sparse_codes=(
            {p: np.concatenate(v) for p, v in sparse_parts.items()} if have_sparse else None
        ),
        fused_codes={p: np.concatenate(v) for p, v in fused_parts.items()},
    )
