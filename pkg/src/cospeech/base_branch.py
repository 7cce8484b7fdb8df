"""Rhythm branch: context encoding, coarse-to-fine attention cascade over the
four body parts, layer-wise code prediction, and the two contrastive
rhythm-alignment losses (frame-level and sequence-level InfoNCE).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .features import D_AUDIO, LATENT_STRIDE
from .layout import PART_NAMES, BodyLayout
from .nn_blocks import MLP, CrossAttentionStack, SelfAttentionLayer, l2_normalize, sinusoidal_positions

CASCADE_ORDER = ("face", "hands", "upper", "lower")
BODY_PARTS = ("hands", "upper", "lower")


@dataclass
class GenerationContext:
    """Inputs for one generated window: 4-frame seed pose, speaker, rhythm features."""

    seed_pose: np.ndarray        # (seed_len, D)
    speaker: int
    gamma_b: np.ndarray          # (N, 4)
    gamma_h: np.ndarray          # (N, d_a)
    frame_count: int


@dataclass
class PartLatents:
    face: torch.Tensor
    hands: torch.Tensor
    upper: torch.Tensor
    lower: torch.Tensor

    def get(self, part: str) -> torch.Tensor:
        return getattr(self, part)

    def replaced(self, part: str, value: torch.Tensor) -> "PartLatents":
        parts = {p: self.get(p) for p in PART_NAMES}
        parts[part] = value
        return PartLatents(**parts)

    def as_dict(self) -> Dict[str, torch.Tensor]:
        return {p: self.get(p) for p in PART_NAMES}


def beat_timing_features(beat_channel: torch.Tensor, fps: float, cap_s: float = 2.0) -> torch.Tensor:
    """Per-frame timing relative to the beat grid, derived from the binary
    beat-indicator channel: seconds since the previous beat, seconds until
    the next beat (both capped), and position within the beat cycle. This is
    what lets code prediction stay phase-locked between beats, where the raw
    audio features carry no rhythm information.

    beat_channel: (B, N) -> (B, N, 3).
    """
    b, n = beat_channel.shape
    out = torch.zeros(b, n, 3, dtype=beat_channel.dtype)
    frames = torch.arange(n, dtype=beat_channel.dtype)
    cap = cap_s * fps
    for i in range(b):
        idx = torch.nonzero(beat_channel[i] > 0.5).flatten().to(beat_channel.dtype)
        if idx.numel() == 0:
            out[i, :, 0] = out[i, :, 1] = cap_s
            out[i, :, 2] = 0.5
            continue
        pos = torch.searchsorted(idx, frames, right=True)
        prev_idx = torch.clamp(pos - 1, min=0)
        next_idx = torch.clamp(pos, max=idx.numel() - 1)
        d_prev = torch.where(pos > 0, frames - idx[prev_idx], torch.full_like(frames, cap))
        d_next = torch.where(pos < idx.numel(), idx[next_idx] - frames, torch.full_like(frames, cap))
        d_prev = d_prev.clamp(max=cap)
        d_next = d_next.clamp(max=cap)
        out[i, :, 0] = d_prev / fps
        out[i, :, 1] = d_next / fps
        out[i, :, 2] = d_prev / (d_prev + d_next).clamp(min=1.0)
    return out


def contrastive_frame_loss(u: torch.Tensor, v: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE over rows: row i of u should match row i of v, other rows are
    negatives. Cosine similarities, so any common rescaling or joint rotation
    of the embeddings leaves the loss unchanged."""
    if u.shape[0] < 2:
        raise ValueError("need at least 2 rows for contrastive negatives")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    sim = l2_normalize(u) @ l2_normalize(v).t() / tau
    targets = torch.arange(u.shape[0], device=u.device)
    return F.cross_entropy(sim, targets)


def contrastive_symmetric_loss(u: torch.Tensor, v: torch.Tensor, tau: float) -> torch.Tensor:
    """Average of both InfoNCE directions (u->v and v->u)."""
    if u.shape[0] < 2:
        raise ValueError("need a batch of at least 2 for in-batch negatives")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    sim = l2_normalize(u) @ l2_normalize(v).t() / tau
    targets = torch.arange(u.shape[0], device=u.device)
    return 0.5 * (F.cross_entropy(sim, targets) + F.cross_entropy(sim.t(), targets))


class RhythmProjector(nn.Module):
    """Projection heads h (motion) and g (audio) into a shared space; pooled
    sequence embeddings are the temporal mean, re-normalized to unit length."""

    def __init__(self, motion_dim: int, audio_dim: int = D_AUDIO, proj_dim: int = 128, tau: float = 0.1):
        super().__init__()
        self.tau = tau
        self.motion_head = nn.Linear(motion_dim, proj_dim)
        self.audio_head = nn.Linear(audio_dim, proj_dim)

    def project_motion(self, f: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.motion_head(f))

    def project_audio(self, g: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.audio_head(g))

    def pool_motion(self, f: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.project_motion(f).mean(dim=-2))

    def pool_audio(self, g: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.project_audio(g).mean(dim=-2))


def rhythmic_loss_local(f: torch.Tensor, gamma_h_ds: torch.Tensor, projector: RhythmProjector) -> torch.Tensor:
    """Frame-level InfoNCE between a latent sequence (n, d) and downsampled
    audio features (n, d_a); frames of the same sequence act as negatives."""
    if f.shape[-2] != gamma_h_ds.shape[-2]:
        raise ValueError("latent and rhythm sequences disagree on frame count")
    if f.ndim == 3:
        losses = [
            contrastive_frame_loss(projector.project_motion(fb), projector.project_audio(gb), projector.tau)
            for fb, gb in zip(f, gamma_h_ds)
        ]
        return torch.stack(losses).mean()
    return contrastive_frame_loss(
        projector.project_motion(f), projector.project_audio(gamma_h_ds), projector.tau
    )


def rhythmic_loss_global(
    f_batch: torch.Tensor, gamma_batch: torch.Tensor, projector: RhythmProjector
) -> torch.Tensor:
    """Sequence-level InfoNCE over pooled embeddings with in-batch negatives,
    symmetrized over both retrieval directions."""
    if f_batch.ndim != 3 or gamma_batch.ndim != 3:
        raise ValueError("global loss expects batched sequences (B, n, d)")
    if f_batch.shape[0] < 2:
        raise ValueError("global loss needs batch size >= 2")
    return contrastive_symmetric_loss(
        projector.pool_motion(f_batch), projector.pool_audio(gamma_batch), projector.tau
    )


class CoarseToFineCascade(nn.Module):
    """Ordered cross-attention refinement face -> hands -> upper -> lower.

    Each stage's queries are that part's latents; keys/values are the
    previous stage's refined output concatenated (along time) with the
    conditioning tokens. Later parts never influence earlier parts. With
    include_face=False the face passes through untouched and the hands stage
    attends to the conditioning tokens alone.
    """

    def __init__(self, dim: int, heads: int = 4, layers_per_stage: int = 2):
        super().__init__()
        self.stages = nn.ModuleDict(
            {part: CrossAttentionStack(dim, heads, layers_per_stage) for part in CASCADE_ORDER}
        )

    def forward(self, latents: PartLatents, ctx: torch.Tensor, include_face: bool = True) -> PartLatents:
        refined: Dict[str, torch.Tensor] = {}
        prev: Optional[torch.Tensor] = None
        for part in CASCADE_ORDER:
            x = latents.get(part)
            if part == "face" and not include_face:
                refined[part] = x
                continue
            kv = ctx if prev is None else torch.cat([prev, ctx], dim=-2)
            refined[part] = self.stages[part](x, kv)
            prev = refined[part]
        return PartLatents(**refined)


class BaseGenerator(nn.Module):
    """Seed pose + speaker + rhythm -> per-part latents -> RVQ codes."""

    def __init__(
        self,
        layout: BodyLayout,
        num_speakers: int,
        dim: int = 64,
        heads: int = 4,
        attn_layers: int = 2,
        num_code_layers: int = 6,
        codebook_size: int = 256,
        audio_dim: int = D_AUDIO,
        beat_dim: int = 4,
        seed_len: int = 4,
        max_latent_frames: int = 512,
    ):
        super().__init__()
        self.layout = layout
        self.num_speakers = num_speakers
        self.dim = dim
        self.num_code_layers = num_code_layers
        self.codebook_size = codebook_size
        self.seed_len = seed_len
        self.speaker_emb = nn.Embedding(num_speakers, dim)
        self.seed_proj = nn.Linear(seed_len * layout.total_channels, dim)
        # one token per latent frame, built from the full 4-frame group (so
        # within-group beat positions survive the downsampling) plus derived
        # beat-relative timing channels
        self.rhythm_proj = nn.Linear((beat_dim + 3 + audio_dim) * LATENT_STRIDE, dim)
        self.context_mlp = MLP(dim, 2 * dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.register_buffer("positions", sinusoidal_positions(max_latent_frames, dim))
        # face enhancement and body-part-aware maps share the (p, rhythm, id) view
        self.part_init = nn.ModuleDict(
            {part: MLP(3 * dim, 2 * dim, dim) for part in PART_NAMES}
        )
        self.cascade = CoarseToFineCascade(dim, heads, attn_layers)
        self.layer1_heads = nn.ModuleDict({part: nn.Linear(dim, codebook_size) for part in PART_NAMES})
        self.partial_proj = nn.ModuleDict({part: nn.Linear(dim, dim) for part in PART_NAMES})
        self.residual_stages = nn.ModuleDict(
            {
                part: nn.ModuleList(SelfAttentionLayer(dim, heads) for _ in range(num_code_layers - 1))
                for part in PART_NAMES
            }
        )
        self.residual_heads = nn.ModuleDict(
            {
                part: nn.ModuleList(
                    nn.Linear(dim, codebook_size) for _ in range(num_code_layers - 1)
                )
                for part in PART_NAMES
            }
        )

    def rhythm_tokens(self, gamma_b: torch.Tensor, gamma_h: torch.Tensor) -> torch.Tensor:
        """(B, N, 4) + (B, N, d_a) -> latent-rate conditioning tokens (B, n, dim)."""
        timing = beat_timing_features(gamma_b[..., 3], self.layout.fps).to(gamma_b.dtype)
        gamma = torch.cat([gamma_b, timing, gamma_h], dim=-1)
        b, n_frames, _ = gamma.shape
        n = n_frames // LATENT_STRIDE
        grouped = gamma[:, : n * LATENT_STRIDE].reshape(b, n, -1)
        return self.rhythm_proj(grouped) + self.positions[:n].to(grouped.dtype)

    def encode_context(
        self,
        seed_pose: torch.Tensor,      # (B, seed_len, D)
        speaker: torch.Tensor,        # (B,) long
        tokens: torch.Tensor,         # (B, n, dim) rhythm tokens
        mask_ratio: float = 0.0,
        mask_rng: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        """Personalized rhythm-aligned latent pose sequence p, (B, n, dim)."""
        if int(speaker.max()) >= self.num_speakers or int(speaker.min()) < 0:
            raise ValueError(
                f"speaker id out of range: {int(speaker.max())} vs table size {self.num_speakers}"
            )
        b, n, _ = tokens.shape
        seed = self.seed_proj(seed_pose.reshape(b, -1))
        spk = self.speaker_emb(speaker)
        p = self.context_mlp(tokens + (seed + spk).unsqueeze(1))
        if mask_ratio > 0.0:
            seed_latents = max(1, self.seed_len // LATENT_STRIDE)
            maskable = n - seed_latents
            k = int(round(mask_ratio * maskable))
            if k > 0:
                scores = torch.rand(b, maskable, generator=mask_rng)
                idx = scores.argsort(dim=1)[:, :k] + seed_latents
                mask = torch.zeros(b, n, dtype=torch.bool)
                mask.scatter_(1, idx, True)
                p = torch.where(mask.unsqueeze(-1), self.mask_token.to(p.dtype).expand_as(p), p)
        return p

    def init_part_latents(self, p: torch.Tensor, tokens: torch.Tensor, speaker: torch.Tensor) -> PartLatents:
        spk = self.speaker_emb(speaker).unsqueeze(1).expand_as(p)
        feats = torch.cat([p, tokens, spk], dim=-1)
        return PartLatents(**{part: self.part_init[part](feats) for part in PART_NAMES})

    def refine(self, latents: PartLatents, tokens: torch.Tensor) -> PartLatents:
        return self.cascade(latents, tokens, include_face=True)

    def predict_codes(
        self,
        refined: PartLatents,
        codecs: Dict[str, "PartCodec"],
        teacher_codes: Optional[Dict[str, torch.Tensor]] = None,
    ) -> Tuple[Dict[str, torch.Tensor], Dict[str, torch.Tensor]]:
        """Layer-1 head plus V-1 residual stages per part.

        Stage v consumes the refined latents plus the summed codebook
        embeddings of layers < v (teacher-forced when teacher_codes given,
        greedy argmax chaining otherwise). Returns (logits, codes), logits
        (B, n, V, K) and codes (B, n, V) per part.
        """
        logits_out: Dict[str, torch.Tensor] = {}
        codes_out: Dict[str, torch.Tensor] = {}
        for part in PART_NAMES:
            codec = codecs[part]
            if codec.cfg.codebook_size != self.codebook_size:
                raise ValueError(
                    f"codec codebook size {codec.cfg.codebook_size} != generator head size {self.codebook_size}"
                )
            if codec.cfg.num_layers != self.num_code_layers:
                raise ValueError(
                    f"codec has {codec.cfg.num_layers} layers, generator predicts {self.num_code_layers}"
                )
            x = refined.get(part)
            layer_logits: List[torch.Tensor] = [self.layer1_heads[part](x)]
            if teacher_codes is not None:
                codes = teacher_codes[part][..., 0]
            else:
                codes = layer_logits[0].argmax(dim=-1)
            entries0 = codec.quantizer.layers[0].entries
            partial = entries0[codes.reshape(-1)].reshape(*codes.shape, -1).detach()
            all_codes = [codes]
            for v in range(1, self.num_code_layers):
                h = self.residual_stages[part][v - 1](x + self.partial_proj[part](partial))
                lv = self.residual_heads[part][v - 1](h)
                layer_logits.append(lv)
                if teacher_codes is not None:
                    codes_v = teacher_codes[part][..., v]
                else:
                    codes_v = lv.argmax(dim=-1)
                entries = codec.quantizer.layers[v].entries
                partial = partial + entries[codes_v.reshape(-1)].reshape(*codes_v.shape, -1).detach()
                all_codes.append(codes_v)
            logits_out[part] = torch.stack(layer_logits, dim=-2)
            codes_out[part] = torch.stack(all_codes, dim=-1)
        return logits_out, codes_out

    def forward(
        self,
        seed_pose: torch.Tensor,
        speaker: torch.Tensor,
        gamma_b: torch.Tensor,
        gamma_h: torch.Tensor,
        codecs: Dict[str, "PartCodec"],
        teacher_codes: Optional[Dict[str, torch.Tensor]] = None,
        mask_ratio: float = 0.0,
        mask_rng: Optional[torch.Generator] = None,
    ):
        tokens = self.rhythm_tokens(gamma_b, gamma_h)
        p = self.encode_context(seed_pose, speaker, tokens, mask_ratio, mask_rng)
        latents = self.init_part_latents(p, tokens, speaker)
        refined = self.refine(latents, tokens)
        logits, codes = self.predict_codes(refined, codecs, teacher_codes)
        return tokens, refined, logits, codes


def code_cross_entropy(logits: Dict[str, torch.Tensor], targets: Dict[str, torch.Tensor]) -> torch.Tensor:
    """Mean CE over parts, latent frames, and code layers."""
    losses = []
    for part, lg in logits.items():
        k = lg.shape[-1]
        losses.append(F.cross_entropy(lg.reshape(-1, k), targets[part].reshape(-1)))
    return torch.stack(losses).mean()
