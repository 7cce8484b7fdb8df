"""Semantic branch: fuses text/emotion/audio cues into f_t, scores each
latent frame with the sem-gate (psi), weights features and losses by that
score, refines body-part latents through the shared cascade (face excluded),
and emits sparse codes by alpha-blending toward the base latents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .base_branch import BODY_PARTS, CoarseToFineCascade, PartLatents
from .features import D_AUDIO, D_EMOTION, D_TEXT_GLOBAL, D_TEXT_LOCAL, LATENT_STRIDE
from .nn_blocks import MLP

PSI_EPS = 1e-12


@dataclass
class SemanticScore:
    """Per-latent-frame score psi in (0,1); the frame-rate view repeats x4."""

    latent: np.ndarray

    @property
    def frames(self) -> np.ndarray:
        return np.repeat(self.latent, LATENT_STRIDE)


class SemGate(nn.Module):
    """Scores concat(f_t, downsampled gamma_h) per latent frame, squashed to (0,1)."""

    def __init__(self, dim: int, audio_dim: int = D_AUDIO, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim + audio_dim, hidden), nn.GELU(), nn.Linear(hidden, 1)
        )

    def forward(self, f_t: torch.Tensor, gamma_h_ds: torch.Tensor) -> torch.Tensor:
        logits = self.net(torch.cat([f_t, gamma_h_ds], dim=-1)).squeeze(-1)
        return torch.sigmoid(logits)


def feature_weight(f_t: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
    """Feature weighting: scale each latent frame's fused features by psi."""
    return f_t * psi.unsqueeze(-1)


def pool_labels_to_latent(labels: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Binarize, then max-pool over each group of 4 motion frames: an event
    anywhere in the group marks the latent frame."""
    binary = (np.asarray(labels, dtype=np.float64) > threshold).astype(np.float64)
    n = binary.shape[0]
    if n % LATENT_STRIDE:
        pad = LATENT_STRIDE - n % LATENT_STRIDE
        binary = np.concatenate([binary, np.zeros(pad)])
    return binary.reshape(-1, LATENT_STRIDE).max(axis=1)


def gate_loss(psi: torch.Tensor, pooled_labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy between psi and pooled binary labels."""
    if psi.shape != pooled_labels.shape:
        raise ValueError(f"psi shape {tuple(psi.shape)} != labels shape {tuple(pooled_labels.shape)}")
    psi = psi.clamp(PSI_EPS, 1.0 - PSI_EPS)
    return F.binary_cross_entropy(psi, pooled_labels)


def sparse_losses(
    logits: Dict[str, torch.Tensor],       # (B, n, V, K) per body part
    target_codes: Dict[str, torch.Tensor], # (B, n, V)
    blended: Dict[str, torch.Tensor],      # (B, n, d) blended latents
    target_latents: Dict[str, torch.Tensor],
    psi: torch.Tensor,                     # (B, n)
    beta: float,
) -> Tuple[torch.Tensor, torch.Tensor, int]:
    """Code CE and latent-reconstruction MSE restricted to frames with
    psi > beta; the mask is a constant for gradient purposes. Returns
    (cls, rec, qualifying_frame_count); both losses are 0 when none qualify.
    """
    mask = (psi.detach() > beta)
    count = int(mask.sum())
    if count == 0:
        zero = psi.sum() * 0.0
        return zero, zero.clone(), 0
    cls_terms, rec_terms = [], []
    for part in logits:
        lg = logits[part][mask]                   # (M, V, K)
        tg = target_codes[part][mask]             # (M, V)
        cls_terms.append(F.cross_entropy(lg.reshape(-1, lg.shape[-1]), tg.reshape(-1)))
        rec_terms.append(F.mse_loss(blended[part][mask], target_latents[part][mask]))
    return torch.stack(cls_terms).mean(), torch.stack(rec_terms).mean(), count


class SparseGenerator(nn.Module):
    """Fuse semantics, gate, refine body latents, alpha-blend into codes."""

    def __init__(
        self,
        dim: int = 64,
        heads: int = 4,
        attn_layers: int = 2,
        num_code_layers: int = 6,
        codebook_size: int = 256,
        audio_dim: int = D_AUDIO,
        text_local_dim: int = D_TEXT_LOCAL,
        text_global_dim: int = D_TEXT_GLOBAL,
        emotion_dim: int = D_EMOTION,
    ):
        super().__init__()
        self.dim = dim
        self.num_code_layers = num_code_layers
        self.codebook_size = codebook_size
        self.local_proj = nn.Linear(text_local_dim, dim)
        self.global_proj = nn.Linear(text_global_dim, dim)
        self.emotion_proj = nn.Linear(emotion_dim, dim)
        self.audio_proj = nn.Linear(audio_dim, dim)
        self.mixer = nn.Linear(4 * dim, dim)
        self.gate = SemGate(dim, audio_dim)
        self.cascade = CoarseToFineCascade(dim, heads, attn_layers)
        self.blend_heads = nn.ModuleDict(
            {part: MLP(dim, 2 * dim, num_code_layers * codebook_size) for part in BODY_PARTS}
        )

    def fuse_semantic(
        self,
        phi_l: torch.Tensor,    # (B, N, d_l) frame-rate
        phi_g: torch.Tensor,    # (B, d_g)
        phi_e: torch.Tensor,    # (B, d_e)
        gamma_h: torch.Tensor,  # (B, N, d_a) frame-rate
    ) -> torch.Tensor:
        """Comprehensive semantic representation f_t at latent rate (B, n, dim);
        clip-level vectors broadcast to every latent frame."""
        b, n_frames, _ = phi_l.shape
        n = n_frames // LATENT_STRIDE
        l_ds = phi_l[:, : n * LATENT_STRIDE].reshape(b, n, LATENT_STRIDE, -1).mean(dim=2)
        a_ds = gamma_h[:, : n * LATENT_STRIDE].reshape(b, n, LATENT_STRIDE, -1).mean(dim=2)
        parts = [
            self.local_proj(l_ds),
            self.global_proj(phi_g).unsqueeze(1).expand(b, n, self.dim),
            self.emotion_proj(phi_e).unsqueeze(1).expand(b, n, self.dim),
            self.audio_proj(a_ds),
        ]
        return self.mixer(torch.cat(parts, dim=-1))

    def gate_score(self, f_t: torch.Tensor, gamma_h_ds: torch.Tensor) -> torch.Tensor:
        return self.gate(f_t, gamma_h_ds)

    def sparse_latents(self, f_t_weighted: torch.Tensor, base_latents: PartLatents) -> PartLatents:
        """Body-only cascade conditioned on the weighted semantics; the face
        latent passes through from the base branch untouched."""
        return self.cascade(base_latents, f_t_weighted, include_face=False)

    def blend_codes(
        self, f_s: PartLatents, f_b: PartLatents, psi: torch.Tensor
    ) -> Tuple[Dict[str, torch.Tensor], Dict[str, torch.Tensor], Dict[str, torch.Tensor]]:
        """Per body part: head(psi*f_s + (1-psi)*f_b) -> (B, n, V, K) logits.

        Returns (logits, codes, blended latents)."""
        alpha = psi.unsqueeze(-1)
        logits, codes, blends = {}, {}, {}
        for part in BODY_PARTS:
            blend = alpha * f_s.get(part) + (1.0 - alpha) * f_b.get(part)
            lg = self.blend_heads[part](blend)
            lg = lg.reshape(*blend.shape[:-1], self.num_code_layers, self.codebook_size)
            logits[part] = lg
            codes[part] = lg.argmax(dim=-1)
            blends[part] = blend
        return logits, codes, blends

    def forward(
        self,
        phi_l: torch.Tensor,
        phi_g: torch.Tensor,
        phi_e: torch.Tensor,
        gamma_h: torch.Tensor,
        base_latents: PartLatents,
    ):
        b, n_frames, _ = gamma_h.shape
        n = base_latents.face.shape[1]
        gamma_ds = gamma_h[:, : n * LATENT_STRIDE].reshape(b, n, LATENT_STRIDE, -1).mean(dim=2)
        f_t = self.fuse_semantic(phi_l, phi_g, phi_e, gamma_h)
        psi = self.gate_score(f_t, gamma_ds)
        f_t_weighted = feature_weight(f_t, psi)
        f_s = self.sparse_latents(f_t_weighted, base_latents)
        logits, codes, blends = self.blend_codes(f_s, base_latents, psi)
        return f_t, psi, f_s, logits, codes, blends
