"""Per-body-part residual vector-quantized autoencoder.

A strided 1D conv encoder maps (N, C) part motion to an (N/4, d) latent
sequence; V codebooks quantize it residually (each layer snaps the running
residual to its nearest entry and the reconstruction is the cumulative sum
of selected entries); a mirrored transposed-conv decoder restores N frames.
Codebooks train by EMA with dead-code reseeding, the encoder/decoder by
reconstruction + commitment loss with straight-through gradients.

Residual layers beyond the first keep entry 0 pinned at the zero vector, so
adding a layer can never increase the residual norm: the telescoping
property holds per sample, not just in expectation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DOWNSAMPLE = 4


@dataclass(frozen=True)
class CodecConfig:
    part: str
    in_channels: int
    latent_dim: int = 64
    hidden: int = 128
    num_layers: int = 6          # V
    codebook_size: int = 256     # K
    dropout_p: float = 0.2       # probability of prefix truncation per batch
    commitment: float = 0.25
    ema_decay: float = 0.99


def config_hash(cfg) -> str:
    doc = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass
class QuantizeResult:
    codes: torch.Tensor            # (B, n, V) long
    z_hat: torch.Tensor            # (B, n, d)
    residual_norms: torch.Tensor   # (B, n, V): ||residual|| after each layer
    residuals: List[torch.Tensor]  # residual fed INTO each active layer (for EMA)
    active_layers: int


class Codebook(nn.Module):
    """One EMA-updated codebook; anchor_zero pins entry 0 at the zero vector."""

    def __init__(self, size: int, dim: int, decay: float = 0.99, anchor_zero: bool = False):
        super().__init__()
        if size < 2:
            raise ValueError("codebook size must be >= 2")
        self.size = size
        self.dim = dim
        self.decay = decay
        self.anchor_zero = anchor_zero
        self.register_buffer("entries", torch.zeros(size, dim))
        self.register_buffer("ema_size", torch.zeros(size))
        self.register_buffer("ema_sum", torch.zeros(size, dim))
        self.register_buffer("initialized", torch.tensor(False))

    def initialize_from(self, samples: torch.Tensor, rng: torch.Generator) -> None:
        flat = samples.reshape(-1, self.dim)
        idx = torch.randint(0, flat.shape[0], (self.size,), generator=rng)
        self.entries.copy_(flat[idx])
        if self.anchor_zero:
            self.entries[0].zero_()
        self.ema_size.fill_(1.0)
        self.ema_sum.copy_(self.entries)
        self.initialized.fill_(True)

    def nearest(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Nearest entry per row of x (..., d) -> (codes, entries[codes])."""
        flat = x.reshape(-1, self.dim)
        d2 = (
            (flat**2).sum(1, keepdim=True)
            - 2.0 * flat @ self.entries.t()
            + (self.entries**2).sum(1)
        )
        codes = d2.argmin(dim=1)
        picked = self.entries[codes].reshape(x.shape)
        return codes.reshape(x.shape[:-1]), picked

    @torch.no_grad()
    def ema_update(self, x: torch.Tensor, codes: torch.Tensor, rng: torch.Generator) -> None:
        flat = x.reshape(-1, self.dim)
        flat_codes = codes.reshape(-1)
        onehot = F.one_hot(flat_codes, self.size).to(flat.dtype)
        counts = onehot.sum(0)
        sums = onehot.t() @ flat
        self.ema_size.mul_(self.decay).add_(counts, alpha=1.0 - self.decay)
        self.ema_sum.mul_(self.decay).add_(sums, alpha=1.0 - self.decay)
        start = 1 if self.anchor_zero else 0
        denom = self.ema_size[start:].clamp(min=1e-7).unsqueeze(1)
        self.entries[start:] = self.ema_sum[start:] / denom
        # reseed dead codes from batch samples
        dead = self.ema_size < 1.0
        if self.anchor_zero:
            dead[0] = False
        n_dead = int(dead.sum())
        if n_dead:
            idx = torch.randint(0, flat.shape[0], (n_dead,), generator=rng)
            self.entries[dead] = flat[idx]
            self.ema_sum[dead] = flat[idx]
            self.ema_size[dead] = 1.0


class ResidualQuantizer(nn.Module):
    """V-layer residual quantization with per-batch prefix-truncation dropout."""

    def __init__(self, num_layers: int, size: int, dim: int, decay: float = 0.99, dropout_p: float = 0.2):
        super().__init__()
        if num_layers < 1:
            raise ValueError("need at least one quantization layer")
        self.num_layers = num_layers
        self.dropout_p = dropout_p
        self.layers = nn.ModuleList(
            [Codebook(size, dim, decay=decay, anchor_zero=(v > 0)) for v in range(num_layers)]
        )

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    def sample_active_layers(self, rng: torch.Generator) -> int:
        if torch.rand((), generator=rng).item() < self.dropout_p:
            return int(torch.randint(1, self.num_layers + 1, (), generator=rng))
        return self.num_layers

    def quantize(self, z: torch.Tensor, active_layers: Optional[int] = None) -> QuantizeResult:
        if z.shape[-1] != self.dim:
            raise ValueError(f"latent dim {z.shape[-1]} does not match codebook dim {self.dim}")
        v_active = active_layers or self.num_layers
        v_active = max(1, min(v_active, self.num_layers))
        residual = z.detach()
        z_hat = torch.zeros_like(residual)
        codes, norms, residuals = [], [], []
        for v in range(v_active):
            residuals.append(residual)
            layer_codes, picked = self.layers[v].nearest(residual)
            z_hat = z_hat + picked
            residual = residual - picked
            codes.append(layer_codes)
            norms.append(residual.norm(dim=-1))
        return QuantizeResult(
            codes=torch.stack(codes, dim=-1),
            z_hat=z_hat,
            residual_norms=torch.stack(norms, dim=-1),
            residuals=residuals,
            active_layers=v_active,
        )

    def dequantize(self, codes: torch.Tensor) -> torch.Tensor:
        """Cumulative sum of the selected entries; exact inverse of quantize's z_hat."""
        if codes.shape[-1] > self.num_layers:
            raise ValueError(f"got {codes.shape[-1]} code layers, quantizer has {self.num_layers}")
        z_hat = None
        for v in range(codes.shape[-1]):
            layer = self.layers[v]
            layer_codes = codes[..., v]
            if int(layer_codes.max()) >= layer.size or int(layer_codes.min()) < 0:
                raise ValueError(f"code index out of range for layer {v} (size {layer.size})")
            picked = layer.entries[layer_codes.reshape(-1)].reshape(*layer_codes.shape, layer.dim)
            z_hat = picked if z_hat is None else z_hat + picked
        return z_hat


def _pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    n = x.shape[1]
    rem = n % multiple
    if rem == 0:
        return x
    pad = multiple - rem
    # reflect-pad along time
    tail = x[:, -pad - 1 : -1].flip(1) if n > pad else x[:, -1:].expand(-1, pad, -1)
    return torch.cat([x, tail], dim=1)


class PartCodec(nn.Module):
    """Encoder / residual quantizer / decoder for one body part."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        c, h, d = cfg.in_channels, cfg.hidden, cfg.latent_dim
        self.encoder = nn.Sequential(
            nn.Conv1d(c, h, kernel_size=3, padding=1),
            nn.GELU(),
            nn.Conv1d(h, h, kernel_size=4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv1d(h, d, kernel_size=4, stride=2, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose1d(d, h, kernel_size=4, stride=2, padding=1),
            nn.GELU(),
            nn.ConvTranspose1d(h, h, kernel_size=4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv1d(h, c, kernel_size=3, padding=1),
        )
        self.quantizer = ResidualQuantizer(
            cfg.num_layers, cfg.codebook_size, d, decay=cfg.ema_decay, dropout_p=cfg.dropout_p
        )

    def encode(self, motion: torch.Tensor) -> torch.Tensor:
        """(B, N, C) part motion -> (B, N/4, d) latents; N < 4 is an error,
        other non-multiples are reflect-padded (crop after decode)."""
        if motion.ndim == 2:
            motion = motion.unsqueeze(0)
        if motion.shape[1] < DOWNSAMPLE:
            raise ValueError(f"clip too short: {motion.shape[1]} frames, need >= {DOWNSAMPLE}")
        motion = _pad_to_multiple(motion, DOWNSAMPLE)
        return self.encoder(motion.transpose(1, 2)).transpose(1, 2)

    def decode(self, z_hat: torch.Tensor) -> torch.Tensor:
        """(B, n, d) -> (B, 4n, C)."""
        if z_hat.ndim == 2:
            z_hat = z_hat.unsqueeze(0)
        return self.decoder(z_hat.transpose(1, 2)).transpose(1, 2)

    def straight_through(self, z: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
        return z + (z_hat - z).detach()

    def reconstruct(self, motion: torch.Tensor) -> torch.Tensor:
        """Full round trip at inference (all V layers), cropped to the input length."""
        single = motion.ndim == 2
        if single:
            motion = motion.unsqueeze(0)
        n = motion.shape[1]
        z = self.encode(motion)
        q = self.quantizer.quantize(z)
        out = self.decode(q.z_hat)[:, :n]
        return out.squeeze(0) if single else out

    def codes_for(self, motion: torch.Tensor) -> torch.Tensor:
        """(N, C) or (B, N, C) -> (n, V) or (B, n, V) ground-truth codes."""
        single = motion.ndim == 2
        z = self.encode(motion)
        codes = self.quantizer.quantize(z).codes
        return codes.squeeze(0) if single else codes


@dataclass
class CodecTrainResult:
    losses: List[Dict[str, float]]   # per-epoch records

    @property
    def final(self) -> Dict[str, float]:
        return self.losses[-1]


def train_codec(
    codec: PartCodec,
    part_motion: Sequence[np.ndarray],
    epochs: int = 30,
    batch_size: int = 16,
    lr: float = 1e-4,
    seed: int = 0,
) -> CodecTrainResult:
    """Reconstruction + commitment training with EMA codebooks.

    part_motion: list of (N, C) arrays (equal N). Aborts on non-finite loss.
    """
    data = torch.tensor(np.stack(part_motion), dtype=torch.float32)
    torch_rng = torch.Generator().manual_seed(seed)
    order_rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(list(codec.encoder.parameters()) + list(codec.decoder.parameters()), lr=lr)
    num = data.shape[0]
    records: List[Dict[str, float]] = []
    for epoch in range(epochs):
        perm = order_rng.permutation(num)
        totals = {"recon": 0.0, "commit": 0.0}
        batches = 0
        for start in range(0, num, batch_size):
            batch = data[perm[start : start + batch_size]]
            z = codec.encode(batch)
            if not bool(codec.quantizer.layers[0].initialized):
                residual = z.detach()
                for layer in codec.quantizer.layers:
                    layer.initialize_from(residual, torch_rng)
                    _, picked = layer.nearest(residual)
                    residual = residual - picked
            v_active = codec.quantizer.sample_active_layers(torch_rng)
            q = codec.quantizer.quantize(z.detach(), active_layers=v_active)
            for v, residual in enumerate(q.residuals):
                codec.quantizer.layers[v].ema_update(residual, q.codes[..., v], torch_rng)
            recon = codec.decode(codec.straight_through(z, q.z_hat))[:, : batch.shape[1]]
            loss_recon = F.mse_loss(recon, batch)
            loss_commit = F.mse_loss(z, q.z_hat.detach())
            loss = loss_recon + codec.cfg.commitment * loss_commit
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"codec training diverged at epoch {epoch}: recon={loss_recon.item()}, "
                    f"commit={loss_commit.item()}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            totals["recon"] += loss_recon.item()
            totals["commit"] += loss_commit.item()
            batches += 1
        records.append(
            {"epoch": epoch, "recon": totals["recon"] / batches, "commit": totals["commit"] / batches}
        )
    return CodecTrainResult(losses=records)


def save_part_codec(codec: PartCodec, path: Path) -> None:
    torch.save(
        {"config": asdict(codec.cfg), "config_hash": config_hash(codec.cfg), "state": codec.state_dict()},
        path,
    )


def load_part_codec(path: Path, expected_hash: Optional[str] = None) -> PartCodec:
    """Rebuild a codec from its checkpoint; refuses a mismatched config hash."""
    blob = torch.load(path, weights_only=False)
    cfg = CodecConfig(**blob["config"])
    if config_hash(cfg) != blob["config_hash"]:
        raise ValueError(f"checkpoint {path} is corrupt: config hash mismatch")
    if expected_hash is not None and blob["config_hash"] != expected_hash:
        raise ValueError(
            f"checkpoint {path} config hash {blob['config_hash']} does not match expected {expected_hash}"
        )
    codec = PartCodec(cfg)
    codec.load_state_dict(blob["state"])
    return codec
