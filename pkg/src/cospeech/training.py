"""Three-stage training orchestration (codecs -> base branch -> sparse
branch, plus the metric embedder), seed-pose masking schedule, stage
checkpoints with config hashes, and line-delimited loss logs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .base_branch import (
    BaseGenerator,
    PartLatents,
    RhythmProjector,
    code_cross_entropy,
    rhythmic_loss_global,
    rhythmic_loss_local,
)
from .corpus import CorpusManifest, corpus_hash, iter_split, load_manifest
from .features import (
    D_AUDIO,
    LATENT_STRIDE,
    FeatureProviders,
    extract_beats,
)
from .fusion import FusionConfig, ModelBundle
from .layout import PART_NAMES, default_layout
from .rvq import CodecConfig, PartCodec, config_hash, load_part_codec, save_part_codec, train_codec
from .metrics import MotionEmbedder, train_embedder
from .sparse_branch import SparseGenerator, gate_loss, pool_labels_to_latent, sparse_losses

STAGES = ("codec", "base", "sparse", "embedder")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-4
    tau: float = 0.1
    beta: float = 0.5
    seed_len: int = 4
    mask_ramp_epochs: int = 120
    mask_cap: float = 0.4
    w_contrastive: float = 0.1
    w_cls: float = 1.0
    w_rec: float = 1.0
    w_gate: float = 1.0
    seed: int = 0
    latent_dim: int = 64
    hidden: int = 128
    proj_dim: int = 128
    heads: int = 4
    attn_layers: int = 2
    codebook_size: int = 256
    num_code_layers: int = 6
    quant_dropout: float = 0.2
    commitment: float = 0.25
    ema_decay: float = 0.99
    enable_rhythmic_consistency: bool = True
    enable_semantic_emphasis: bool = True
    embedder_epochs: int = 30
    window_s: float = 4.0   # training window; clips are cropped randomly to this length
    windows_per_clip: int = 4   # random crops drawn from each clip per epoch

    def window_frames(self, fps: float, clip_frames: int) -> int:
        win = int(round(self.window_s * fps))
        win -= win % LATENT_STRIDE
        return max(LATENT_STRIDE, min(win, clip_frames))

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.seed_len, self.mask_ramp_epochs) <= 0:
            raise ValueError("epochs, batch size, seed length and ramp must be positive")
        if not (0.0 <= self.mask_cap <= 1.0):
            raise ValueError("mask cap must lie in [0, 1]")
        if self.lr <= 0 or self.tau <= 0 or not (0 < self.beta < 1):
            raise ValueError("lr and tau must be positive, beta in (0,1)")

    def hash(self) -> str:
        return config_hash(self)


def desk_config(**overrides) -> TrainConfig:
    """Desk-scale acceptance configuration: 30 epochs per stage, batch 16.

    The learning rate and gate-loss weight are hotter than the paper-scale
    defaults; a few hundred optimizer steps have to do the work of a 200-epoch
    schedule."""
    base = dict(epochs=30, batch_size=16, lr=2e-3, w_gate=8.0, windows_per_clip=6, embedder_epochs=15)
    base.update(overrides)
    return TrainConfig(**base)


def mask_ratio(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to mask_cap over mask_ramp_epochs, then plateau."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(cfg.mask_cap, cfg.mask_cap * epoch / cfg.mask_ramp_epochs)


@dataclass
class SplitFeatures:
    """Everything the generator stages need, stacked over one corpus split."""

    ids: List[str]
    motion: np.ndarray      # (B, N, D)
    gamma_b: np.ndarray     # (B, N, 4)
    gamma_h: np.ndarray     # (B, N, d_a)
    phi_l: np.ndarray       # (B, N, d_l)
    phi_g: np.ndarray       # (B, d_g)
    phi_e: np.ndarray       # (B, d_e)
    labels: np.ndarray      # (B, N)
    speaker: np.ndarray     # (B,)

    def __len__(self) -> int:
        return len(self.ids)


def load_split_features(
    corpus_dir: Path,
    split: str,
    manifest: Optional[CorpusManifest] = None,
    providers: Optional[FeatureProviders] = None,
) -> SplitFeatures:
    manifest = manifest or load_manifest(corpus_dir)
    params = manifest.params
    providers = providers or FeatureProviders()
    rows = {k: [] for k in ("motion", "gamma_b", "gamma_h", "phi_l", "phi_g", "phi_e", "labels", "speaker")}
    ids = []
    for cid, clip in iter_split(corpus_dir, split, manifest):
        n = clip.motion.num_frames
        ids.append(cid)
        rows["motion"].append(clip.motion.values)
        rows["gamma_b"].append(extract_beats(clip.audio, clip.sample_rate, params.fps, n))
        rows["gamma_h"].append(
            providers.audio_embedding(cid, clip.audio, clip.sample_rate, params.fps, n)
        )
        phi_l, phi_g = providers.transcript_features(cid, clip.words, params.vocab_size, params.fps, n)
        rows["phi_l"].append(phi_l)
        rows["phi_g"].append(phi_g)
        rows["phi_e"].append(providers.emotion_features(cid, clip.emotion, params.num_emotions))
        rows["labels"].append(clip.labels.binary())
        rows["speaker"].append(clip.speaker)
    if not ids:
        raise ValueError(f"split '{split}' has no clips")
    return SplitFeatures(
        ids=ids,
        motion=np.stack(rows["motion"]).astype(np.float32),
        gamma_b=np.stack(rows["gamma_b"]).astype(np.float32),
        gamma_h=np.stack(rows["gamma_h"]).astype(np.float32),
        phi_l=np.stack(rows["phi_l"]).astype(np.float32),
        phi_g=np.stack(rows["phi_g"]).astype(np.float32),
        phi_e=np.stack(rows["phi_e"]).astype(np.float32),
        labels=np.stack(rows["labels"]).astype(np.float32),
        speaker=np.asarray(rows["speaker"], dtype=np.int64),
    )


def codec_config_for(cfg: TrainConfig, part: str, width: int) -> CodecConfig:
    return CodecConfig(
        part=part,
        in_channels=width,
        latent_dim=cfg.latent_dim,
        hidden=cfg.hidden,
        num_layers=cfg.num_code_layers,
        codebook_size=cfg.codebook_size,
        dropout_p=cfg.quant_dropout,
        commitment=cfg.commitment,
        ema_decay=cfg.ema_decay,
    )


def stage_paths(work_dir: Path) -> Dict[str, Path]:
    work_dir = Path(work_dir)
    paths = {f"codec_{p}": work_dir / f"codec_{p}.pt" for p in PART_NAMES}
    paths.update(
        base=work_dir / "base.pt",
        sparse=work_dir / "sparse.pt",
        embedder=work_dir / "embedder.pt",
        logs=work_dir / "logs",
    )
    return paths


def _write_log(log_dir: Path, stage: str, records: List[dict]) -> None:
    log_dir.mkdir(parents=True, exist_ok=True)
    with open(log_dir / f"{stage}.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing prerequisite checkpoint: {what} ({path})")
    return path


def save_stage_checkpoint(path: Path, stage: str, payload: dict, cfg: TrainConfig, c_hash: str, epoch: int) -> None:
    torch.save(
        {
            "stage": stage,
            "config": dataclasses.asdict(cfg),
            "config_hash": cfg.hash(),
            "corpus_hash": c_hash,
            "epoch": epoch,
            **payload,
        },
        path,
    )


def load_stage_checkpoint(path: Path, expected_hash: Optional[str] = None) -> dict:
    blob = torch.load(path, weights_only=False)
    if expected_hash is not None and blob["config_hash"] != expected_hash:
        raise ValueError(
            f"checkpoint {path} was trained under config hash {blob['config_hash']}, "
            f"expected {expected_hash}"
        )
    return blob


def _load_codecs(work_dir: Path, frozen: bool = True) -> Dict[str, PartCodec]:
    paths = stage_paths(work_dir)
    codecs = {}
    for part in PART_NAMES:
        codecs[part] = load_part_codec(_require(paths[f"codec_{part}"], f"codec ({part})"))
        if frozen:
            codecs[part].eval()
            for prm in codecs[part].parameters():
                prm.requires_grad_(False)
    return codecs


def _precompute_codes(
    codecs: Dict[str, PartCodec], motion: np.ndarray, layout
) -> Tuple[Dict[str, torch.Tensor], Dict[str, torch.Tensor]]:
    """Frozen-codec ground-truth codes and latents for every clip in a split."""
    codes, latents = {}, {}
    with torch.no_grad():
        for part in PART_NAMES:
            sl = layout.channel_slice(part)
            x = torch.tensor(motion[:, :, sl])
            z = codecs[part].encode(x)
            q = codecs[part].quantizer.quantize(z)
            codes[part] = q.codes
            latents[part] = z
    return codes, latents


def train_codec_stage(
    corpus_dir: Path, work_dir: Path, cfg: TrainConfig, providers: Optional[FeatureProviders] = None
) -> List[dict]:
    manifest = load_manifest(corpus_dir)
    layout = default_layout(fps=manifest.params.fps)
    feats = load_split_features(corpus_dir, "train", manifest, providers)
    paths = stage_paths(work_dir)
    Path(work_dir).mkdir(parents=True, exist_ok=True)
    records: List[dict] = []
    for part in PART_NAMES:
        sl = layout.channel_slice(part)
        torch.manual_seed(cfg.seed)
        codec = PartCodec(codec_config_for(cfg, part, layout.part_width(part)))
        result = train_codec(
            codec,
            [feats.motion[i, :, sl] for i in range(len(feats))],
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            seed=cfg.seed,
        )
        save_part_codec(codec, paths[f"codec_{part}"])
        for rec in result.losses:
            records.append({"stage": "codec", "part": part, **rec})
    _write_log(paths["logs"], "codec", records)
    return records


def train_base_stage(
    corpus_dir: Path, work_dir: Path, cfg: TrainConfig, providers: Optional[FeatureProviders] = None
) -> List[dict]:
    manifest = load_manifest(corpus_dir)
    layout = default_layout(fps=manifest.params.fps)
    c_hash = corpus_hash(manifest)
    codecs = _load_codecs(work_dir)
    feats = load_split_features(corpus_dir, "train", manifest, providers)
    gt_codes, _ = _precompute_codes(codecs, feats.motion, layout)

    torch.manual_seed(cfg.seed)
    model = BaseGenerator(
        layout,
        num_speakers=manifest.params.num_speakers,
        dim=cfg.latent_dim,
        heads=cfg.heads,
        attn_layers=cfg.attn_layers,
        num_code_layers=cfg.num_code_layers,
        codebook_size=cfg.codebook_size,
        seed_len=cfg.seed_len,
    )
    projector = RhythmProjector(cfg.latent_dim, D_AUDIO, cfg.proj_dim, cfg.tau)
    params = list(model.parameters()) + list(projector.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)

    motion = torch.tensor(feats.motion)
    gamma_b = torch.tensor(feats.gamma_b)
    gamma_h = torch.tensor(feats.gamma_h)
    speaker = torch.tensor(feats.speaker)
    n_frames = motion.shape[1]
    win = cfg.window_frames(manifest.params.fps, n_frames)
    n_lat_win = win // LATENT_STRIDE

    order_rng = np.random.default_rng([cfg.seed, 1])
    mask_rng = torch.Generator().manual_seed(cfg.seed + 101)
    records: List[dict] = []
    for epoch in range(cfg.epochs):
        ratio = mask_ratio(epoch, cfg)
        perm = np.concatenate([order_rng.permutation(len(feats)) for _ in range(cfg.windows_per_clip)])
        sums = {"ce": 0.0, "local": 0.0, "global": 0.0, "total": 0.0}
        batches = 0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            if len(idx) < 2:
                continue   # the global contrastive term needs in-batch negatives
            # random 4-frame-aligned window per clip: phase augmentation, and
            # the window's first frames play the seed-pose role
            starts = order_rng.integers(0, (n_frames - win) // LATENT_STRIDE + 1, size=len(idx))
            starts *= LATENT_STRIDE
            b_motion = torch.stack([motion[i, st : st + win] for i, st in zip(idx, starts)])
            b_gb = torch.stack([gamma_b[i, st : st + win] for i, st in zip(idx, starts)])
            b_gh = torch.stack([gamma_h[i, st : st + win] for i, st in zip(idx, starts)])
            seed_pose = b_motion[:, : cfg.seed_len]
            teacher = {
                p: torch.stack(
                    [gt_codes[p][i, st // LATENT_STRIDE : st // LATENT_STRIDE + n_lat_win]
                     for i, st in zip(idx, starts)]
                )
                for p in PART_NAMES
            }
            _, refined, logits, _ = model(
                seed_pose, speaker[idx], b_gb, b_gh, codecs,
                teacher_codes=teacher, mask_ratio=ratio, mask_rng=mask_rng,
            )
            ce = code_cross_entropy(logits, teacher)
            local = torch.zeros(())
            glob = torch.zeros(())
            if cfg.enable_rhythmic_consistency:
                g_ds = b_gh.reshape(len(idx), n_lat_win, LATENT_STRIDE, -1).mean(2)
                local = rhythmic_loss_local(refined.face, g_ds, projector) + rhythmic_loss_local(
                    refined.hands, g_ds, projector
                )
                glob = rhythmic_loss_global(refined.face, g_ds, projector) + rhythmic_loss_global(
                    refined.hands, g_ds, projector
                )
            loss = ce + cfg.w_contrastive * (local + glob)
            if not torch.isfinite(loss):
                raise RuntimeError(f"base stage diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["ce"] += ce.item()
            sums["local"] += float(local.detach())
            sums["global"] += float(glob.detach())
            sums["total"] += loss.item()
            batches += 1
        records.append({"stage": "base", "epoch": epoch, "mask_ratio": ratio,
                        **{k: v / batches for k, v in sums.items()}})
    paths = stage_paths(work_dir)
    save_stage_checkpoint(
        paths["base"], "base",
        {"state": model.state_dict(), "projector_state": projector.state_dict(),
         "num_speakers": manifest.params.num_speakers},
        cfg, c_hash, cfg.epochs - 1,
    )
    _write_log(paths["logs"], "base", records)
    return records


def train_sparse_stage(
    corpus_dir: Path, work_dir: Path, cfg: TrainConfig, providers: Optional[FeatureProviders] = None
) -> List[dict]:
    manifest = load_manifest(corpus_dir)
    layout = default_layout(fps=manifest.params.fps)
    c_hash = corpus_hash(manifest)
    codecs = _load_codecs(work_dir)
    paths = stage_paths(work_dir)
    base_blob = load_stage_checkpoint(_require(paths["base"], "base"), expected_hash=cfg.hash())
    base = _rebuild_base(base_blob, layout, cfg)
    base.eval()
    for prm in base.parameters():
        prm.requires_grad_(False)

    feats = load_split_features(corpus_dir, "train", manifest, providers)
    gt_codes, gt_latents = _precompute_codes(codecs, feats.motion, layout)

    torch.manual_seed(cfg.seed + 2)
    model = SparseGenerator(
        dim=cfg.latent_dim,
        heads=cfg.heads,
        attn_layers=cfg.attn_layers,
        num_code_layers=cfg.num_code_layers,
        codebook_size=cfg.codebook_size,
    )
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    motion = torch.tensor(feats.motion)
    gamma_b = torch.tensor(feats.gamma_b)
    gamma_h = torch.tensor(feats.gamma_h)
    phi_l = torch.tensor(feats.phi_l)
    phi_g = torch.tensor(feats.phi_g)
    phi_e = torch.tensor(feats.phi_e)
    speaker = torch.tensor(feats.speaker)
    pooled_labels = torch.tensor(
        np.stack([pool_labels_to_latent(feats.labels[i]) for i in range(len(feats))]),
        dtype=torch.float32,
    )
    n_frames = motion.shape[1]
    win = cfg.window_frames(manifest.params.fps, n_frames)
    n_lat_win = win // LATENT_STRIDE

    order_rng = np.random.default_rng([cfg.seed, 2])
    records: List[dict] = []
    for epoch in range(cfg.epochs):
        perm = np.concatenate([order_rng.permutation(len(feats)) for _ in range(cfg.windows_per_clip)])
        sums = {"gate": 0.0, "cls": 0.0, "rec": 0.0, "total": 0.0, "masked_frames": 0.0}
        batches = 0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            starts = order_rng.integers(0, (n_frames - win) // LATENT_STRIDE + 1, size=len(idx))
            starts *= LATENT_STRIDE
            lat = starts // LATENT_STRIDE
            b_motion = torch.stack([motion[i, st : st + win] for i, st in zip(idx, starts)])
            b_gb = torch.stack([gamma_b[i, st : st + win] for i, st in zip(idx, starts)])
            b_gh = torch.stack([gamma_h[i, st : st + win] for i, st in zip(idx, starts)])
            b_phi_l = torch.stack([phi_l[i, st : st + win] for i, st in zip(idx, starts)])
            b_labels = torch.stack(
                [pooled_labels[i, lt : lt + n_lat_win] for i, lt in zip(idx, lat)]
            )
            with torch.no_grad():
                tokens = base.rhythm_tokens(b_gb, b_gh)
                p_ctx = base.encode_context(b_motion[:, : cfg.seed_len], speaker[idx], tokens)
                refined = base.refine(base.init_part_latents(p_ctx, tokens, speaker[idx]), tokens)
            _, psi, _, logits, _, blends = model(b_phi_l, phi_g[idx], phi_e[idx], b_gh, refined)
            l_gate = gate_loss(psi, b_labels)
            body_codes = {
                p: torch.stack([gt_codes[p][i, lt : lt + n_lat_win] for i, lt in zip(idx, lat)])
                for p in logits
            }
            body_latents = {
                p: torch.stack([gt_latents[p][i, lt : lt + n_lat_win] for i, lt in zip(idx, lat)])
                for p in logits
            }
            l_cls, l_rec, n_masked = sparse_losses(logits, body_codes, blends, body_latents, psi, cfg.beta)
            loss = cfg.w_gate * l_gate + cfg.w_cls * l_cls + cfg.w_rec * l_rec
            if not torch.isfinite(loss):
                raise RuntimeError(f"sparse stage diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["gate"] += l_gate.item()
            sums["cls"] += float(l_cls.detach())
            sums["rec"] += float(l_rec.detach())
            sums["total"] += loss.item()
            sums["masked_frames"] += n_masked
            batches += 1
        records.append({"stage": "sparse", "epoch": epoch,
                        **{k: v / batches for k, v in sums.items()}})
    save_stage_checkpoint(
        paths["sparse"], "sparse", {"state": model.state_dict()}, cfg, c_hash, cfg.epochs - 1
    )
    _write_log(paths["logs"], "sparse", records)
    return records


def train_embedder_stage(corpus_dir: Path, work_dir: Path, cfg: TrainConfig) -> List[dict]:
    manifest = load_manifest(corpus_dir)
    c_hash = corpus_hash(manifest)
    clips = [clip.motion.values for _, clip in iter_split(corpus_dir, "train", manifest)]
    model, tag = train_embedder(
        clips,
        channels=clips[0].shape[1],
        corpus_hash=c_hash,
        epochs=cfg.embedder_epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
    )
    paths = stage_paths(work_dir)
    Path(work_dir).mkdir(parents=True, exist_ok=True)
    save_stage_checkpoint(
        paths["embedder"], "embedder",
        {"state": model.state_dict(), "channels": clips[0].shape[1]},
        cfg, tag, cfg.embedder_epochs - 1,
    )
    rec = [{"stage": "embedder", "epochs": cfg.embedder_epochs, "corpus_hash": tag}]
    _write_log(paths["logs"], "embedder", rec)
    return rec


def train_stage(
    stage: str,
    corpus_dir: Path,
    work_dir: Path,
    cfg: TrainConfig,
    providers: Optional[FeatureProviders] = None,
) -> List[dict]:
    """Run one training stage; prerequisite checkpoints must already exist."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage '{stage}', expected one of {STAGES}")
    if stage == "codec":
        return train_codec_stage(corpus_dir, work_dir, cfg, providers)
    if stage == "base":
        return train_base_stage(corpus_dir, work_dir, cfg, providers)
    if stage == "sparse":
        return train_sparse_stage(corpus_dir, work_dir, cfg, providers)
    return train_embedder_stage(corpus_dir, work_dir, cfg)


def _rebuild_base(blob: dict, layout, cfg: TrainConfig) -> BaseGenerator:
    model = BaseGenerator(
        layout,
        num_speakers=blob["num_speakers"],
        dim=cfg.latent_dim,
        heads=cfg.heads,
        attn_layers=cfg.attn_layers,
        num_code_layers=cfg.num_code_layers,
        codebook_size=cfg.codebook_size,
        seed_len=cfg.seed_len,
    )
    model.load_state_dict(blob["state"])
    return model


def load_bundle(work_dir: Path, cfg: TrainConfig, fps: float = 30.0, require_sparse: bool = True) -> ModelBundle:
    """Assemble generation-ready models from stage checkpoints; every
    checkpoint must carry the same config hash."""
    layout = default_layout(fps=fps)
    paths = stage_paths(work_dir)
    codecs = _load_codecs(work_dir)
    blob = load_stage_checkpoint(_require(paths["base"], "base"), expected_hash=cfg.hash())
    base = _rebuild_base(blob, layout, cfg)
    base.eval()
    sparse = None
    if require_sparse or paths["sparse"].exists():
        sparse_blob = load_stage_checkpoint(_require(paths["sparse"], "sparse"), expected_hash=cfg.hash())
        sparse = SparseGenerator(
            dim=cfg.latent_dim,
            heads=cfg.heads,
            attn_layers=cfg.attn_layers,
            num_code_layers=cfg.num_code_layers,
            codebook_size=cfg.codebook_size,
        )
        sparse.load_state_dict(sparse_blob["state"])
        sparse.eval()
    return ModelBundle(
        layout=layout,
        codecs=codecs,
        base=base,
        sparse=sparse,
        config_hash=cfg.hash(),
        fusion=FusionConfig(beta=cfg.beta),
        window_s=cfg.window_s,
    )


def load_embedder(work_dir: Path, expected_corpus_hash: Optional[str] = None) -> Tuple[MotionEmbedder, List[str]]:
    """Load the frozen FGD embedder; returns (model, warnings). A corpus-hash
    mismatch is recorded as a warning, not an error."""
    paths = stage_paths(work_dir)
    blob = load_stage_checkpoint(_require(paths["embedder"], "embedder"))
    model = MotionEmbedder(blob["channels"])
    model.load_state_dict(blob["state"])
    model.eval()
    warnings = []
    if expected_corpus_hash is not None and blob["corpus_hash"] != expected_corpus_hash:
        warnings.append(
            f"embedder was trained on corpus {blob['corpus_hash']}, evaluating corpus "
            f"{expected_corpus_hash}; FGD values may not be comparable"
        )
    return model, warnings
