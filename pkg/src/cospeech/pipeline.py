"""Split-level generation and evaluation: the glue between trained model
bundles, the corpus, and the metric suite."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .clips import ClipRecord
from .corpus import CorpusManifest, CorpusParams, corpus_hash, iter_split, load_manifest
from .features import FeatureProviders, beat_times, extract_audio_embedding, extract_beats
from .fusion import (
    FusionConfig,
    GenerationContext,
    GenerationResult,
    ModelBundle,
    SemanticInputs,
    generate_clip,
    generate_long,
    semantics_from_annotations,
)
from .metrics import (
    BC_SIGMA_S,
    FGD_CAVEAT,
    EvaluationReport,
    MotionEmbedder,
    beat_consistency,
    diversity,
    embed_clips,
    extract_kinematic_beats,
    face_lvd,
    face_mse,
    fgd,
    semgate_accuracy,
)


def clip_context(clip: ClipRecord, params: CorpusParams, seed_len: int = 4,
                 audio: Optional[np.ndarray] = None,
                 providers: Optional[FeatureProviders] = None,
                 clip_id: Optional[str] = None) -> GenerationContext:
    """GenerationContext for a corpus clip; audio may be overridden (controls)."""
    n = clip.motion.num_frames
    waveform = clip.audio if audio is None else audio
    providers = providers or FeatureProviders()
    return GenerationContext(
        seed_pose=clip.motion.values[:seed_len],
        speaker=clip.speaker,
        gamma_b=extract_beats(waveform, clip.sample_rate, params.fps, n),
        gamma_h=providers.audio_embedding(clip_id, waveform, clip.sample_rate, params.fps, n),
        frame_count=n,
    )


def clip_semantics(
    clip: ClipRecord,
    params: CorpusParams,
    providers: Optional[FeatureProviders] = None,
    clip_id: Optional[str] = None,
) -> SemanticInputs:
    n = clip.motion.num_frames
    providers = providers or FeatureProviders()
    phi_l, phi_g = providers.transcript_features(clip_id, clip.words, params.vocab_size, params.fps, n)
    phi_e = providers.emotion_features(clip_id, clip.emotion, params.num_emotions)
    return SemanticInputs(phi_l=phi_l, phi_g=phi_g, phi_e=phi_e)


def generate_split(
    bundle: ModelBundle,
    corpus_dir: Path,
    split: str = "test",
    manifest: Optional[CorpusManifest] = None,
    base_only: bool = False,
    audio_map: Optional[Dict[str, np.ndarray]] = None,
    cfg: Optional[FusionConfig] = None,
    providers: Optional[FeatureProviders] = None,
) -> Dict[str, Tuple[ClipRecord, GenerationResult]]:
    """Generate motion for every clip of a split via windowed (seed-chained)
    generation; audio_map reroutes audio per clip id (shuffled controls)."""
    manifest = manifest or load_manifest(corpus_dir)
    params = manifest.params
    providers = providers or FeatureProviders()
    out: Dict[str, Tuple[ClipRecord, GenerationResult]] = {}
    use_bundle = bundle.without_sparse() if base_only else bundle
    for cid, clip in iter_split(corpus_dir, split, manifest):
        audio = audio_map.get(cid) if audio_map else clip.audio
        semantics = None if base_only else clip_semantics(clip, params, providers, cid)
        n = clip.motion.num_frames
        padded = -(-n // 4) * 4
        need = int(round(padded * clip.sample_rate / params.fps)) + 1
        buf = audio if len(audio) >= need else np.concatenate([audio, np.zeros(need - len(audio))])
        feats = (
            extract_beats(buf, clip.sample_rate, params.fps, padded),
            providers.audio_embedding(cid, buf, clip.sample_rate, params.fps, padded),
        )
        result = generate_long(
            audio,
            clip.sample_rate,
            use_bundle,
            speaker=clip.speaker,
            window_s=use_bundle.window_s,
            semantics=semantics,
            cfg=cfg,
            seed_pose=clip.motion.values[: use_bundle.base.seed_len],
            frame_count=n,
            features=feats,
        )
        out[cid] = (clip, result)
    return out


def evaluate_split(
    corpus_dir: Path,
    results: Dict[str, Tuple[ClipRecord, GenerationResult]],
    embedder: MotionEmbedder,
    manifest: Optional[CorpusManifest] = None,
    sigma_s: float = BC_SIGMA_S,
    beta: float = 0.5,
    warnings: Optional[List[str]] = None,
) -> EvaluationReport:
    """Metric suite over generated clips, paired with their GT counterparts."""
    manifest = manifest or load_manifest(corpus_dir)
    params = manifest.params
    ids = sorted(results)
    gt = [results[c][0].motion.values for c in ids]
    gen = [results[c][1].motion.values for c in ids]
    real_emb = embed_clips(embedder, gt)
    gen_emb = embed_clips(embedder, gen)

    bc_vals, mse_vals, lvd_vals, acc_vals = [], [], [], []
    for cid in ids:
        clip, result = results[cid]
        gb = extract_beats(clip.audio, clip.sample_rate, params.fps, clip.motion.num_frames)
        audio_b = beat_times(gb, params.fps)
        if audio_b.size:
            kin_b = extract_kinematic_beats(result.motion)
            bc_vals.append(beat_consistency(audio_b, kin_b, sigma_s=sigma_s))
        mse_vals.append(face_mse(clip.motion, result.motion))
        lvd_vals.append(face_lvd(clip.motion, result.motion))
        if result.psi is not None:
            psi_frames = result.psi.frames[: clip.motion.num_frames]
            acc_vals.append(semgate_accuracy(psi_frames, clip.labels, beta=beta))

    metrics = {
        "fgd": fgd(real_emb, gen_emb),
        "bc": float(np.mean(bc_vals)) if bc_vals else float("nan"),
        "div": diversity(gen) if len(gen) >= 2 else 0.0,
        "face_mse": float(np.mean(mse_vals)),
        "face_lvd": float(np.mean(lvd_vals)),
        "num_clips": float(len(ids)),
    }
    if acc_vals:
        metrics["semgate_acc"] = float(np.mean(acc_vals))
    return EvaluationReport(
        metrics=metrics,
        config={"sigma_s": sigma_s, "beta": beta, "corpus_hash": corpus_hash(manifest)},
        caveats=[FGD_CAVEAT],
        warnings=list(warnings or []),
    )


def gate_precision_recall(
    results: Dict[str, Tuple[ClipRecord, GenerationResult]], beta: float = 0.5
) -> Tuple[float, float, float]:
    """(accuracy, precision, recall) of thresholded psi against planted labels,
    pooled over every clip and frame."""
    tp = fp = fn = tn = 0
    for clip, result in results.values():
        if result.psi is None:
            raise ValueError("generation results carry no semantic scores")
        n = clip.motion.num_frames
        pred = result.psi.frames[:n] > beta
        truth = clip.labels.binary()[:n] > 0.5
        tp += int(np.sum(pred & truth))
        fp += int(np.sum(pred & ~truth))
        fn += int(np.sum(~pred & truth))
        tn += int(np.sum(~pred & ~truth))
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return accuracy, precision, recall


def shuffled_audio_map(
    corpus_dir: Path, split: str = "test", manifest: Optional[CorpusManifest] = None, seed: int = 0
) -> Dict[str, np.ndarray]:
    """Seeded derangement of the split's audio: clip i is generated from some
    other clip's audio while being scored against its own beats."""
    manifest = manifest or load_manifest(corpus_dir)
    clips = dict(iter_split(corpus_dir, split, manifest))
    ids = sorted(clips)
    rng = np.random.default_rng(seed)
    perm = list(range(len(ids)))
    while any(i == p for i, p in enumerate(perm)):
        perm = rng.permutation(len(ids)).tolist()
    return {ids[i]: clips[ids[p]].audio for i, p in enumerate(perm)}
