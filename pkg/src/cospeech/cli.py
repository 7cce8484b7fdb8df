"""Command-line surface: make-corpus, train, generate, evaluate, export.

Config files are flat key=value text mirroring TrainConfig fields; the
COSPEECH_CORPUS environment variable supplies a default --corpus.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .clips import read_wav, write_matrix, read_matrix
from .corpus import CorpusParams, corpus_hash, load_manifest, load_corpus_clip, make_synthetic_corpus
from .export import export_csv, export_frames
from .features import FeatureProviders, beat_times, extract_beats, parse_provider_spec
from .fusion import SemanticInputs, generate_long
from .layout import MotionSequence, default_layout
from .metrics import (
    BC_SIGMA_S,
    FGD_CAVEAT,
    EvaluationReport,
    beat_consistency,
    diversity,
    embed_clips,
    extract_kinematic_beats,
    face_lvd,
    face_mse,
    fgd,
    semgate_accuracy,
)
from .training import TrainConfig, load_bundle, load_embedder, train_stage


def _parse_config_file(path: Path) -> dict:
    values = {}
    feld_types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in feld_types:
            raise ValueError(f"unknown config key '{key}'")
        values[key] = raw
    return values


def _coerce_config(values: dict) -> TrainConfig:
    kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        if f.type in ("bool", bool):
            kwargs[f.name] = raw.lower() in ("1", "true", "yes")
        elif f.type in ("int", int):
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = float(raw)
    return TrainConfig(**kwargs)


def _corpus_dir(args) -> Path:
    corpus = args.corpus or os.environ.get("COSPEECH_CORPUS")
    if not corpus:
        raise SystemExit("no corpus given: pass --corpus or set COSPEECH_CORPUS")
    return Path(corpus)


def cmd_make_corpus(args) -> int:
    params = CorpusParams(
        num_clips=args.clips,
        duration_s=args.duration_s,
        fps=args.fps,
        sample_rate=args.sample_rate,
        beat_period_s=args.beat_period_s,
        event_rate=args.event_rate,
        vocab_size=args.vocab_size,
        num_speakers=args.speakers,
        num_emotions=args.emotions,
        seed=args.seed,
        beat_phase_jitter=args.phase_jitter,
    )
    manifest = make_synthetic_corpus(params, Path(args.out))
    print(f"corpus written to {args.out}: {params.num_clips} clips, hash {corpus_hash(manifest)}")
    return 0


def _providers_from_args(args) -> FeatureProviders:
    return FeatureProviders(
        audio=parse_provider_spec(args.audio_provider, "audio"),
        text=parse_provider_spec(args.text_provider, "text"),
        emotion=parse_provider_spec(args.emotion_provider, "emotion"),
    )


def cmd_train(args) -> int:
    cfg_values = _parse_config_file(args.config) if args.config else {}
    if args.epochs is not None:
        cfg_values["epochs"] = str(args.epochs)
    if args.seed is not None:
        cfg_values["seed"] = str(args.seed)
    if args.batch_size is not None:
        cfg_values["batch_size"] = str(args.batch_size)
    if args.lr is not None:
        cfg_values["lr"] = str(args.lr)
    cfg = _coerce_config(cfg_values)
    records = train_stage(
        args.stage, _corpus_dir(args), Path(args.out), cfg, providers=_providers_from_args(args)
    )
    last = records[-1] if records else {}
    print(f"stage {args.stage} done: {json.dumps(last, sort_keys=True)}")
    return 0


def _load_train_config(models_dir: Path) -> TrainConfig:
    import torch

    for name in ("sparse.pt", "base.pt"):
        path = Path(models_dir) / name
        if path.exists():
            blob = torch.load(path, weights_only=False)
            return TrainConfig(**blob["config"])
    raise SystemExit(f"no generator checkpoint found under {models_dir}")


def cmd_generate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _load_train_config(args.models)
    providers = _providers_from_args(args)
    features = None
    if args.clip:
        corpus_dir = _corpus_dir(args)
        manifest = load_manifest(corpus_dir)
        params = manifest.params
        bundle = load_bundle(args.models, cfg, fps=params.fps, require_sparse=not args.base_only)
        clip = load_corpus_clip(corpus_dir, args.clip, manifest)
        n = clip.motion.num_frames
        audio, rate = clip.audio, clip.sample_rate
        speaker = clip.speaker
        seed_pose = clip.motion.values[: cfg.seed_len]
        semantics = SemanticInputs(
            *providers.transcript_features(args.clip, clip.words, params.vocab_size, params.fps, n),
            phi_e=providers.emotion_features(args.clip, clip.emotion, params.num_emotions),
        )
        padded = -(-n // 4) * 4
        features = (
            extract_beats(audio, rate, params.fps, padded),
            providers.audio_embedding(args.clip, audio, rate, params.fps, padded),
        )
    else:
        audio, rate = read_wav(Path(args.audio))
        bundle = load_bundle(args.models, cfg, require_sparse=not args.base_only)
        n = int(len(audio) / rate * bundle.layout.fps)
        speaker = args.speaker
        seed_pose = None
        semantics = None
    if args.base_only:
        bundle = bundle.without_sparse()
        semantics = None
    result = generate_long(
        audio, rate, bundle, speaker=speaker, window_s=bundle.window_s,
        semantics=semantics, seed_pose=seed_pose, frame_count=n, features=features,
    )

    layout = result.motion.layout
    write_matrix(out_dir / "motion.bin", result.motion.values,
                 meta={"fps": repr(layout.fps), "layout": layout.to_spec()})
    if result.psi is not None:
        with open(out_dir / "psi.txt", "w") as fh:
            for i, val in enumerate(result.psi.frames[: result.motion.num_frames]):
                fh.write(f"{i} {val:.6f}\n")
    for tag, codes in (("base", result.base_codes), ("sparse", result.sparse_codes),
                       ("fused", result.fused_codes)):
        if codes is None:
            continue
        for part, arr in codes.items():
            np.savetxt(out_dir / f"codes_{tag}_{part}.txt", arr, fmt="%d")
    print(f"generated {result.motion.num_frames} frames -> {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    corpus_dir = _corpus_dir(args)
    manifest = load_manifest(corpus_dir)
    params = manifest.params
    c_hash = corpus_hash(manifest)
    gen_dir = Path(args.generated)

    ids = [d.name for d in sorted(gen_dir.iterdir()) if (d / "motion.bin").exists()]
    if not ids:
        raise SystemExit(f"no generated clips under {gen_dir}")
    layout = default_layout(fps=params.fps)
    gen_motion, gt_motion, gt_clips = {}, {}, {}
    for cid in ids:
        values, _ = read_matrix(gen_dir / cid / "motion.bin")
        gen_motion[cid] = MotionSequence(values=values, layout=layout)
        clip = load_corpus_clip(corpus_dir, cid, manifest)
        gt_clips[cid] = clip
        gt_motion[cid] = clip.motion

    embedder, warnings = load_embedder(args.models, expected_corpus_hash=c_hash)
    real_emb = embed_clips(embedder, [m.values for m in gt_motion.values()])
    gen_emb = embed_clips(embedder, [m.values for m in gen_motion.values()])

    bc_vals, mse_vals, lvd_vals, acc_vals = [], [], [], []
    for cid in ids:
        clip = gt_clips[cid]
        gb = extract_beats(clip.audio, clip.sample_rate, params.fps, clip.motion.num_frames)
        audio_b = beat_times(gb, params.fps)
        kin_b = extract_kinematic_beats(gen_motion[cid])
        if audio_b.size:
            bc_vals.append(beat_consistency(audio_b, kin_b, sigma_s=args.sigma))
        mse_vals.append(face_mse(gt_motion[cid], gen_motion[cid]))
        lvd_vals.append(face_lvd(gt_motion[cid], gen_motion[cid]))
        psi_path = gen_dir / cid / "psi.txt"
        if psi_path.exists():
            psi = np.loadtxt(psi_path)[:, 1]
            if psi.shape[0] == clip.motion.num_frames:
                acc_vals.append(semgate_accuracy(psi, clip.labels, beta=args.beta))

    metrics = {
        "fgd": fgd(real_emb, gen_emb),
        "bc": float(np.mean(bc_vals)) if bc_vals else float("nan"),
        "div": diversity([m.values for m in gen_motion.values()]) if len(ids) >= 2 else 0.0,
        "face_mse": float(np.mean(mse_vals)),
        "face_lvd": float(np.mean(lvd_vals)),
        "num_clips": float(len(ids)),
    }
    if acc_vals:
        metrics["semgate_acc"] = float(np.mean(acc_vals))
    report = EvaluationReport(
        metrics=metrics,
        config={"sigma_s": args.sigma, "beta": args.beta, "corpus_hash": c_hash},
        caveats=[FGD_CAVEAT],
        warnings=warnings,
    )
    Path(args.report).write_text(report.to_json())
    print(report.to_json())
    return 0


def cmd_export(args) -> int:
    values, meta = read_matrix(Path(args.motion))
    layout = default_layout(fps=float(meta.get("fps", 30.0)))
    motion = MotionSequence(values=values, layout=layout)
    if args.format == "csv":
        out = Path(args.out or (Path(args.motion).with_suffix(".csv")))
        export_csv(motion, out)
        print(f"wrote {motion.num_frames} rows -> {out}")
    else:
        out = Path(args.out or (Path(args.motion).parent / "frames"))
        count = export_frames(motion, out, max_frames=args.max_frames)
        print(f"wrote {count} frames -> {out}")
    return 0


def _add_provider_flags(parser) -> None:
    for modality in ("audio", "text", "emotion"):
        parser.add_argument(
            f"--{modality}-provider", default="builtin", metavar="builtin|file:<dir>",
            dest=f"{modality}_provider",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cospeech", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-corpus", help="generate the synthetic oracle corpus")
    mk.add_argument("--out", required=True)
    mk.add_argument("--seed", type=int, default=0)
    mk.add_argument("--clips", type=int, default=200)
    mk.add_argument("--duration-s", type=float, default=8.0)
    mk.add_argument("--fps", type=float, default=30.0)
    mk.add_argument("--sample-rate", type=int, default=16000)
    mk.add_argument("--beat-period-s", type=float, default=0.5)
    mk.add_argument("--event-rate", type=float, default=0.1)
    mk.add_argument("--vocab-size", type=int, default=32)
    mk.add_argument("--speakers", type=int, default=4)
    mk.add_argument("--emotions", type=int, default=4)
    mk.add_argument("--phase-jitter", type=float, default=0.0)
    mk.set_defaults(func=cmd_make_corpus)

    tr = sub.add_parser("train", help="train one stage")
    tr.add_argument("--stage", required=True, choices=["codec", "base", "sparse", "embedder"])
    tr.add_argument("--corpus", default=None)
    tr.add_argument("--out", required=True, help="checkpoint directory")
    tr.add_argument("--config", default=None, help="flat key=value config file")
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--seed", type=int, default=None)
    _add_provider_flags(tr)
    tr.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", help="generate motion for a corpus clip or a WAV file")
    gen.add_argument("--models", required=True)
    gen.add_argument("--corpus", default=None)
    src = gen.add_mutually_exclusive_group(required=True)
    src.add_argument("--clip", default=None, help="corpus clip id")
    src.add_argument("--audio", default=None, help="path to a WAV file")
    gen.add_argument("--speaker", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--base-only", action="store_true", help="skip the semantic branch")
    _add_provider_flags(gen)
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", help="score generated clips against the corpus")
    ev.add_argument("--corpus", default=None)
    ev.add_argument("--generated", required=True, help="directory of per-clip generation bundles")
    ev.add_argument("--models", required=True, help="directory holding embedder.pt")
    ev.add_argument("--report", required=True)
    ev.add_argument("--sigma", type=float, default=BC_SIGMA_S)
    ev.add_argument("--beta", type=float, default=0.5)
    ev.set_defaults(func=cmd_evaluate)

    ex = sub.add_parser("export", help="export a motion file as CSV or stick-figure frames")
    ex.add_argument("--motion", required=True)
    ex.add_argument("--format", required=True, choices=["csv", "frames"])
    ex.add_argument("--out", default=None)
    ex.add_argument("--max-frames", type=int, default=None)
    ex.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
