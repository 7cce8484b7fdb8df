"""Two-branch co-speech motion generation: rhythm-aligned base motion plus
sparse semantic gestures, fused per frame by a learned semantic score."""

from .layout import BodyLayout, MotionSequence, default_layout, join_parts, split_parts
from .clips import ClipRecord, SemanticLabelTrack, load_clip, save_clip, validate_clip
from .corpus import CorpusManifest, CorpusParams, make_synthetic_corpus
from .fusion import FusionConfig, fuse_codes, decode_motion, generate_clip, generate_long
from .training import TrainConfig, desk_config, mask_ratio, train_stage, load_bundle

__all__ = [
    "BodyLayout",
    "MotionSequence",
    "default_layout",
    "join_parts",
    "split_parts",
    "ClipRecord",
    "SemanticLabelTrack",
    "load_clip",
    "save_clip",
    "validate_clip",
    "CorpusManifest",
    "CorpusParams",
    "make_synthetic_corpus",
    "FusionConfig",
    "fuse_codes",
    "decode_motion",
    "generate_clip",
    "generate_long",
    "TrainConfig",
    "desk_config",
    "mask_ratio",
    "train_stage",
    "load_bundle",
]
