import numpy as np
import pytest

from cospeech.clips import (
    ClipRecord,
    SemanticLabelTrack,
    load_clip,
    read_matrix,
    save_clip,
    validate_clip,
    write_matrix,
)
from cospeech.layout import MotionSequence, default_layout


def make_clip(n_frames=60, fps=30.0, sr=16000):
    layout = default_layout(fps=fps)
    rng = np.random.default_rng(3)
    return ClipRecord(
        motion=MotionSequence(values=rng.normal(size=(n_frames, 16)), layout=layout),
        audio=rng.normal(0, 0.01, size=int(n_frames / fps * sr)),
        sample_rate=sr,
        words=[(2, 0.1, 0.4), (5, 0.5, 0.9)],
        emotion=1,
        speaker=0,
        labels=SemanticLabelTrack(scores=np.zeros(n_frames)),
    )


def test_wellformed_clip_passes():
    report = validate_clip(make_clip())
    assert report.ok and report.violations == []


def test_label_length_mismatch_fails():
    clip = make_clip()
    clip.labels = SemanticLabelTrack(scores=np.zeros(59))
    report = validate_clip(clip)
    assert not report.ok
    assert any("label track length" in v for v in report.violations)


def test_nonfinite_motion_fails():
    clip = make_clip()
    clip.motion.values[10, 3] = np.nan
    report = validate_clip(clip)
    assert not report.ok
    assert any("non-finite" in v for v in report.violations)


def test_audio_duration_mismatch_fails():
    clip = make_clip()
    clip.audio = clip.audio[: len(clip.audio) // 2]
    report = validate_clip(clip)
    assert not report.ok


def test_overlapping_words_fail():
    clip = make_clip()
    clip.words = [(2, 0.1, 0.5), (5, 0.4, 0.9)]
    report = validate_clip(clip)
    assert not report.ok
    assert any("overlap" in v for v in report.violations)


def test_word_outside_duration_fails():
    clip = make_clip()
    clip.words = [(2, 1.5, 2.5)]
    report = validate_clip(clip)
    assert not report.ok


def test_binarization_strictly_greater():
    track = SemanticLabelTrack(scores=np.array([0.0, 0.5, 1.0]), binarization_threshold=0.5)
    assert track.binary().tolist() == [0.0, 0.0, 1.0]


def test_save_load_roundtrip(tmp_path):
    clip = make_clip()
    clip.labels = SemanticLabelTrack(scores=np.linspace(0, 1, 60))
    save_clip(clip, tmp_path / "c")
    back = load_clip(tmp_path / "c")
    assert np.array_equal(back.motion.values, clip.motion.values)
    assert back.motion.layout == clip.motion.layout
    assert back.words == clip.words
    assert back.emotion == clip.emotion and back.speaker == clip.speaker
    assert np.array_equal(back.labels.scores, clip.labels.scores)
    # PCM16 quantization is part of the format; stored audio round-trips exactly
    again = load_clip(tmp_path / "c")
    assert np.array_equal(back.audio, again.audio)


def test_load_missing_audio_names_audio(tmp_path):
    clip = make_clip()
    save_clip(clip, tmp_path / "c")
    (tmp_path / "c" / "audio.wav").unlink()
    with pytest.raises(FileNotFoundError, match="audio"):
        load_clip(tmp_path / "c")


def test_load_missing_annot_names_annot(tmp_path):
    clip = make_clip()
    save_clip(clip, tmp_path / "c")
    (tmp_path / "c" / "annot").unlink()
    with pytest.raises(FileNotFoundError, match="annot"):
        load_clip(tmp_path / "c")


def test_load_fps_mismatch(tmp_path):
    clip = make_clip(fps=30.0)
    save_clip(clip, tmp_path / "c")
    with pytest.raises(ValueError, match="fps mismatch"):
        load_clip(tmp_path / "c", expected_fps=25.0)


def test_corrupt_annot(tmp_path):
    clip = make_clip()
    save_clip(clip, tmp_path / "c")
    (tmp_path / "c" / "annot").write_text("{not json")
    with pytest.raises(ValueError, match="annot"):
        load_clip(tmp_path / "c")


def test_matrix_roundtrip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(7, 3)).astype(np.float32)
    write_matrix(tmp_path / "m.bin", arr, meta={"provider": "mel"})
    back, meta = read_matrix(tmp_path / "m.bin")
    assert np.array_equal(back, arr)
    assert meta["provider"] == "mel"


def test_matrix_size_mismatch(tmp_path):
    arr = np.zeros((4, 2), dtype=np.float32)
    write_matrix(tmp_path / "m.bin", arr)
    (tmp_path / "m.bin").write_bytes(b"\x00" * 12)
    with pytest.raises(ValueError, match="sidecar"):
        read_matrix(tmp_path / "m.bin")
