import numpy as np
import pytest

from cospeech.clips import write_matrix
from cospeech.features import (
    FileAudioProvider,
    MelAudioProvider,
    beat_times,
    embed_emotion,
    embed_transcript,
    extract_audio_embedding,
    extract_beats,
    pool_to_latent,
)

SR = 16000
FPS = 30.0


def impulse_train(period_s=0.5, duration_s=2.0, sr=SR, amp=0.8):
    audio = np.zeros(int(duration_s * sr))
    for t in np.arange(0.0, duration_s - 1e-9, period_s):
        audio[int(round(t * sr))] = amp
    return audio


def test_silence_gives_all_zero_features():
    gb = extract_beats(np.zeros(SR), SR, FPS, 30)
    assert gb.shape == (30, 4)
    assert np.all(gb == 0.0)


def test_impulse_train_beats_at_expected_frames():
    audio = impulse_train()
    gb = extract_beats(audio, SR, FPS, 60)
    marked = np.flatnonzero(gb[:, 3])
    expected = np.array([0, 15, 30, 45])
    assert len(marked) == len(expected)
    assert np.all(np.min(np.abs(marked[:, None] - expected[None, :]), axis=1) <= 1)


def test_constant_signal_onset_near_zero_after_first():
    audio = np.full(SR, 0.5)
    gb = extract_beats(audio, SR, FPS, 30)
    onset = gb[:, 2]
    assert onset[0] > 0
    assert np.all(onset[1:] < 1e-6 * max(onset[0], 1.0) + 1e-9)


def test_empty_audio_rejected():
    with pytest.raises(ValueError, match="empty"):
        extract_beats(np.array([]), SR, FPS, 10)


def test_too_short_audio_rejected():
    with pytest.raises(ValueError, match="short"):
        extract_beats(np.zeros(SR // 2), SR, FPS, 60)


def test_beat_indicator_scale_invariant():
    rng = np.random.default_rng(0)
    audio = impulse_train() + rng.normal(0, 0.01, SR * 2)
    gb1 = extract_beats(audio, SR, FPS, 60)
    gb2 = extract_beats(audio * 7.3, SR, FPS, 60)
    assert np.array_equal(gb1[:, 3], gb2[:, 3])
    assert np.allclose(gb1[:, 0], gb2[:, 0])   # amplitude is max-normalized


def test_beat_shift_equivariance():
    # 3 motion frames = 1600 samples exactly at 16 kHz / 30 fps
    rng = np.random.default_rng(1)
    audio = impulse_train(duration_s=4.0) + rng.normal(0, 0.005, SR * 4)
    k = 3
    shifted = np.concatenate([np.zeros(k * SR // 30), audio])[: audio.size]
    gb = extract_beats(audio, SR, FPS, 120)
    gb_shift = extract_beats(shifted, SR, FPS, 120)
    # interior frames: original beat at frame f appears at f+k in the shifted track
    orig = np.flatnonzero(gb[:, 3])
    moved = set(np.flatnonzero(gb_shift[:, 3]).tolist())
    expected = {f + k for f in orig if f + k < 118}
    assert expected <= moved


def test_audio_embedding_standardized():
    rng = np.random.default_rng(2)
    audio = rng.normal(0, 0.3, SR * 2)
    gh = extract_audio_embedding(audio, SR, FPS, 60)
    assert gh.shape == (60, 40)
    assert np.abs(gh.mean(axis=0)).max() < 1e-6
    assert np.allclose(gh.std(axis=0), 1.0, atol=1e-6)


def test_audio_embedding_deterministic():
    rng = np.random.default_rng(3)
    audio = rng.normal(0, 0.3, SR)
    a = extract_audio_embedding(audio, SR, FPS, 30)
    b = extract_audio_embedding(audio, SR, FPS, 30)
    assert np.array_equal(a, b)


def test_file_provider_row_mismatch(tmp_path):
    write_matrix(tmp_path / "clip_0.bin", np.zeros((29, 40), dtype=np.float32))
    provider = FileAudioProvider(tmp_path)
    with pytest.raises(ValueError, match="29 rows.*expected 30"):
        extract_audio_embedding(np.zeros(SR), SR, FPS, 30, provider=provider, clip_id="clip_0")


def test_file_provider_roundtrip(tmp_path):
    feats = np.random.default_rng(4).normal(size=(30, 40)).astype(np.float32)
    write_matrix(tmp_path / "clip_0.bin", feats, meta={"provider": "external"})
    provider = FileAudioProvider(tmp_path)
    gh = extract_audio_embedding(np.zeros(SR), SR, FPS, 30, provider=provider, clip_id="clip_0")
    assert gh.shape == (30, 40)


def test_empty_transcript_zero_embeddings():
    phi_l, phi_g = embed_transcript([], 32, FPS, 50)
    assert phi_l.shape == (50, 32) and np.all(phi_l == 0)
    assert phi_g.shape == (32,) and np.all(phi_g == 0)


def test_word_span_broadcast():
    phi_l, _ = embed_transcript([(5, 10 / FPS, 20 / FPS)], 32, FPS, 40)
    nonzero = np.flatnonzero(np.abs(phi_l).sum(axis=1))
    assert nonzero.tolist() == list(range(10, 20))


def test_transcript_deterministic():
    words = [(1, 0.1, 0.3), (9, 0.5, 0.8)]
    a = embed_transcript(words, 32, FPS, 30)
    b = embed_transcript(words, 32, FPS, 30)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_transcript_rejects_overlap():
    with pytest.raises(ValueError, match="overlap"):
        embed_transcript([(1, 0.1, 0.5), (2, 0.4, 0.6)], 32, FPS, 30)


def test_transcript_rejects_oov():
    with pytest.raises(ValueError, match="vocab"):
        embed_transcript([(40, 0.1, 0.2)], 32, FPS, 30)


def test_emotion_one_hot():
    assert embed_emotion(0, 4).tolist() == [1, 0, 0, 0, 0, 0, 0, 0]
    assert embed_emotion(3, 4).tolist() == [0, 0, 0, 1, 0, 0, 0, 0]


def test_emotion_out_of_range():
    with pytest.raises(ValueError, match="tag"):
        embed_emotion(9, 4)


def test_pool_to_latent():
    x = np.arange(8, dtype=float).reshape(8, 1)
    assert pool_to_latent(x, 4, "mean").flatten().tolist() == [1.5, 5.5]
    assert pool_to_latent(x, 4, "max").flatten().tolist() == [3.0, 7.0]


def test_file_text_provider_roundtrip(tmp_path):
    from cospeech.features import FeatureProviders, FileTextProvider, parse_provider_spec

    phi_l = np.random.default_rng(5).normal(size=(30, 32)).astype(np.float32)
    phi_g = np.random.default_rng(6).normal(size=(1, 32)).astype(np.float32)
    write_matrix(tmp_path / "clip_0.phi_l.bin", phi_l, meta={"provider": "external"})
    write_matrix(tmp_path / "clip_0.phi_g.bin", phi_g)
    provider = parse_provider_spec(f"file:{tmp_path}", "text")
    providers = FeatureProviders(text=provider)
    got_l, got_g = providers.transcript_features("clip_0", [], 32, FPS, 30)
    assert np.allclose(got_l, phi_l)
    assert got_g.shape == (32,)


def test_file_text_provider_row_mismatch(tmp_path):
    from cospeech.features import FileTextProvider

    write_matrix(tmp_path / "c.phi_l.bin", np.zeros((29, 32), dtype=np.float32))
    write_matrix(tmp_path / "c.phi_g.bin", np.zeros((1, 32), dtype=np.float32))
    with pytest.raises(ValueError, match="29 rows"):
        FileTextProvider(tmp_path).transcript_features("c", 30)


def test_file_emotion_provider(tmp_path):
    from cospeech.features import FeatureProviders, parse_provider_spec

    vec = np.arange(8, dtype=np.float32).reshape(1, 8)
    write_matrix(tmp_path / "clip_9.phi_e.bin", vec)
    providers = FeatureProviders(emotion=parse_provider_spec(f"file:{tmp_path}", "emotion"))
    got = providers.emotion_features("clip_9", 0, 4)
    assert got.tolist() == list(range(8))


def test_parse_provider_spec_errors():
    from cospeech.features import parse_provider_spec

    assert parse_provider_spec("builtin", "audio") is None
    with pytest.raises(ValueError, match="provider spec"):
        parse_provider_spec("http://x", "audio")
