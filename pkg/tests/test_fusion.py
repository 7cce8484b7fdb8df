import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cospeech.fusion import FusionConfig, decode_motion, fuse_codes
from cospeech.layout import PART_NAMES, default_layout
from cospeech.rvq import CodecConfig, PartCodec

BODY = ("upper", "hands", "lower")


def rand_codes(rng, n=6, v=6, k=256, parts=PART_NAMES):
    return {p: rng.integers(0, k, size=(n, v)) for p in parts}


def test_fuse_strict_threshold_rule():
    rng = np.random.default_rng(0)
    q_r = rand_codes(rng, n=3)
    q_s = rand_codes(rng, n=3, parts=BODY)
    psi = np.array([0.2, 0.9, 0.5])
    fused = fuse_codes(q_r, q_s, psi, FusionConfig(beta=0.5))
    for p in BODY:
        assert np.array_equal(fused[p][0], q_r[p][0])
        assert np.array_equal(fused[p][1], q_s[p][1])
        assert np.array_equal(fused[p][2], q_r[p][2]), "psi == beta keeps base codes"
    assert np.array_equal(fused["face"], q_r["face"])


def test_fuse_all_zero_and_all_one():
    rng = np.random.default_rng(1)
    q_r = rand_codes(rng)
    q_s = rand_codes(rng, parts=BODY)
    all_base = fuse_codes(q_r, q_s, np.zeros(6), FusionConfig())
    for p in PART_NAMES:
        assert np.array_equal(all_base[p], q_r[p])
    all_sparse = fuse_codes(q_r, q_s, np.ones(6), FusionConfig())
    for p in BODY:
        assert np.array_equal(all_sparse[p], q_s[p])
    assert np.array_equal(all_sparse["face"], q_r["face"])


def test_fuse_idempotent_on_identical_codes():
    rng = np.random.default_rng(2)
    q = rand_codes(rng)
    body_view = {p: q[p] for p in BODY}
    psi = rng.random(6)
    fused = fuse_codes(q, body_view, psi, FusionConfig())
    for p in PART_NAMES:
        assert np.array_equal(fused[p], q[p])


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1), st.floats(min_value=0.05, max_value=0.95))
def test_fuse_beta_monotonicity(seed, beta_lo):
    rng = np.random.default_rng(seed)
    q_r = rand_codes(rng, n=8)
    q_s = rand_codes(rng, n=8, parts=BODY)
    psi = rng.random(8)
    beta_hi = min(0.99, beta_lo + 0.2)
    lo = fuse_codes(q_r, q_s, psi, FusionConfig(beta=beta_lo))
    hi = fuse_codes(q_r, q_s, psi, FusionConfig(beta=beta_hi))
    frames_lo = set(np.flatnonzero(psi > beta_lo).tolist())
    frames_hi = set(np.flatnonzero(psi > beta_hi).tolist())
    assert frames_hi <= frames_lo
    for p in BODY:
        sparse_rows_hi = {i for i in range(8) if np.array_equal(hi[p][i], q_s[p][i])}
        sparse_rows_lo = {i for i in range(8) if np.array_equal(lo[p][i], q_s[p][i])}
        assert sparse_rows_hi <= sparse_rows_lo | {
            i for i in range(8) if np.array_equal(q_s[p][i], q_r[p][i])
        }


def test_fuse_frame_locality():
    rng = np.random.default_rng(3)
    q_r = rand_codes(rng)
    q_s = rand_codes(rng, parts=BODY)
    psi = np.full(6, 0.3)
    base = fuse_codes(q_r, q_s, psi, FusionConfig())
    psi2 = psi.copy()
    psi2[4] = 0.9
    bumped = fuse_codes(q_r, q_s, psi2, FusionConfig())
    for p in BODY:
        diff_rows = [i for i in range(6) if not np.array_equal(base[p][i], bumped[p][i])]
        assert diff_rows in ([], [4])


def test_fuse_shape_mismatch_rejected():
    rng = np.random.default_rng(4)
    q_r = rand_codes(rng, n=6)
    q_s = rand_codes(rng, n=5, parts=BODY)
    with pytest.raises(ValueError, match="codes"):
        fuse_codes(q_r, q_s, np.zeros(6), FusionConfig())
    with pytest.raises(ValueError, match="psi"):
        fuse_codes(q_r, {p: q_r[p] for p in BODY}, np.zeros(4), FusionConfig())


def test_fusion_config_beta_range():
    with pytest.raises(ValueError, match="beta"):
        FusionConfig(beta=1.0)
    with pytest.raises(ValueError, match="beta"):
        FusionConfig(beta=0.0)


def make_codecs(k=16, v=3):
    torch.manual_seed(0)
    return {
        p: PartCodec(CodecConfig(part=p, in_channels=4, latent_dim=8, hidden=16,
                                 num_layers=v, codebook_size=k))
        for p in PART_NAMES
    }


def test_decode_motion_shape_and_composition():
    layout = default_layout()
    codecs = make_codecs()
    for c in codecs.values():
        for layer in c.quantizer.layers:
            layer.entries.normal_(generator=torch.Generator().manual_seed(2))
            if layer.anchor_zero:
                layer.entries[0].zero_()
    rng = np.random.default_rng(5)
    codes = rand_codes(rng, n=6, v=3, k=16)
    motion = decode_motion(codes, codecs, layout)
    assert motion.values.shape == (24, 16)
    # decoding the codes of a round trip equals the round-trip reconstruction
    x = torch.randn(1, 24, 4, generator=torch.Generator().manual_seed(6))
    part = "upper"
    with torch.no_grad():
        z = codecs[part].encode(x)
        q = codecs[part].quantizer.quantize(z)
        recon = codecs[part].decode(q.z_hat).squeeze(0).numpy()
    via_codes = decode_motion(
        {p: (q.codes.squeeze(0).numpy() if p == part else codes[p]) for p in PART_NAMES},
        codecs,
        layout,
    )
    assert np.allclose(via_codes.values[:, layout.channel_slice(part)], recon, atol=1e-6)


def test_decode_motion_invalid_code_index():
    layout = default_layout()
    codecs = make_codecs(k=8)
    rng = np.random.default_rng(6)
    codes = rand_codes(rng, n=4, v=3, k=8)
    codes["face"][0, 0] = 99
    with pytest.raises(ValueError, match="out of range"):
        decode_motion(codes, codecs, layout)
