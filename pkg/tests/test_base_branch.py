import math

import numpy as np
import pytest
import torch

from cospeech.base_branch import (
    BaseGenerator,
    CoarseToFineCascade,
    PartLatents,
    RhythmProjector,
    code_cross_entropy,
    contrastive_frame_loss,
    contrastive_symmetric_loss,
    rhythmic_loss_global,
    rhythmic_loss_local,
)
from cospeech.layout import default_layout
from cospeech.rvq import CodecConfig, PartCodec

LAYOUT = default_layout()
PARTS = ("face", "upper", "hands", "lower")


def make_codecs(num_layers=6, codebook_size=256):
    return {
        p: PartCodec(CodecConfig(part=p, in_channels=4, num_layers=num_layers, codebook_size=codebook_size))
        for p in PARTS
    }


def make_generator(seed=0, **kw):
    torch.manual_seed(seed)
    return BaseGenerator(LAYOUT, num_speakers=4, **kw)


def rand_inputs(seed=0, b=2, n_frames=80):
    g = torch.Generator().manual_seed(seed)
    return (
        torch.randn(b, 4, 16, generator=g),
        torch.tensor([i % 4 for i in range(b)]),
        torch.randn(b, n_frames, 4, generator=g),
        torch.randn(b, n_frames, 40, generator=g),
    )


# ---------------------------------------------------------------- InfoNCE


def test_local_loss_orthogonal_hand_value():
    u = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert contrastive_frame_loss(u, u, tau=1.0).item() == pytest.approx(
        math.log(1 + math.exp(-1.0)), abs=1e-5
    )
    assert contrastive_frame_loss(u, u, tau=1.0).item() == pytest.approx(0.31326, abs=1e-5)


def test_local_loss_identical_rows_log_n():
    u = torch.tensor([[0.6, 0.8], [0.6, 0.8]])
    assert contrastive_frame_loss(u, u, tau=1.0).item() == pytest.approx(math.log(2.0), abs=1e-6)


def test_local_loss_sharp_diagonal_low_temperature():
    u = torch.eye(2)
    expected = math.log(1 + math.exp(-10.0))
    assert contrastive_frame_loss(u, u, tau=0.1).item() == pytest.approx(expected, rel=1e-3)
    assert expected == pytest.approx(4.54e-5, rel=1e-2)


def test_global_loss_hand_values():
    u = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert contrastive_symmetric_loss(u, u, tau=1.0).item() == pytest.approx(0.31326, abs=1e-5)
    same = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    assert contrastive_symmetric_loss(same, same, tau=1.0).item() == pytest.approx(
        math.log(2.0), abs=1e-6
    )


def test_loss_needs_negatives():
    u = torch.ones(1, 4)
    with pytest.raises(ValueError):
        contrastive_frame_loss(u, u, tau=1.0)
    with pytest.raises(ValueError):
        contrastive_symmetric_loss(u, u, tau=1.0)


def test_losses_nonnegative_and_rotation_invariant():
    g = torch.Generator().manual_seed(7)
    u = torch.randn(6, 8, generator=g)
    v = torch.randn(6, 8, generator=g)
    base = contrastive_frame_loss(u, v, tau=0.5)
    assert base.item() >= 0
    # random orthogonal rotation of the shared embedding space
    q, _ = torch.linalg.qr(torch.randn(8, 8, generator=g, dtype=torch.float64))
    rotated = contrastive_frame_loss(
        (u.double() @ q).float(), (v.double() @ q).float(), tau=0.5
    )
    assert rotated.item() == pytest.approx(base.item(), abs=1e-5)


def test_losses_scale_invariant_through_normalization():
    g = torch.Generator().manual_seed(8)
    u = torch.randn(5, 8, generator=g)
    v = torch.randn(5, 8, generator=g)
    a = contrastive_frame_loss(u, v, tau=0.3).item()
    b = contrastive_frame_loss(u * 42.0, v * 0.013, tau=0.3).item()
    assert a == pytest.approx(b, rel=1e-5)


def test_global_loss_reorder_invariant():
    torch.manual_seed(9)
    proj = RhythmProjector(16, 12, proj_dim=8, tau=0.7)
    f = torch.randn(4, 10, 16)
    g = torch.randn(4, 10, 12)
    base = rhythmic_loss_global(f, g, proj).item()
    perm = torch.tensor([2, 0, 3, 1])
    assert rhythmic_loss_global(f[perm], g[perm], proj).item() == pytest.approx(base, abs=1e-6)


def test_projector_outputs_unit_norm():
    torch.manual_seed(1)
    proj = RhythmProjector(16, 12, proj_dim=8)
    f = torch.randn(3, 10, 16)
    norms = proj.project_motion(f).norm(dim=-1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)
    pooled = proj.pool_motion(f).norm(dim=-1)
    assert torch.allclose(pooled, torch.ones_like(pooled), atol=1e-6)


def test_local_loss_frame_count_mismatch():
    proj = RhythmProjector(16, 12)
    with pytest.raises(ValueError, match="frame count"):
        rhythmic_loss_local(torch.randn(5, 16), torch.randn(6, 12), proj)


def test_global_loss_batch_of_one_rejected():
    proj = RhythmProjector(16, 12)
    with pytest.raises(ValueError, match="batch"):
        rhythmic_loss_global(torch.randn(1, 5, 16), torch.randn(1, 5, 12), proj)


def test_contrastive_gradients_match_finite_differences():
    torch.manual_seed(5)
    proj = RhythmProjector(6, 5, proj_dim=4, tau=0.2).double()
    f = torch.randn(4, 7, 6, dtype=torch.float64)
    g = torch.randn(4, 7, 5, dtype=torch.float64)

    for loss_fn in (
        lambda: rhythmic_loss_local(f[0], g[0], proj),
        lambda: rhythmic_loss_global(f, g, proj),
    ):
        loss = loss_fn()
        params = list(proj.parameters())
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        eps = 1e-6
        for p, grad in zip(params, grads):
            if grad is None:
                continue
            flat = p.data.reshape(-1)
            gflat = grad.reshape(-1)
            for i in torch.randperm(flat.numel(), generator=torch.Generator().manual_seed(0))[:4]:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                denom = max(abs(fd), abs(gflat[i].item()), 1e-12)
                if abs(fd) < 1e-10 and abs(gflat[i].item()) < 1e-10:
                    continue
                assert abs(fd - gflat[i].item()) / denom < 1e-4


# ------------------------------------------------------ cascade and model


def test_cascade_strict_dependency_direction():
    torch.manual_seed(3)
    cascade = CoarseToFineCascade(16, heads=2)
    g = torch.Generator().manual_seed(4)
    latents = PartLatents(**{p: torch.randn(1, 6, 16, generator=g) for p in PARTS})
    ctx = torch.randn(1, 6, 16, generator=g)
    ref = cascade(latents, ctx)
    # perturbing the lower-body input must leave every earlier part untouched
    bumped = cascade(latents.replaced("lower", latents.lower + 1.0), ctx)
    assert torch.equal(ref.face, bumped.face)
    assert torch.equal(ref.hands, bumped.hands)
    assert torch.equal(ref.upper, bumped.upper)
    assert not torch.equal(ref.lower, bumped.lower)
    # perturbing upper leaves face/hands
    bumped_u = cascade(latents.replaced("upper", latents.upper + 1.0), ctx)
    assert torch.equal(ref.face, bumped_u.face)
    assert torch.equal(ref.hands, bumped_u.hands)
    assert not torch.equal(ref.upper, bumped_u.upper)


def test_cascade_face_perturbation_reaches_everything():
    torch.manual_seed(3)
    cascade = CoarseToFineCascade(16, heads=2)
    g = torch.Generator().manual_seed(4)
    latents = PartLatents(**{p: torch.randn(1, 6, 16, generator=g) for p in PARTS})
    ctx = torch.randn(1, 6, 16, generator=g)
    ref = cascade(latents, ctx)
    bumped = cascade(latents.replaced("face", latents.face + 0.5), ctx)
    for part in ("hands", "upper", "lower"):
        assert (ref.get(part) - bumped.get(part)).abs().max() > 1e-9


def test_cascade_exclude_face_passthrough():
    torch.manual_seed(3)
    cascade = CoarseToFineCascade(16, heads=2)
    g = torch.Generator().manual_seed(4)
    latents = PartLatents(**{p: torch.randn(1, 6, 16, generator=g) for p in PARTS})
    ctx = torch.randn(1, 6, 16, generator=g)
    ref = cascade(latents, ctx, include_face=False)
    assert torch.equal(ref.face, latents.face)
    # face input no longer reaches the body chain
    bumped = cascade(latents.replaced("face", latents.face + 1.0), ctx, include_face=False)
    assert torch.equal(ref.hands, bumped.hands)


def test_encode_context_deterministic_and_speaker_sensitive():
    gen = make_generator()
    seed, spk, gb, gh = rand_inputs()
    tokens = gen.rhythm_tokens(gb, gh)
    p1 = gen.encode_context(seed, spk, tokens)
    p2 = gen.encode_context(seed, spk, tokens)
    assert torch.equal(p1, p2)
    p3 = gen.encode_context(seed, torch.tensor([1, 0]), tokens)
    assert not torch.equal(p1, p3)


def test_encode_context_rejects_unknown_speaker():
    gen = make_generator()
    seed, _, gb, gh = rand_inputs()
    tokens = gen.rhythm_tokens(gb, gh)
    with pytest.raises(ValueError, match="speaker"):
        gen.encode_context(seed, torch.tensor([0, 9]), tokens)


def test_init_part_latents_shapes_and_zero_rhythm():
    gen = make_generator()
    seed, spk, gb, gh = rand_inputs()
    tokens = gen.rhythm_tokens(torch.zeros_like(gb), torch.zeros_like(gh))
    p = gen.encode_context(seed, spk, tokens)
    latents = gen.init_part_latents(p, tokens, spk)
    for part in PARTS:
        assert latents.get(part).shape == (2, 20, 64)
        assert torch.isfinite(latents.get(part)).all()


def test_mask_ratio_replaces_rows_with_token():
    gen = make_generator()
    seed, spk, gb, gh = rand_inputs()
    with torch.no_grad():
        gen.mask_token.fill_(123.0)
    tokens = gen.rhythm_tokens(gb, gh)
    rng = torch.Generator().manual_seed(0)
    p = gen.encode_context(seed, spk, tokens, mask_ratio=0.5, mask_rng=rng)
    hits = (p == 123.0).all(dim=-1)
    assert hits.any()
    assert not hits[:, 0].any(), "seed latent frame is never masked"


def test_predict_codes_shapes_and_determinism():
    gen = make_generator()
    codecs = make_codecs()
    seed, spk, gb, gh = rand_inputs()
    _, _, logits, codes = gen(seed, spk, gb, gh, codecs)
    assert logits["face"].shape == (2, 20, 6, 256)
    assert codes["face"].shape == (2, 20, 6)
    _, _, logits2, codes2 = gen(seed, spk, gb, gh, codecs)
    assert torch.equal(codes["face"], codes2["face"])
    assert torch.equal(logits["hands"], logits2["hands"])


def test_predict_codes_teacher_forcing_uses_targets():
    gen = make_generator()
    codecs = make_codecs()
    seed, spk, gb, gh = rand_inputs()
    teacher = {p: torch.randint(0, 256, (2, 20, 6)) for p in PARTS}
    _, _, logits, codes = gen(seed, spk, gb, gh, codecs, teacher_codes=teacher)
    for p in PARTS:
        assert torch.equal(codes[p], teacher[p])
    ce = code_cross_entropy(logits, teacher)
    assert torch.isfinite(ce)


def test_predict_codes_codec_mismatch():
    gen = make_generator()
    seed, spk, gb, gh = rand_inputs()
    bad = make_codecs(codebook_size=128)
    with pytest.raises(ValueError, match="codebook size"):
        gen(seed, spk, gb, gh, bad)
    bad_layers = make_codecs(num_layers=3)
    with pytest.raises(ValueError, match="layers"):
        gen(seed, spk, gb, gh, bad_layers)


def test_residual_predictor_emits_v_minus_one_stages():
    gen = make_generator()
    assert all(len(gen.residual_stages[p]) == 5 for p in PARTS)
    assert all(len(gen.residual_heads[p]) == 5 for p in PARTS)
