import numpy as np
import pytest
import torch

from storygen.data import PAD_ID
from storygen.encoders import (
    AutoencoderConfig,
    EmbeddingBundle,
    EncoderConfig,
    JointEncoder,
    LatentAutoencoder,
    UnsharedProjections,
    compute_null_fixtures,
    load_encoders,
    param_checksum,
    reconstruction_psnr,
    retrieval_accuracy,
    save_encoders,
)
from storygen.errors import StateError, TrainingFailure, ValidationError

from conftest import UNIT_SPEC


def test_encode_frames_shapes_and_norms(trained_encoders):
    encoder, _, _, _ = trained_encoders
    frames = torch.rand(5, 3, 32, 32)
    v_p, v_h = encoder.encode_frames(frames)
    assert v_p.shape == (5, 1, 128)
    assert v_h.shape == (5, 16, 128)
    assert torch.allclose(v_p.norm(dim=-1), torch.ones(5, 1), atol=1e-6)


def test_encode_frames_deterministic_rows(trained_encoders):
    encoder, _, _, _ = trained_encoders
    frame = torch.rand(1, 3, 32, 32)
    batch = torch.cat([frame, torch.rand(2, 3, 32, 32), frame])
    v_p, v_h = encoder.encode_frames(batch)
    assert torch.equal(v_p[0], v_p[3])
    assert torch.equal(v_h[0], v_h[3])


def test_encode_frames_validation(trained_encoders):
    encoder, _, _, _ = trained_encoders
    with pytest.raises(ValidationError):
        encoder.encode_frames(torch.rand(5, 1, 32, 32))
    with pytest.raises(ValidationError):
        encoder.encode_frames(torch.rand(5, 3, 16, 16))
    with pytest.raises(ValidationError):
        encoder.encode_frames(torch.rand(2, 3, 32, 32) + 1.5)


def test_black_frame_matches_fixture(trained_encoders):
    encoder, _, fixtures, _ = trained_encoders
    v_p, v_h = encoder.encode_frames(torch.zeros(2, 3, 32, 32))
    assert torch.equal(v_p[0], fixtures.v_p)
    assert torch.equal(v_p[1], fixtures.v_p)
    assert torch.equal(v_h[0], fixtures.v_h)


def test_caption_embeddings(trained_encoders, unit_dataset):
    encoder, _, fixtures, _ = trained_encoders
    _, test, spec = unit_dataset
    ids = torch.from_numpy(np.array(test[0].caption_ids))
    t_p, t_h = encoder.encode_captions(ids)
    assert t_p.shape == (5, 1, 128) and t_h.shape == (5, 16, 128)
    # duplicate caption rows embed identically
    both = torch.cat([ids[:1], ids[:1]])
    d_p, _ = encoder.encode_captions(both)
    assert torch.equal(d_p[0], d_p[1])
    # padding-only caption hits the recorded null fixture
    pad = torch.full((1, spec.caption_length), PAD_ID, dtype=torch.long)
    n_p, n_h = encoder.encode_captions(pad)
    assert torch.equal(n_p[0], fixtures.t_p)
    assert torch.equal(n_h[0], fixtures.t_h)


def test_unshared_projections_identity_and_disjoint():
    torch.manual_seed(0)
    proj = UnsharedProjections(16, 16)
    bundle = EmbeddingBundle(
        v_p=torch.randn(2, 1, 16), v_h=torch.randn(2, 4, 16),
        t_p=torch.randn(2, 1, 16), t_h=torch.randn(2, 6, 16),
    )
    out = proj(bundle)
    for name in ("v_p", "v_h", "t_p", "t_h"):
        assert torch.allclose(getattr(out, name), getattr(bundle, name))
    # mutating one map leaves the others' outputs unchanged
    with torch.no_grad():
        proj.v_p.weight.mul_(2.0)
    out2 = proj(bundle)
    assert not torch.allclose(out2.v_p, bundle.v_p)
    assert torch.allclose(out2.t_h, bundle.t_h)
    # zero input maps to the bias
    with torch.no_grad():
        proj.t_p.bias.fill_(0.25)
    z = proj(EmbeddingBundle(*(torch.zeros(1, 1, 16) for _ in range(4))))
    assert torch.allclose(z.t_p, torch.full((1, 1, 16), 0.25))


def test_autoencoder_requires_training():
    ae = LatentAutoencoder(AutoencoderConfig())
    with pytest.raises(StateError):
        ae.encode_latent(torch.rand(1, 3, 32, 32))


def test_autoencoder_roundtrip_psnr(trained_encoders, unit_dataset):
    _, ae, _, _ = trained_encoders
    _, test, _ = unit_dataset
    assert reconstruction_psnr(ae, test) >= 28.0


def test_latent_shape_contract(trained_encoders):
    _, ae, _, _ = trained_encoders
    z = ae.encode_latent(torch.rand(3, 3, 32, 32))
    assert z.shape == (3, 4, 8, 8)


def test_black_frame_latent_fixture(trained_encoders):
    _, ae, fixtures, _ = trained_encoders
    z = ae.encode_latent(torch.zeros(1, 3, 32, 32))
    assert torch.equal(z[0], fixtures.latent)


def test_latents_have_unit_scale(trained_encoders, unit_dataset):
    _, ae, _, _ = trained_encoders
    train, _, _ = unit_dataset
    frames = torch.from_numpy(np.concatenate([ep.frames for ep in train[:32]]))
    z = ae.encode_latent(frames)
    assert 0.5 <= float(z.std()) <= 2.0


def test_retrieval_sanity(trained_encoders, unit_dataset):
    encoder, _, _, _ = trained_encoders
    _, test, _ = unit_dataset
    # pilot-calibrated floor; chance level is far below 0.1
    assert retrieval_accuracy(encoder, test) >= 0.5


def test_matched_pairs_beat_mismatched(trained_encoders, unit_dataset):
    encoder, _, _, _ = trained_encoders
    _, test, _ = unit_dataset
    frames = torch.from_numpy(np.concatenate([ep.frames for ep in test[:8]]))
    captions = torch.from_numpy(np.concatenate([ep.caption_ids for ep in test[:8]]))
    with torch.no_grad():
        v_p, _ = encoder.encode_frames(frames)
        t_p, _ = encoder.encode_captions(captions)
    sims = v_p[:, 0] @ t_p[:, 0].T
    matched = sims.diag().mean()
    mismatched = (sims.sum() - sims.diag().sum()) / (sims.numel() - sims.shape[0])
    assert matched > mismatched


def test_frozen_after_pretraining(trained_encoders):
    encoder, ae, _, _ = trained_encoders
    assert not any(p.requires_grad for p in encoder.parameters())
    assert not any(p.requires_grad for p in ae.parameters())


def test_param_checksum_detects_change(trained_encoders):
    encoder, _, _, _ = trained_encoders
    before = param_checksum(encoder)
    assert before == param_checksum(encoder)
    with torch.no_grad():
        encoder.image_pool.bias.add_(1e-3)
        changed = param_checksum(encoder)
        encoder.image_pool.bias.sub_(1e-3)
    assert changed != before
    assert param_checksum(encoder) == before


def test_save_load_roundtrip(trained_encoders, tmp_path):
    encoder, ae, fixtures, stats = trained_encoders
    path = tmp_path / "enc.ckpt"
    vocab_words = UNIT_SPEC.vocabulary().id_to_word[1:]
    save_encoders(path, encoder, ae, fixtures, vocab_words, stats)
    enc2, ae2, fx2, header = load_encoders(path)
    assert param_checksum(enc2) == param_checksum(encoder)
    assert param_checksum(ae2) == param_checksum(ae)
    assert torch.equal(fx2.v_p, fixtures.v_p)
    assert header["vocab"] == vocab_words
    frames = torch.rand(2, 3, 32, 32)
    assert torch.equal(enc2.encode_frames(frames)[0], encoder.encode_frames(frames)[0])


def test_divergence_guard_triggers(unit_dataset):
    from storygen.encoders import pretrain_joint_encoder

    train, _, spec = unit_dataset
    cfg = EncoderConfig(vocab_size=len(spec.vocabulary()), caption_length=16, image_size=32)
    with pytest.raises(TrainingFailure, match="above chance"):
        # an absurd learning rate cannot reach below-chance loss by warmup
        pretrain_joint_encoder(train[:8], cfg, iterations=40, batch_size=16, lr=50.0, seed=0)
