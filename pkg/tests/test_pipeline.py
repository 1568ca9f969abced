import numpy as np
import pytest
import torch

from helpers import randomize_parameters
from storygen.contextual import ContextualConfig, ContextualDenoiser
from storygen.data import generate_episode
from storygen.encoders import EncoderConfig, JointEncoder, freeze
from storygen.errors import ConfigurationError, ValidationError
from storygen.evaluation import request_from_episode
from storygen.pipeline import StoryPipeline, StoryRequest, write_story
from storygen.prior import FramePriorModel, PriorConfig

from conftest import UNIT_SPEC


@pytest.fixture(scope="module")
def pipeline(trained_encoders):
    encoder, ae, fixtures, _ = trained_encoders
    torch.manual_seed(42)
    prior = FramePriorModel(PriorConfig()).eval()
    randomize_parameters(prior, seed=42)
    contextual = ContextualDenoiser(ContextualConfig(base_width=16)).eval()
    randomize_parameters(contextual, seed=43)
    return StoryPipeline(
        encoder, ae, fixtures, UNIT_SPEC.vocabulary(),
        contextual, "linear", 1000,
        prior_model=prior, prior_schedule_kind="cosine", prior_timesteps=1000,
    )


@pytest.fixture(scope="module")
def episode():
    return generate_episode(UNIT_SPEC, 5)


def test_reference_frames_preserved_byte_identical(pipeline, episode):
    request = request_from_episode(episode, known=(0,), seed=1, steps=4)
    result = pipeline.generate(request)
    assert result.frames.shape == episode.frames.shape
    assert np.array_equal(result.frames[0], episode.frames[0])
    assert result.frames[0].tobytes() == episode.frames[0].tobytes()


def test_same_seed_same_story(pipeline, episode):
    a = pipeline.generate(request_from_episode(episode, seed=9, steps=4))
    b = pipeline.generate(request_from_episode(episode, seed=9, steps=4))
    assert np.array_equal(a.frames, b.frames)


def test_seed_isolation(pipeline, episode):
    a = pipeline.generate(request_from_episode(episode, seed=1, steps=4))
    b = pipeline.generate(request_from_episode(episode, seed=2, steps=4))
    assert np.array_equal(a.frames[0], b.frames[0])  # reference untouched
    assert not np.array_equal(a.frames[1:], b.frames[1:])


def test_caption_only_generation(pipeline, episode):
    request = StoryRequest(captions=list(episode.captions), references=[], seed=3, steps=4)
    result = pipeline.generate(request)
    assert result.frames.shape == episode.frames.shape
    assert result.known_indices == ()
    assert result.denoiser_invocations == 2 * 4


def test_single_pass_invocations_independent_of_unknown_count(pipeline, episode):
    one = pipeline.generate(request_from_episode(episode, known=(0, 1, 2, 3), seed=1, steps=5))
    four = pipeline.generate(request_from_episode(episode, known=(0,), seed=1, steps=5))
    assert one.denoiser_invocations == 2 * 5
    assert four.denoiser_invocations == 2 * 5


def test_autoregressive_invocations_scale_with_unknown_count(pipeline, episode):
    result = pipeline.generate(request_from_episode(episode, known=(0,), seed=1, steps=3, mode="autoregressive"))
    assert result.denoiser_invocations == 4 * 2 * 3
    assert np.array_equal(result.frames[0], episode.frames[0])
    single = pipeline.generate(request_from_episode(episode, known=(0, 1, 2, 3), seed=1, steps=3, mode="autoregressive"))
    assert single.denoiser_invocations == 1 * 2 * 3


def test_branching_storylines_share_reference_output(pipeline, episode):
    req_a = request_from_episode(episode, known=(0,), seed=4, steps=4)
    req_b = request_from_episode(episode, known=(0,), seed=4, steps=4)
    req_b.captions = [c.replace(c.split()[0], "ava") for c in episode.captions]
    a = pipeline.generate(req_a)
    b = pipeline.generate(req_b)
    assert np.array_equal(a.frames[0], b.frames[0])
    assert not np.array_equal(a.frames[1:], b.frames[1:])


def test_unknown_caption_word_rejected(pipeline, episode):
    request = request_from_episode(episode, seed=0, steps=4)
    request.captions = ["zorblax waves in the meadow"] + list(episode.captions[1:])
    with pytest.raises(KeyError):
        pipeline.generate(request)


def test_request_validation(pipeline, episode):
    with pytest.raises(ValidationError):
        pipeline.generate(StoryRequest(captions=[], references=[]))
    with pytest.raises(ValidationError):
        pipeline.generate(
            StoryRequest(
                captions=list(episode.captions),
                references=[(0, episode.frames[0]), (0, episode.frames[1])],
            )
        )
    with pytest.raises(ValidationError):
        pipeline.generate(
            StoryRequest(
                captions=list(episode.captions),
                references=[(i, episode.frames[i]) for i in range(5)],
            )
        )


def test_embedding_width_compat_check(trained_encoders):
    encoder, ae, fixtures, _ = trained_encoders
    bad_prior = FramePriorModel(PriorConfig(embed_dim=64))
    contextual = ContextualDenoiser(ContextualConfig(base_width=16))
    with pytest.raises(ConfigurationError, match="embedding width"):
        StoryPipeline(encoder, ae, fixtures, UNIT_SPEC.vocabulary(), contextual, "linear", 1000,
                      prior_model=bad_prior)


def test_prior_required_when_contextual_expects_it(trained_encoders):
    encoder, ae, fixtures, _ = trained_encoders
    contextual = ContextualDenoiser(ContextualConfig(base_width=16, use_stage1_prior=True))
    with pytest.raises(ConfigurationError, match="stage-1"):
        StoryPipeline(encoder, ae, fixtures, UNIT_SPEC.vocabulary(), contextual, "linear", 1000)


def test_no_prior_variant_runs_without_prior(trained_encoders, episode):
    encoder, ae, fixtures, _ = trained_encoders
    torch.manual_seed(7)
    contextual = ContextualDenoiser(ContextualConfig(base_width=16, use_stage1_prior=False)).eval()
    randomize_parameters(contextual, seed=7)
    pipe = StoryPipeline(encoder, ae, fixtures, UNIT_SPEC.vocabulary(), contextual, "linear", 1000)
    result = pipe.generate(request_from_episode(episode, seed=1, steps=3))
    assert result.predicted_embeddings is None
    assert result.frames.shape == episode.frames.shape


def test_write_story_outputs(pipeline, episode, tmp_path):
    request = request_from_episode(episode, seed=1, steps=3)
    result = pipeline.generate(request)
    out = write_story(result, request, tmp_path / "story")
    for i in range(5):
        assert (out / f"frame_{i}.png").exists()
    meta = (out / "metadata.json").read_text()
    assert '"seed": 1' in meta and '"denoiser_invocations": 6' in meta
    assert (out / "timings.json").exists()
