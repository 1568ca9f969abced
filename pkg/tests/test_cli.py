import json
from pathlib import Path

import numpy as np
import pytest
import torch

from storygen.cli import dispatch, render_contact_sheet
from storygen.data import generate_episode

from conftest import UNIT_SPEC


def run(argv):
    return dispatch([str(a) for a in argv])


def dir_digest(path: Path, skip=("timings.json",)) -> dict:
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name not in skip:
            out[str(p.relative_to(path))] = p.read_bytes()
    return out


@pytest.fixture(scope="module")
def cli_artifacts(unit_workspace, tmp_path_factory):
    """Tiny trained checkpoints produced through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    prior_dir = root / "prior"
    ctx_dir = root / "contextual"
    assert run([
        "train-prior", "--data", unit_workspace["data"], "--encoders", unit_workspace["encoders"],
        "--out", prior_dir, "--set", "prior.iterations=40", "--set", "prior.checkpoint_every=40",
    ]) == 0
    assert run([
        "train-contextual", "--data", unit_workspace["data"], "--encoders", unit_workspace["encoders"],
        "--out", ctx_dir, "--set", "contextual.iterations=40",
        "--set", "contextual.checkpoint_every=40", "--set", "contextual.base_width=16",
    ]) == 0
    return {
        "prior": prior_dir / "prior.ckpt",
        "contextual": ctx_dir / "contextual.ckpt",
        **unit_workspace,
    }


def small_data_args():
    return [
        "--set", "data.num_train=6", "--set", "data.num_test=3",
        "--set", "data.num_characters=4", "--set", "data.num_scenes=2",
    ]


def test_make_data_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["make-data", "--out", a] + small_data_args()) == 0
    assert run(["make-data", "--out", b] + small_data_args()) == 0
    assert dir_digest(a) == dir_digest(b)


def test_make_data_refuses_silent_overwrite(tmp_path):
    out = tmp_path / "d"
    assert run(["make-data", "--out", out] + small_data_args()) == 0
    assert run(["make-data", "--out", out] + small_data_args()) == 3
    assert run(["make-data", "--out", out, "--force"] + small_data_args()) == 0


def test_set_override_applied_and_echoed(tmp_path):
    out = tmp_path / "d"
    assert run(["make-data", "--out", out] + small_data_args()) == 0
    effective = (out / "effective.cfg").read_text()
    assert "num_train = 6" in effective
    index = (out / "train" / "index.jsonl").read_text().strip().splitlines()
    assert len(index) == 6


def test_unknown_override_key_is_config_error(tmp_path):
    assert run(["make-data", "--out", tmp_path / "d", "--set", "data.bogus=1"]) == 3


def test_unknown_command_exits_2(capsys):
    assert run(["frobnicate"]) == 2


def test_generate_deterministic_directories(cli_artifacts, tmp_path):
    common = [
        "generate", "--data", cli_artifacts["data"], "--encoders", cli_artifacts["encoders"],
        "--prior", cli_artifacts["prior"], "--contextual", cli_artifacts["contextual"],
        "--seed", "7", "--set", "sampler.steps=3",
    ]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(common + ["--out", a]) == 0
    assert run(common + ["--out", b]) == 0
    da, db = dir_digest(a), dir_digest(b)
    assert da.keys() == db.keys()
    assert da == db  # timings.json excluded by dir_digest
    story = next(p for p in a.iterdir() if p.name.startswith("story_"))
    assert (story / "contact_sheet.png").exists()
    meta = json.loads((story / "metadata.json").read_text())
    assert meta["denoiser_invocations"] == 2 * 3


def test_generate_caption_only(cli_artifacts, tmp_path):
    out = tmp_path / "caponly"
    assert run([
        "generate", "--data", cli_artifacts["data"], "--encoders", cli_artifacts["encoders"],
        "--prior", cli_artifacts["prior"], "--contextual", cli_artifacts["contextual"],
        "--out", out, "--known", "", "--seed", "3", "--set", "sampler.steps=3",
    ]) == 0
    story = next(p for p in out.iterdir() if p.name.startswith("story_"))
    meta = json.loads((story / "metadata.json").read_text())
    assert meta["reference_indices"] == []


def test_generate_missing_episode_is_data_error(cli_artifacts, tmp_path, capsys):
    code = run([
        "generate", "--data", cli_artifacts["data"], "--encoders", cli_artifacts["encoders"],
        "--prior", cli_artifacts["prior"], "--contextual", cli_artifacts["contextual"],
        "--out", tmp_path / "x", "--episode-id", "999999",
    ])
    assert code == 4
    assert "episode 999999" in capsys.readouterr().err


def test_evaluate_missing_frame_names_path(cli_artifacts, tmp_path, capsys):
    stories = tmp_path / "stories"
    assert run([
        "generate", "--data", cli_artifacts["data"], "--encoders", cli_artifacts["encoders"],
        "--prior", cli_artifacts["prior"], "--contextual", cli_artifacts["contextual"],
        "--out", stories, "--num-stories", "2", "--seed", "5", "--set", "sampler.steps=2",
    ]) == 0
    victim = next(iter(sorted(stories.glob("story_*/frame_2.png"))))
    victim.unlink()
    code = run([
        "evaluate", "--data", cli_artifacts["data"], "--encoders", cli_artifacts["encoders"],
        "--stories", stories, "--out", tmp_path / "eval",
        "--set", "evaluation.classifier_iterations=60", "--set", "evaluation.classifier_floor=0.0",
    ])
    assert code == 4
    assert victim.name in capsys.readouterr().err


def test_evaluate_writes_report(cli_artifacts, tmp_path):
    stories = tmp_path / "stories"
    assert run([
        "generate", "--data", cli_artifacts["data"], "--encoders", cli_artifacts["encoders"],
        "--prior", cli_artifacts["prior"], "--contextual", cli_artifacts["contextual"],
        "--out", stories, "--num-stories", "2", "--seed", "5", "--set", "sampler.steps=2",
    ]) == 0
    out = tmp_path / "eval"
    assert run([
        "evaluate", "--data", cli_artifacts["data"], "--encoders", cli_artifacts["encoders"],
        "--stories", stories, "--out", out,
        "--set", "evaluation.classifier_iterations=200", "--set", "evaluation.classifier_floor=0.0",
    ]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["num_stories"] == 2
    assert 0.0 <= report["char_acc"] <= 1.0 and report["fd"] >= 0.0


def test_ablate_emits_six_variant_reports(cli_artifacts, tmp_path):
    out = tmp_path / "ablations"
    assert run([
        "ablate", "--data", cli_artifacts["data"], "--encoders", cli_artifacts["encoders"],
        "--out", out, "--num-stories", "1",
        "--set", "prior.iterations=6", "--set", "prior.checkpoint_every=6",
        "--set", "contextual.iterations=6", "--set", "contextual.checkpoint_every=6",
        "--set", "contextual.base_width=16", "--set", "sampler.steps=2",
        "--set", "evaluation.classifier_iterations=60", "--set", "evaluation.classifier_floor=0.0",
    ]) == 0
    seed_dir = out / "seed2"
    reports = sorted(p.parent.name for p in seed_dir.glob("*/report.json"))
    assert reports == ["B0", "B1", "B2", "B3", "B4", "full"]
    assert (out / "combined_table.txt").exists()
    # variant switches round-trip through the stored config
    from storygen.checkpoint import read_checkpoint
    header, _ = read_checkpoint(seed_dir / "B4" / "contextual.ckpt")
    assert header["config"]["contextual.use_stage1_prior"] == "false"
    assert header["config"]["contextual.use_mim"] == "true"
    assert header["model_config"]["use_stage1_prior"] is False


def test_bench_speed_direction(cli_artifacts, tmp_path):
    out = tmp_path / "bench"
    assert run([
        "bench-speed", "--data", cli_artifacts["data"], "--encoders", cli_artifacts["encoders"],
        "--prior", cli_artifacts["prior"], "--contextual", cli_artifacts["contextual"],
        "--out", out, "--num-stories", "1", "--repetitions", "1", "--set", "sampler.steps=3",
    ]) == 0
    table = json.loads((out / "timings.json").read_text())
    assert table["single_pass"]["denoiser_invocations"] == 2 * 3
    assert table["autoregressive"]["denoiser_invocations"] == 4 * 2 * 3
    assert table["single_pass"]["std_s"] == 0.0  # one repetition
    assert table["autoregressive"]["mean_s"] > table["single_pass"]["mean_s"]


def test_contact_sheet_layout_and_determinism(tmp_path):
    ep = generate_episode(UNIT_SPEC, 2)
    a = render_contact_sheet(ep.frames, ep.captions, tmp_path / "a.png", upscale=4)
    b = render_contact_sheet(ep.frames, ep.captions, tmp_path / "b.png", upscale=4)
    assert a.read_bytes() == b.read_bytes()
    from PIL import Image

    img = Image.open(a)
    cell = 32 * 4
    assert img.size[0] == 5 * (cell + 4) + 4  # five cells plus padding
    # the reference cell is the upscaled input frame
    first = np.asarray(img.crop((4, 4, 4 + cell, 4 + cell)))
    expected = np.asarray(
        Image.fromarray((ep.frames[0].transpose(1, 2, 0) * 255).round().astype("uint8")).resize(
            (cell, cell), Image.NEAREST
        )
    )
    assert np.array_equal(first, expected)
