import json

import pytest
import torch

import storygen.runtime as runtime
from conftest import unit_config
from storygen.checkpoint import config_hash, read_checkpoint, write_checkpoint
from storygen.errors import ConfigurationError, IntegrityError, NumericalFailure
from storygen.prior import load_prior
from storygen.runtime import resume_training, run_training


def fast_prior_cfg(iterations=30, **extra):
    cfg = unit_config()
    cfg["prior"].update(
        {
            "iterations": str(iterations),
            "log_every": "10",
            "checkpoint_every": "10",
            "lr": "1e-3",
        }
    )
    cfg["prior"].update({k: str(v) for k, v in extra.items()})
    return cfg


def test_checkpoint_container_roundtrip(tmp_path):
    tensors = {"a": torch.randn(3, 4), "b": torch.arange(6, dtype=torch.int64)}
    header = {"kind": "test", "step": 3}
    p1 = write_checkpoint(tmp_path / "one.ckpt", header, tensors)
    h, t = read_checkpoint(p1)
    assert h == header
    assert torch.equal(t["a"], tensors["a"]) and torch.equal(t["b"], tensors["b"])
    p2 = write_checkpoint(tmp_path / "two.ckpt", h, t)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_tamper_detected(tmp_path):
    p = write_checkpoint(tmp_path / "x.ckpt", {"kind": "test"}, {"a": torch.zeros(8)})
    raw = bytearray(p.read_bytes())
    raw[-40] ^= 0xFF  # flip a payload byte
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        read_checkpoint(p)


def test_training_writes_metrics_and_config_hash(tmp_path, unit_workspace):
    cfg = fast_prior_cfg()
    result = run_training(cfg, "prior", unit_workspace["data"], tmp_path / "run",
                          encoders_path=unit_workspace["encoders"])
    assert result.artifact.name == "prior.ckpt"
    records = [json.loads(line) for line in open(result.metrics_path)]
    assert records and all(set(r) == {"step", "loss", "lr", "wallclock"} for r in records)
    assert records[-1]["step"] == 30
    header, _ = read_checkpoint(result.final_checkpoint)
    assert header["config_hash"] == config_hash(header["config"])
    _, prior_header = load_prior(result.artifact)
    assert prior_header["config_hash"] == config_hash(prior_header["config"])


def test_resume_matches_uninterrupted_run(tmp_path, unit_workspace):
    cfg = fast_prior_cfg(iterations=24)
    full = run_training(cfg, "prior", unit_workspace["data"], tmp_path / "full",
                        encoders_path=unit_workspace["encoders"])
    part = run_training(cfg, "prior", unit_workspace["data"], tmp_path / "part",
                        encoders_path=unit_workspace["encoders"], stop_after_step=12)
    assert part.step == 12
    resumed = resume_training(part.final_checkpoint, unit_workspace["data"], tmp_path / "resumed",
                              encoders_path=unit_workspace["encoders"])
    assert resumed.step == 24
    _, full_t = read_checkpoint(full.final_checkpoint)
    _, res_t = read_checkpoint(resumed.final_checkpoint)
    for key in full_t:
        if key.startswith("module."):
            assert torch.equal(full_t[key], res_t[key]), key
    # resumed twice from the same checkpoint: identical logs (wallclock aside)
    resumed2 = resume_training(part.final_checkpoint, unit_workspace["data"], tmp_path / "resumed2",
                               encoders_path=unit_workspace["encoders"])
    a = [{k: v for k, v in json.loads(l).items() if k != "wallclock"} for l in open(resumed.metrics_path)]
    b = [{k: v for k, v in json.loads(l).items() if k != "wallclock"} for l in open(resumed2.metrics_path)]
    assert a == b


def test_resume_rejects_config_mismatch(tmp_path, unit_workspace):
    cfg = fast_prior_cfg(iterations=24)
    part = run_training(cfg, "prior", unit_workspace["data"], tmp_path / "part",
                        encoders_path=unit_workspace["encoders"], stop_after_step=12)
    changed = fast_prior_cfg(iterations=24, lr="5e-4")
    with pytest.raises(ConfigurationError, match="prior.lr"):
        run_training(changed, "prior", unit_workspace["data"], tmp_path / "bad",
                     encoders_path=unit_workspace["encoders"], resume_from=part.final_checkpoint)


def test_resume_at_final_step_is_noop(tmp_path, unit_workspace):
    cfg = fast_prior_cfg(iterations=20)
    done = run_training(cfg, "prior", unit_workspace["data"], tmp_path / "done",
                        encoders_path=unit_workspace["encoders"])
    again = resume_training(done.final_checkpoint, unit_workspace["data"], tmp_path / "noop",
                            encoders_path=unit_workspace["encoders"])
    assert again.step == 20
    assert again.final_checkpoint == done.final_checkpoint


def test_nonfinite_loss_aborts_with_checkpoint(tmp_path, unit_workspace, monkeypatch):
    cfg = fast_prior_cfg(iterations=40)
    real = runtime.prior_training_loss
    calls = {"n": 0}

    def exploding(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] >= 15:
            raise NumericalFailure("non-finite prior training loss")
        return real(*args, **kwargs)

    monkeypatch.setattr(runtime, "prior_training_loss", exploding)
    with pytest.raises(NumericalFailure, match="last finite state saved"):
        run_training(cfg, "prior", unit_workspace["data"], tmp_path / "abort",
                     encoders_path=unit_workspace["encoders"])
    aborts = list((tmp_path / "abort" / "checkpoints").glob("abort_step_*.ckpt"))
    assert len(aborts) == 1
    header, tensors = read_checkpoint(aborts[0])
    assert header["step"] == 14
    assert all(torch.isfinite(t).all() for k, t in tensors.items() if k.startswith("module."))


def test_missing_artifacts_are_configuration_errors(tmp_path, unit_workspace):
    cfg = fast_prior_cfg()
    with pytest.raises(ConfigurationError, match="dataset"):
        run_training(cfg, "prior", tmp_path / "nowhere", tmp_path / "o1",
                     encoders_path=unit_workspace["encoders"])
    with pytest.raises(ConfigurationError, match="encoders"):
        run_training(cfg, "prior", unit_workspace["data"], tmp_path / "o2", encoders_path=None)


def test_unknown_stage_rejected(tmp_path, unit_workspace):
    with pytest.raises(ConfigurationError, match="stage"):
        run_training(unit_config(), "decoder", unit_workspace["data"], tmp_path / "o")
