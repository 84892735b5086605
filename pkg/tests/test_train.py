import json

import pytest
import torch

from dhvton.config import RunConfig
from dhvton.core import ConfigError, load_checkpoint
from dhvton.train import (
    BACKBONE_CKPT,
    CONFIG_FILE,
    FINAL_CKPT,
    INIT_CKPT,
    LOSS_FILE,
    MANIFEST_FILE,
    SEEDS_FILE,
    VERSION_FILE,
    ConfigMismatch,
    FreezeViolation,
    load_trained,
    train,
)

TINY = dict(
    base_channels=8,
    channel_multipliers=[1, 2],
    attention_levels=[1],
    token_dim=16,
    n_train=6,
    n_eval=2,
    backbone_steps=3,
    gfc_steps=3,
)


def tiny(**kw):
    return RunConfig(**{**TINY, **kw})


def read_losses(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_zero_steps_checkpoint_equals_init(tmp_path):
    cfg = tiny(backbone_steps=0, gfc_steps=0, gfc_warm_start=False)
    res = train(cfg, tmp_path)
    init, final = load_checkpoint(tmp_path / INIT_CKPT), load_checkpoint(tmp_path / FINAL_CKPT)
    assert init.keys() == final.keys()
    assert all(torch.equal(init[k], final[k]) for k in init)
    assert (tmp_path / LOSS_FILE).read_text() == ""
    assert res.losses == []


def test_run_dir_contents(tmp_path):
    cfg = tiny(checkpoint_every=2)
    res = train(cfg, tmp_path)
    for name in (CONFIG_FILE, SEEDS_FILE, VERSION_FILE, MANIFEST_FILE, INIT_CKPT, BACKBONE_CKPT, FINAL_CKPT):
        assert (tmp_path / name).exists(), name
    assert (tmp_path / "ckpt_B000002.dhvt").exists()
    assert RunConfig.load(tmp_path / CONFIG_FILE) == cfg
    log = read_losses(tmp_path / LOSS_FILE)
    assert [(r["phase"], r["step"]) for r in log] == [("A", 1), ("A", 2), ("A", 3), ("B", 1), ("B", 2), ("B", 3)]
    assert res.freeze.passed
    model = load_trained(cfg, tmp_path / FINAL_CKPT)
    for k, v in res.model.named_tensors().items():
        assert torch.equal(v, model.named_tensors()[k])


def test_same_seed_bit_identical_loss_log(tmp_path):
    cfg = tiny()
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    assert (tmp_path / "a" / LOSS_FILE).read_bytes() == (tmp_path / "b" / LOSS_FILE).read_bytes()
    other = train(tiny(seed=1))
    assert [r["loss"] for r in other.losses] != [r["loss"] for r in read_losses(tmp_path / "a" / LOSS_FILE)]


def test_backbone_frozen_in_phase_b(tmp_path):
    cfg = tiny()
    train(cfg, tmp_path)
    bb, final = load_checkpoint(tmp_path / BACKBONE_CKPT), load_checkpoint(tmp_path / FINAL_CKPT)
    keys = [k for k in bb if k.startswith("backbone/")]
    assert keys and all(torch.equal(bb[k], final[k]) for k in keys)
    assert any(not torch.equal(bb[k], final[k]) for k in bb if k.startswith("gfc/"))


def test_resume_mismatch_refused_with_diff(tmp_path):
    train(tiny(gfc_steps=0), tmp_path)
    with pytest.raises(ConfigMismatch) as info:
        train(tiny(gfc_steps=0, lr=1e-4), tmp_path, resume=True)
    assert info.value.diff == {"lr": (3e-5, 1e-4)}
    assert "lr" in str(info.value)
    with pytest.raises(ConfigError):
        train(tiny(gfc_steps=0), tmp_path)


def test_resume_reuses_backbone(tmp_path):
    cfg = tiny()
    first = train(cfg, tmp_path)
    again = train(cfg, tmp_path, resume=True)
    assert [r["phase"] for r in again.losses] == ["B"] * 3
    assert [r["loss"] for r in again.losses] == list(first.phase_losses("B"))


def test_deliberate_unfreeze_detected(monkeypatch):
    import dhvton.train as tr

    real = tr.set_trainable

    def leaky(module, flag):
        real(module, flag)
        if flag is False and module.__class__.__name__ == "BackboneUNet":
            module.encoder.conv_in.weight.requires_grad_(True)

    monkeypatch.setattr(tr, "set_trainable", leaky)
    with pytest.raises(FreezeViolation) as info:
        train(tiny(checkpoint_every=1))
    assert not info.value.report.passed
    assert any("conv_in.weight" in name for name in info.value.report.drifted)
