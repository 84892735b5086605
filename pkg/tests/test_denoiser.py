import numpy as np
import pytest
import torch

from dhvton.core import ConfigError, SeededRng, make_optimizer, save_checkpoint, set_trainable
from dhvton.denoiser import (
    DHVTON,
    BackboneConfig,
    ControlVectors,
    GfcConfig,
    assert_frozen,
)
from dhvton.diffusion import Conditions, make_schedule, training_loss
from dhvton.synthdata import collate, gen_sample


def small_model(seed=0, **gfc):
    torch.manual_seed(seed)
    return DHVTON(BackboneConfig(base_channels=16, channel_multipliers=(1, 2), attention_levels=(1,)), GfcConfig(**gfc))


def random_batch(seed, b=2):
    rng = SeededRng(seed)
    x0, c = collate([gen_sample(seed * 7 + i, seed * 11 + i) for i in range(b)])
    x_t = rng.normal(tuple(x0.shape))
    t = torch.from_numpy(rng.integers(1, 51, b))
    return x0, x_t, t, c


def test_zero_init_controls_are_exact_zero():
    m = small_model()
    _, x_t, t, c = random_batch(1)
    cv = m.gfc_forward(x_t, t, c)
    assert cv.is_zero()
    assert [tuple(v.shape[1:]) for v in cv.per_site] == m.backbone.site_shapes(64, 48)


def test_zero_init_equivalence_ten_seeds():
    torch.manual_seed(0)
    m = DHVTON()
    # make the backbone output non-trivial (its output conv starts at zero)
    torch.nn.init.normal_(m.backbone.conv_out.weight, std=0.05)
    for seed in range(10):
        _, x_t, t, c = random_batch(seed)
        with torch.no_grad():
            a = m.combined_forward(x_t, t, c)
            b = m.backbone_forward(x_t, t, c)
        assert (a - b).abs().max().item() <= 1e-6
        assert a.abs().max() > 0


def test_zero_control_vectors_bit_equal():
    m = small_model()
    torch.nn.init.normal_(m.backbone.conv_out.weight, std=0.05)
    _, x_t, t, c = random_batch(2)
    zeros = ControlVectors([torch.zeros(2, *s) for s in m.backbone.site_shapes(64, 48)])
    with torch.no_grad():
        assert torch.equal(m.combined_forward(x_t, t, c, zeros), m.backbone_forward(x_t, t, c))


def test_half_controls_shape_only():
    m = small_model()
    for conv in [m.gfc.zero_mid, *m.gfc.zero_skips]:
        torch.nn.init.normal_(conv.weight, std=0.1)
    _, x_t, t, c = random_batch(3)
    with torch.no_grad():
        cv = m.gfc_forward(x_t, t, c)
        out = m.combined_forward(x_t, t, c, cv.scaled(0.5))
    assert out.shape == x_t.shape and torch.isfinite(out).all()


def test_degenerate_weights_constant_output():
    m = small_model()
    with torch.no_grad():
        for name, p in m.backbone.named_parameters():
            if name.endswith("bias") and name.startswith("conv_out"):
                p.copy_(torch.tensor([0.1, -0.2, 0.3]))
            else:
                p.zero_()
    _, x_t, t, c = random_batch(4)
    with torch.no_grad():
        out = m.backbone_forward(x_t, t, c)
    assert torch.isfinite(out).all()
    for ch, v in enumerate([0.1, -0.2, 0.3]):
        assert torch.allclose(out[:, ch], torch.full_like(out[:, ch], v))


def test_determinism_and_batch_independence():
    m = small_model()
    torch.nn.init.normal_(m.backbone.conv_out.weight, std=0.05)
    _, x_t, t, c = random_batch(5, b=1)
    with torch.no_grad():
        a = m.backbone_forward(x_t, t, c)
        assert torch.equal(a, m.backbone_forward(x_t, t, c))
        dup = Conditions(*(torch.cat([getattr(c, f)] * 2) for f in c.__dataclass_fields__))
        b = m.backbone_forward(torch.cat([x_t] * 2), torch.cat([t] * 2), dup)
    assert torch.allclose(b[0], b[1], atol=1e-6)
    assert torch.allclose(b[:1], a, atol=1e-5)


def test_channel_mismatch_errors():
    m = small_model()
    _, x_t, t, c = random_batch(6)
    c.pose = c.pose[:, :3]
    with pytest.raises(ConfigError):
        m.gfc_forward(x_t, t, c)
    with pytest.raises(ConfigError):
        m.backbone(x_t, c.mask, c.masked_person[:, :2], torch.zeros(2, 16, 64), t)
    with pytest.raises(ConfigError):
        BackboneConfig(attention_levels=())
    with pytest.raises(ConfigError):
        GfcConfig(lam=2.0)


def _gfc_step(m, seed=7):
    set_trainable(m.backbone, False)
    opt = make_optimizer(m.parameters(), lr=1e-3)
    x0, _, _, c = random_batch(seed)
    rng = SeededRng(seed)
    loss = training_loss(m, x0, c, rng.integers(1, 51, 2), rng.normal(tuple(x0.shape)), make_schedule(50, 0.002, 0.4))
    opt.zero_grad()
    loss.backward()
    return opt


def test_gradient_routing():
    m = small_model()
    torch.nn.init.normal_(m.backbone.conv_out.weight, std=0.05)
    opt = _gfc_step(m)
    for p in m.backbone.parameters():
        assert p.grad is None
    # the zero projections are what first receives gradient
    for conv in [m.gfc.zero_mid, *m.gfc.zero_skips]:
        assert conv.weight.grad is not None and conv.weight.grad.abs().sum() > 0
    opt.step()
    x0, x_t, t, c = random_batch(8)
    cv = m.gfc_forward(x_t, t, c)
    assert not cv.is_zero()
    # every control-branch block touched by the batch gets gradient after the projections move
    opt = _gfc_step(m, seed=9)
    blocks = {"hint": m.gfc.hint, **{f"attn{k}": v for k, v in m.gfc.encoder.attn.items()}, "mid": m.gfc.encoder.mid_attn}
    for name, blk in blocks.items():
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in blk.parameters()), name


def test_condition_sensitivity_once_projections_nonzero():
    m = small_model()
    torch.nn.init.normal_(m.backbone.conv_out.weight, std=0.05)
    for conv in [m.gfc.zero_mid, *m.gfc.zero_skips]:
        torch.nn.init.normal_(conv.weight, std=0.1)
    _, x_t, t, c = random_batch(10)
    with torch.no_grad():
        a = m.combined_forward(x_t, t, c)
        c.garment = c.garment.flip(-1)
        b = m.combined_forward(x_t, t, c)
    assert (a - b).abs().max() > 0


def test_lambda_zero_equals_plain_self_attention_branch():
    m = small_model(lam=0.0)
    for conv in [m.gfc.zero_mid, *m.gfc.zero_skips]:
        torch.nn.init.normal_(conv.weight, std=0.1)
    _, x_t, t, c = random_batch(11)
    with torch.no_grad():
        a = m.gfc_forward(x_t, t, c)
        m.gfc.set_hybrid(False)
        b = m.gfc_forward(x_t, t, c)
    for u, v in zip(a.per_site, b.per_site):
        assert torch.equal(u, v)


def test_set_lambda_validates():
    m = small_model()
    m.gfc.set_lambda(0.5)
    assert all(b.attn2.lam == 0.5 for b in m.gfc.hybrid_blocks())
    with pytest.raises(ConfigError):
        m.gfc.set_lambda(1.6)


def test_warm_start_copies_backbone_weights():
    m = small_model()
    m.gfc.init_from_backbone(m.backbone)
    be, ge = m.backbone.encoder, m.gfc.encoder
    assert torch.equal(be.conv_in.weight, ge.conv_in.weight)
    assert torch.equal(be.mid1.conv1.weight, ge.mid1.conv1.weight)
    assert torch.equal(be.mid_attn.attn2.w_k, ge.mid_attn.attn2.w_k_g)
    assert torch.equal(be.mid_attn.attn1.w_k, ge.mid_attn.attn2.w_k)
    assert torch.equal(be.mid_attn.attn2.w_q, ge.mid_attn.attn2.w_q)
    # zero projections stay zero, so the warm-started model is still inert
    _, x_t, t, c = random_batch(12)
    assert m.gfc_forward(x_t, t, c).is_zero()


def test_assert_frozen_positive_and_negative(tmp_path):
    m = small_model()
    ref = tmp_path / "pre.dhvt"
    save_checkpoint(ref, m.named_tensors())
    assert assert_frozen(m.backbone, ref).passed
    opt = _gfc_step(m)
    opt.step()
    rep = assert_frozen(m.backbone, ref)
    assert rep.passed, str(rep)
    # negative control: unfreeze one tensor for one step
    p = m.backbone.encoder.conv_in.weight
    p.requires_grad_(True)
    opt = make_optimizer([p], lr=1e-3)
    x0, _, _, c = random_batch(13)
    rng = SeededRng(13)
    loss = training_loss(m, x0, c, rng.integers(1, 51, 2), rng.normal(tuple(x0.shape)), make_schedule(50, 0.002, 0.4))
    opt.zero_grad()
    loss.backward()
    opt.step()
    rep = assert_frozen(m.backbone, ref)
    assert not rep.passed
    assert rep.drifted == ["backbone/encoder.conv_in.weight"]
    assert "FAIL" in str(rep) and "encoder.conv_in.weight" in str(rep)


def test_named_tensors_roundtrip(tmp_path):
    m = small_model(0)
    other = small_model(1)
    other.load_named_tensors(m.named_tensors())
    for k, v in m.named_tensors().items():
        assert torch.equal(v, other.named_tensors()[k])
    assert all(k.split("/")[0] in ("backbone", "gfc", "encoder") for k in m.named_tensors())
