import numpy as np
import pytest
import torch
from PIL import Image

from dhvton.core import ConfigError, DataError, SeededRng
from dhvton.synthdata import (
    MASK_FRACTION_RANGE,
    TEXTURE_VARIANCE_FLOOR,
    Manifest,
    SynthConfig,
    collate,
    derangement,
    gen_sample,
    garment_texture_variance,
    load_dir,
    make_split,
    sample_for_record,
)

# recorded on first run; any change to seeding or record layout shows up here
MANIFEST_100_SEED0 = "f5fb8e8b56ffa6f0fd78dcd659c2dd9e19ad2f1c8a7499aea728ecd65ae3335d"


def test_gen_sample_deterministic():
    a, b = gen_sample(3, 9), gen_sample(3, 9)
    for f in ("person", "garment", "mask", "masked_person", "pose", "densepose"):
        assert torch.equal(getattr(a, f), getattr(b, f))
    assert not torch.equal(a.person, gen_sample(4, 9).person)


def test_invariants_over_500_seeds():
    fracs, variances = [], []
    for i in range(500):
        s = gen_sample(1000 + i, 5000 + 7 * i)
        s.check()
        assert torch.all(s.mask * s.masked_person == 0)
        assert s.person.min() >= -1 and s.person.max() <= 1
        assert s.densepose.sum(0).max() <= 1
        assert s.pose.shape[0] == 8 and s.densepose.shape[0] == 5
        fracs.append(s.mask.mean().item())
        variances.append(garment_texture_variance(s.garment))
    lo, hi = MASK_FRACTION_RANGE
    assert lo <= min(fracs) and max(fracs) <= hi
    assert min(variances) > TEXTURE_VARIANCE_FLOOR


def test_garment_visible_inside_mask():
    # the worn garment differs from the masked-out background in the mask region
    s = gen_sample(11, 12)
    inside = s.mask.expand_as(s.person) > 0.5
    assert s.person[inside].abs().mean() > 0
    assert torch.all(s.masked_person[inside] == 0)


def test_check_rejects_violations():
    s = gen_sample(1, 2)
    s.masked_person = s.person.clone()
    with pytest.raises(DataError):
        s.check()
    s = gen_sample(1, 2)
    s.mask = torch.zeros_like(s.mask)
    s.masked_person = s.person.clone()
    with pytest.raises(DataError):
        s.check()


def test_derangement_properties():
    rng = SeededRng(0)
    assert derangement(2, rng).tolist() == [1, 0]
    for n in (3, 5, 20, 100):
        p = derangement(n, rng)
        assert sorted(p.tolist()) == list(range(n))
        assert np.all(p != np.arange(n))
    with pytest.raises(ConfigError):
        derangement(1, rng)


def test_make_split_and_manifest_hash(tmp_path):
    m = make_split(100, 0)
    assert len(m.setting("paired")) == len(m.setting("unpaired")) == 100
    for p, u in zip(m.setting("paired"), m.setting("unpaired")):
        assert p.person_seed == u.person_seed
        assert p.cond_garment_seed == p.garment_seed
        assert u.cond_garment_seed != u.garment_seed
    assert m.digest() == MANIFEST_100_SEED0
    assert make_split(100, 0).digest() == m.digest()
    path = tmp_path / "m.jsonl"
    m.write(path)
    assert Manifest.read(path).records == m.records
    with pytest.raises(ConfigError):
        make_split(1, 0)


def test_unpaired_record_uses_other_garment():
    m = make_split(4, 3)
    rec = m.setting("unpaired")[0]
    s = sample_for_record(rec)
    gt = gen_sample(rec.person_seed, rec.garment_seed)
    assert torch.equal(s.person, gt.person)
    assert not torch.equal(s.garment, gt.garment)


def test_collate_shapes():
    x0, c = collate([gen_sample(i, i + 1) for i in range(3)])
    assert x0.shape == (3, 3, 64, 48)
    assert c.mask.shape == (3, 1, 64, 48)
    assert c.pose.shape == (3, 8, 64, 48)
    assert c.densepose.shape == (3, 5, 64, 48)
    assert c.garment.shape == (3, 3, 64, 48)


def test_small_resolution_rejected():
    with pytest.raises(ConfigError):
        SynthConfig(height=16, width=12)


# --- directory ingestion ----------------------------------------------------


def _png(path, arr):
    Image.fromarray(arr).save(path)


def _write_item(root, stem, seed, with_aux=True):
    s = gen_sample(seed, seed + 1)
    to8 = lambda t: ((t.permute(1, 2, 0).numpy() + 1) * 127.5).round().astype(np.uint8)
    _png(root / "image" / f"{stem}.png", to8(s.person))
    _png(root / "cloth" / f"{stem}.png", to8(s.garment))
    _png(root / "agnostic-mask" / f"{stem}_mask.png", (s.mask[0].numpy() * 255).astype(np.uint8))
    if with_aux:
        np.save(root / "pose" / f"{stem}.npy", s.pose.numpy())
        labels = (s.densepose * torch.arange(1, 6).view(5, 1, 1)).sum(0).numpy().astype(np.int64)
        np.save(root / "densepose" / f"{stem}.npy", labels)
    return s


def _layout(root):
    for d in ("image", "cloth", "agnostic-mask", "pose", "densepose"):
        (root / d).mkdir(parents=True)
    return root


def test_load_dir_empty(tmp_path):
    with pytest.raises(DataError):
        load_dir(tmp_path)
    _layout(tmp_path / "ds")
    with pytest.raises(DataError):
        load_dir(tmp_path / "ds")


def test_load_dir_one_valid(tmp_path):
    root = _layout(tmp_path / "ds")
    ref = _write_item(root, "000", 42)
    items = list(load_dir(root))
    assert len(items) == 1
    s = items[0]
    s.check()
    assert torch.equal(s.mask, ref.mask)
    assert torch.equal(s.densepose, ref.densepose)
    assert torch.allclose(s.pose, ref.pose)
    assert (s.person - ref.person).abs().max() <= 1 / 127.5 + 1e-6
    assert s.warnings == ()


def test_load_dir_missing_aux_zero_filled(tmp_path):
    root = _layout(tmp_path / "ds")
    _write_item(root, "a", 5, with_aux=False)
    (s,) = list(load_dir(root))
    assert torch.all(s.pose == 0) and torch.all(s.densepose == 0)
    assert len(s.warnings) == 2


def test_load_dir_corrupt_among_three(tmp_path):
    root = _layout(tmp_path / "ds")
    for i, stem in enumerate(["a", "b", "c"]):
        _write_item(root, stem, 10 + i)
    (root / "image" / "b.png").write_bytes(b"not a png")
    ds = load_dir(root)
    items = list(ds)
    assert len(items) == 2
    assert len(ds.errors) == 1 and ds.errors[0].name == "b"
