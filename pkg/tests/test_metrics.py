import numpy as np
import pytest
import scipy.linalg
import torch

from dhvton.core import ConfigError, DimensionError, SeededRng
from dhvton.metrics import (
    MetricReport,
    OracleTryOn,
    evaluate,
    fid,
    fid_from_moments,
    format_table,
    gaussian_window,
    garment_box_lpips,
    kid,
    lpips_proxy,
    masked_ssim,
    metric_encoder,
    mmd2_unbiased,
    ssim,
)
from dhvton.synthdata import collate, gen_sample, make_split


@pytest.fixture(scope="module")
def enc():
    return metric_encoder()


def brute_ssim(a, b):
    """Explicit 11x11 window sums per pixel, symmetric padding."""
    x, y = (np.asarray(a, np.float64) + 1) / 2, (np.asarray(b, np.float64) + 1) / 2
    g = gaussian_window()
    w2 = np.outer(g, g)
    xp, yp = np.pad(x, 5, mode="symmetric"), np.pad(y, 5, mode="symmetric")
    c1, c2 = 0.01**2, 0.03**2
    h, w = x.shape
    vals = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            px, py = xp[i : i + 11, j : j + 11], yp[i : i + 11, j : j + 11]
            mx, my = (w2 * px).sum(), (w2 * py).sum()
            vx = (w2 * (px - mx) ** 2).sum()
            vy = (w2 * (py - my) ** 2).sum()
            cxy = (w2 * (px - mx) * (py - my)).sum()
            vals[i, j] = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return vals.mean()


# --- SSIM -----------------------------------------------------------------


def test_ssim_self_is_one():
    x = SeededRng(0).normal((3, 16, 12)).clamp(-1, 1)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_closed_form():
    u, v = 0.3, 0.8
    a = torch.full((1, 12, 12), 2 * u - 1, dtype=torch.float64)
    b = torch.full((1, 12, 12), 2 * v - 1, dtype=torch.float64)
    c1 = 0.01**2
    assert ssim(a, b) == pytest.approx((2 * u * v + c1) / (u * u + v * v + c1), abs=1e-9)


def test_ssim_matches_brute_force():
    rng = SeededRng(1)
    a = rng.normal((14, 13), dtype=torch.float64).clamp(-1, 1)
    b = (a + 0.3 * rng.normal((14, 13), dtype=torch.float64)).clamp(-1, 1)
    assert ssim(a, b) == pytest.approx(brute_ssim(a.numpy(), b.numpy()), abs=1e-6)


def test_ssim_bounds_and_shape_error():
    rng = SeededRng(2)
    a, b = rng.normal((3, 10, 10)).clamp(-1, 1), rng.normal((3, 10, 10)).clamp(-1, 1)
    assert -1 <= ssim(a, b) <= 1
    with pytest.raises(DimensionError):
        ssim(a, b[:, :9])


def test_masked_ssim_only_reads_mask():
    rng = SeededRng(3)
    a = rng.normal((1, 3, 20, 20)).clamp(-1, 1)
    b = a.clone()
    mask = torch.zeros(1, 1, 20, 20)
    mask[..., :5, :5] = 1
    b[..., 15:, 15:] = -a[..., 15:, 15:]  # far outside the mask and its window
    assert masked_ssim(b, a, mask) == pytest.approx(1.0, abs=1e-12)


# --- FID / KID ------------------------------------------------------------


def oracle_fid(a, b):
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = scipy.linalg.sqrtm(ca @ cb).real
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(ca + cb - 2 * covmean))


def test_fid_identical_sets():
    a = SeededRng(4).normal((50, 6), dtype=torch.float64).numpy()
    assert fid(a, a) <= 1e-6


def test_fid_symmetry_and_oracle():
    rng = SeededRng(5)
    a = rng.normal((40, 2), dtype=torch.float64).numpy()
    b = rng.normal((60, 2), dtype=torch.float64).numpy() @ np.array([[1.5, 0.3], [0.0, 0.7]]) + [0.5, -1.0]
    assert abs(fid(a, b) - fid(b, a)) <= 1e-6
    assert fid(a, b) == pytest.approx(oracle_fid(a, b), abs=1e-8)


def test_fid_analytic_gaussians():
    d = 5
    mu_b = np.zeros(d)
    mu_b[0] = 1.0
    assert fid_from_moments(np.zeros(d), np.eye(d), mu_b, np.eye(d)) == 1.0


def test_fid_errors():
    with pytest.raises(ConfigError):
        fid(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(DimensionError):
        fid(np.zeros((4, 3)), np.zeros((5, 2)))


def test_kid_hand_two_point_case():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    # k(x,x) = (1/2 + 1)^3 = 3.375, k(e1,e2) = 1
    # within terms: off-diagonal mean 1 each; cross mean (2*3.375 + 2)/4
    hand = 1.0 + 1.0 - 2 * (2 * 3.375 + 2) / 4
    assert hand == -2.375
    assert abs(mmd2_unbiased(x, x) - hand) <= 1e-9
    assert abs(kid(x, x, subset_size=2, n_subsets=3) - hand) <= 1e-9


def test_kid_same_distribution_near_zero():
    vals = []
    for s in range(20):
        rng = SeededRng(100 + s)
        a = rng.normal((200, 4), dtype=torch.float64).numpy()
        b = rng.normal((200, 4), dtype=torch.float64).numpy()
        vals.append(kid(a, b, subset_size=50, n_subsets=20, rng=SeededRng(s)))
    vals = np.array(vals)
    assert abs(vals.mean()) <= 3 * vals.std(ddof=1) / np.sqrt(len(vals))


def test_kid_reproducible_and_config_errors():
    rng = SeededRng(6)
    a, b = rng.normal((30, 3)).numpy(), rng.normal((30, 3)).numpy()
    assert kid(a, b, 10, 5, SeededRng(1)) == kid(a, b, 10, 5, SeededRng(1))
    assert np.isfinite(kid(a + 3.0, b + 3.0, 10, 5))
    with pytest.raises(ConfigError):
        kid(a, b, subset_size=31)
    with pytest.raises(ConfigError):
        kid(a, b, subset_size=1)


# --- LPIPS proxy ----------------------------------------------------------


def test_lpips_identity_symmetry_monotone(enc):
    rng = SeededRng(7)
    a = rng.normal((3, 32, 24)).clamp(-1, 1)
    b = rng.normal((3, 32, 24)).clamp(-1, 1)
    assert lpips_proxy(a, a, enc) == 0.0
    assert lpips_proxy(a, b, enc) == pytest.approx(lpips_proxy(b, a, enc), abs=1e-12)
    noise = SeededRng(8).uniform((3, 32, 24), -1, 1)
    noise = torch.from_numpy(noise).float()
    dists = [lpips_proxy(a, (a + s * noise).clamp(-1, 1), enc) for s in (0.0, 0.1, 0.2, 0.4, 0.8)]
    assert all(x <= y for x, y in zip(dists, dists[1:]))


def test_lpips_requires_intermediates():
    class Flat:
        pass

    with pytest.raises(ConfigError):
        lpips_proxy(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8), Flat())


def test_garment_box_lpips_zero_for_ground_truth(enc):
    x0, c = collate([gen_sample(1, 2), gen_sample(3, 4)])
    assert garment_box_lpips(x0, x0, c.mask, enc) == 0.0


# --- reports and evaluation --------------------------------------------------


def test_unpaired_report_omits_fields():
    r = MetricReport("unpaired", 20, fid=1.0, kid=0.1)
    d = r.to_dict()
    assert "ssim" not in d and "lpips_proxy" not in d
    assert {"fid", "kid", "n_images", "setting"} <= set(d)
    with pytest.raises(ConfigError):
        MetricReport("unpaired", 20, fid=1.0, kid=0.1, ssim=0.5)
    with pytest.raises(ConfigError):
        MetricReport("other", 20, fid=1.0, kid=0.1)


def test_table_column_order():
    p = MetricReport("paired", 4, fid=1.0, kid=0.01, ssim=0.9, lpips_proxy=0.1)
    u = MetricReport("unpaired", 4, fid=2.0, kid=0.02)
    header = format_table([("x", p, u)]).splitlines()[0].split()
    assert header == ["run", "SSIM↑", "FID↓", "KID↓", "LPIPS↓", "|", "FID↓", "KID↓"]


def test_evaluate_oracle_model(enc):
    recs = make_split(6, 3).records
    paired = evaluate(recs, OracleTryOn(), "paired", kid_subset=4, kid_subsets=5, encoder=enc)
    assert paired.ssim == pytest.approx(1.0, abs=1e-12)
    assert paired.fid <= 1e-6
    assert paired.lpips_proxy == 0.0
    assert paired.n_images == 6
    unpaired = evaluate(recs, OracleTryOn(), "unpaired", kid_subset=4, kid_subsets=5, encoder=enc)
    assert unpaired.ssim is None and unpaired.lpips_proxy is None
    assert np.isfinite(unpaired.fid) and np.isfinite(unpaired.kid)


def test_evaluate_skips_failing_items(enc):
    class Flaky:
        def generate(self, samples, rng):
            if len(samples) > 1 or samples[0].id[0] % 3 == 0:
                raise RuntimeError("boom")
            return torch.stack([s.person for s in samples])

    recs = make_split(12, 1).records
    n_bad = sum(r.person_seed % 3 == 0 for r in recs if r.setting == "paired")
    rep = evaluate(recs, Flaky(), "paired", kid_subset=2, kid_subsets=3, encoder=enc)
    assert rep.skipped == n_bad
    assert rep.n_images == 12 - n_bad
