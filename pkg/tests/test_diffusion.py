import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deltanerf import diffusion as D
from deltanerf import numerics as nx
from deltanerf import scenes as S
from deltanerf.embedspace import frechet_distance
from deltanerf.numerics import RngStream
from deltanerf.vocab import OBJECT_COLORS


def test_published_schedule_endpoints():
    s = D.make_schedule(1000, 0.00085, 0.012)
    assert s.T == 1000
    assert s.beta[0] == 0.00085 and s.beta[-1] == pytest.approx(0.012, abs=1e-15)
    assert np.all(np.diff(s.beta) >= 0) and np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < s.alpha_bar[0] <= 1 - s.beta[0]
    assert np.all((s.beta > 0) & (s.beta < 1))


def test_single_step_schedule():
    s = D.make_schedule(1, 0.01, 0.01)
    assert list(s.beta) == [0.01] and s.alpha_bar[0] == pytest.approx(0.99, abs=1e-15)


def test_alpha_bar_matches_running_product():
    s = D.make_schedule(1000, 0.00085, 0.012)
    prod, worst = 1.0, 0.0
    for t in range(1000):
        prod *= 1.0 - (0.00085 + (0.012 - 0.00085) * t / 999)
        worst = max(worst, abs(prod - s.alpha_bar[t]))
    assert worst < 1e-12


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_invalid_schedule(args):
    with pytest.raises(ValueError):
        D.make_schedule(*args)


def test_q_sample_zero_noise():
    s = D.make_schedule()
    z0 = torch.from_numpy(np.random.default_rng(0).standard_normal((2, 4, 8, 8)))
    out = D.q_sample(z0, 500, torch.zeros_like(z0), s)
    assert torch.allclose(out, math.sqrt(s.alpha_bar[499]) * z0, atol=0, rtol=1e-15)


def test_q_sample_at_T_forgets_data():
    s = D.make_schedule()
    n = 10_000
    z0 = torch.from_numpy(RngStream(1, 1).normal(n))
    noise = torch.from_numpy(RngStream(1, 2).normal(n))
    zt = D.q_sample(z0, 1000, noise, s)
    assert abs(np.corrcoef(zt.numpy(), z0.numpy())[0, 1]) < 0.05


@pytest.mark.parametrize("t", [1, 10, 250, 1000])
def test_q_sample_variance(t):
    s = D.make_schedule()
    n = 100_000
    z0 = torch.full((n,), 0.7, dtype=nx.DTYPE)
    zt = D.q_sample(z0, t, torch.from_numpy(RngStream(3, t).normal(n)), s)
    resid = (zt - math.sqrt(s.alpha_bar[t - 1]) * z0).numpy()
    assert resid.var() == pytest.approx(1 - s.alpha_bar[t - 1], rel=0.02)


def test_q_sample_errors():
    s = D.make_schedule(10)
    z = torch.zeros(3)
    with pytest.raises(ValueError, match="outside"):
        D.q_sample(z, 11, z, s)
    with pytest.raises(ValueError, match="outside"):
        D.q_sample(z, 0, z, s)
    with pytest.raises(nx.ShapeError):
        D.q_sample(z, 1, torch.zeros(4), s)


def test_posterior_mean_examples():
    s = D.NoiseSchedule(np.array([0.01]), np.array([0.99]), np.array([0.9]))
    one = torch.ones(1, dtype=nx.DTYPE)
    expect = (1 - 0.01 / math.sqrt(0.1)) / math.sqrt(0.99)
    assert float(D.posterior_mean(one, 1, one, s)) == pytest.approx(expect, abs=1e-15)
    assert float(D.posterior_mean(one, 1, 0 * one, s)) == pytest.approx(1 / math.sqrt(0.99), abs=1e-15)
    tiny = D.NoiseSchedule(np.array([1e-12]), np.array([1 - 1e-12]), np.array([0.5]))
    assert float(D.posterior_mean(one, 1, one, tiny)) == pytest.approx(1.0, abs=1e-10)


def test_predict_x0_inverts_q_sample():
    s = D.make_schedule()
    rng = np.random.default_rng(4)
    z0 = torch.from_numpy(rng.standard_normal((3, 4, 8, 8)))
    eps = torch.from_numpy(rng.standard_normal((3, 4, 8, 8)))
    t = np.array([1, 500, 1000])
    back = D.predict_x0(D.q_sample(z0, t, eps, s), t, eps, s)
    assert float((back - z0).abs().max()) < 1e-10
    zt = D.q_sample(z0, t, eps, s)
    expect = zt / torch.from_numpy(np.sqrt(s.alpha_bar[t - 1]))[:, None, None, None]
    assert torch.allclose(D.predict_x0(zt, t, torch.zeros_like(zt), s), expect, rtol=1e-14, atol=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_diffusion_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = (torch.from_numpy(rng.standard_normal((2, 4, 8, 8)) * rng.uniform(0, 10)) for _ in range(2))
    assert float(D.diffusion_loss(a, b)) >= 0.0
    assert float(D.diffusion_loss(a, a)) == 0.0


def test_respaced_schedule_is_consistent():
    s = D.make_schedule()
    ts, sub = D.respaced(s, 50)
    assert ts[-1] == 1000 and ts[0] == 1 and len(ts) == 50
    np.testing.assert_allclose(sub.alpha_bar, s.alpha_bar[ts - 1], rtol=0, atol=0)
    np.testing.assert_allclose(np.cumprod(sub.alpha), sub.alpha_bar, rtol=1e-12)
    assert D.respaced(s, 1000)[1] is s


# -- models -------------------------------------------------------------------

def test_autoencoder_shapes_and_pixel_mode(tiny_models):
    ae, _ = tiny_models
    x = np.random.default_rng(0).uniform(size=(2, 32, 32, 3))
    z = ae.transform(x)
    assert z.shape == (2, 4, 8, 8)
    assert ae.inverse_transform(z).shape == (2, 32, 32, 3)
    px = D.AutoEncoder(mode="pixel").fit(x)
    assert px.reconstruction_psnr(x) == float("inf")
    with pytest.raises(ValueError, match="32x32"):
        D.AutoEncoder(steps=1).fit(np.zeros((1, 16, 16, 3)))


def test_autoencoder_save_load(tmp_path, tiny_models):
    ae, _ = tiny_models
    ae.save(tmp_path / "ae.dnar")
    back = D.AutoEncoder().load(tmp_path / "ae.dnar")
    x = np.random.default_rng(1).uniform(size=(2, 32, 32, 3))
    assert torch.equal(back.transform(x), ae.transform(x))


def test_denoiser_output_shape_and_bottleneck(tiny_models):
    _, dm = tiny_models
    z = torch.zeros((3,) + dm.latent_shape)
    assert dm.eps(z, 10, z, [[3, 4]]).shape == z.shape
    seen = []
    dm.eps(z, 10, z, [[3]], shift=lambda b, t: seen.append(b.shape) or b)
    assert seen == [(3, dm.bottleneck, 2, 2)]


def test_perfect_predictor_has_zero_loss():
    eps = torch.from_numpy(np.random.default_rng(0).standard_normal((4, 4, 8, 8)))
    assert float(D.diffusion_loss(eps, eps.clone())) == 0.0


def test_denoiser_divergence_reports_step(tiny_models, prior_examples):
    ae, _ = tiny_models
    images, captions = prior_examples
    dm = D.LatentDiffusion(ae, steps=20, base=16, lr=1e30, seed=0)
    with pytest.raises(nx.NonFiniteError, match="step"):
        dm.fit(images[:64], captions[:64])


def test_zero_init_single_step_sample():
    ae = D.AutoEncoder(mode="pixel").fit(np.zeros((1, 32, 32, 3)))
    dm = D.LatentDiffusion(ae, T=1, beta_1=0.02, beta_T=0.02, base=8, bottleneck=16, init="zero").initialize()
    out, z = dm.sample(2, tokens=[[]], steps=1, seed=3, return_latents=True)
    zT = np.stack([RngStream(3, nx.stream_id("sample", k)).normal(3 * 32 * 32).reshape(3, 32, 32) for k in range(2)])
    expect = torch.from_numpy(zT / math.sqrt(1 - 0.02))
    assert torch.allclose(z, expect, rtol=1e-14, atol=0)
    np.testing.assert_array_equal(out, np.clip(ae.inverse_transform(expect), 0, 1))
    again = dm.sample(2, tokens=[[]], steps=1, seed=3)
    np.testing.assert_array_equal(out, again)


def test_zero_delta_sample_is_bit_identical(tiny_models):
    from deltanerf.delta import DeltaNet, apply_delta
    _, dm = tiny_models
    h = DeltaNet(dm.bottleneck)
    for p in h.parameters():
        torch.nn.init.zeros_(p)
    cond = np.random.default_rng(2).uniform(size=(2, 32, 32, 3))
    a = dm.sample(cond_images=cond, tokens=[[3]], steps=10, seed=1)
    b = dm.sample(cond_images=cond, tokens=[[3]], steps=10, seed=1, shift=lambda x, t: apply_delta(x, t, h))
    np.testing.assert_array_equal(a, b)


def test_sample_independent_of_batching(tiny_models):
    _, dm = tiny_models
    cond = np.random.default_rng(3).uniform(size=(3, 32, 32, 3))
    full = dm.sample(cond_images=cond, tokens=[[3]], steps=8, seed=5)
    parts = [dm.sample(cond_images=cond[k:k + 1], tokens=[[3]], steps=8, seed=5, stream_offset=k) for k in range(3)]
    # noise streams are per sample; batched convolutions may reorder sums in the last bit
    np.testing.assert_allclose(full, np.concatenate(parts), rtol=0, atol=1e-12)


def test_sample_start_t(tiny_models):
    _, dm = tiny_models
    cond = np.random.default_rng(3).uniform(size=(2, 32, 32, 3))
    a = dm.sample(cond_images=cond, tokens=[[3]], steps=8, seed=5, start_t=300)
    assert a.shape == cond.shape and np.all((a >= 0) & (a <= 1))
    with pytest.raises(ValueError):
        dm.sample(2, tokens=[[3]], steps=8, start_t=300)


def test_encode_semantic_deterministic_and_zero_delta(tiny_models):
    from deltanerf.delta import DeltaNet, apply_delta
    _, dm = tiny_models
    img = np.random.default_rng(4).uniform(size=(2, 32, 32, 3))
    a = dm.encode_semantic(img, [[3]])
    assert a.shape == (2, dm.bottleneck)
    assert torch.equal(a, dm.encode_semantic(img, [[3]]))
    h = DeltaNet(dm.bottleneck)
    for p in h.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(a, dm.encode_semantic(img, [[3]], shift=lambda b, t: apply_delta(b, t, h)))


def test_encode_semantic_nearby_views_closer_than_other_scenes(tiny_models):
    _, dm = tiny_models
    sc_a, sc_b = S.gen_scene(11), S.gen_scene(12)
    cams = S.sample_cameras(24, 0)
    a0 = S.render_reference(sc_a, cams[0])
    a1 = S.render_reference(sc_a, cams[1])
    b0 = S.render_reference(sc_b, cams[0])
    z = dm.encode_semantic(np.stack([a0, a1, b0]), [S.caption(sc_a), S.caption(sc_a), S.caption(sc_b)]).numpy()
    cos = lambda u, v: float(u @ v / np.linalg.norm(u) / np.linalg.norm(v))  # noqa: E731
    assert cos(z[0], z[1]) > cos(z[0], z[2])


def test_diffusion_save_load(tmp_path, tiny_models):
    ae, dm = tiny_models
    dm.save(tmp_path / "dm.dnar")
    back = D.LatentDiffusion(ae, base=16).load(tmp_path / "dm.dnar")
    assert back.checksum() == dm.checksum()
    assert not any(p.requires_grad for p in back.net_.parameters())


@pytest.fixture(scope="module")
def two_cluster():
    """Red spheres and blue boxes from varying cameras."""
    red = S.Scene((S.Primitive("sphere", (0, 0, 0), 0.5, OBJECT_COLORS["red"]),))
    blue = S.Scene((S.Primitive("box", (0, 0, 0), 0.3, OBJECT_COLORS["blue"]),))
    cams = S.sample_cameras(160, 21)
    imgs = np.array([S.render_reference(red if k % 2 else blue, c) for k, c in enumerate(cams)])
    caps = [S.caption(red if k % 2 else blue) for k in range(len(cams))]
    return imgs[:80], caps[:80], imgs[80:], caps[80:]


def test_two_cluster_prior_beats_random_init(two_cluster, trained_space):
    train, caps, held, held_caps = two_cluster
    ae = D.AutoEncoder(steps=600, seed=0).fit(train)
    dm = D.LatentDiffusion(ae, steps=1500, base=16, seed=0).fit(train, caps)
    rand = D.LatentDiffusion(ae, base=16, seed=0).initialize()
    assert dm.eval_loss(held, held_caps) < 0.5 * rand.eval_loss(held, held_caps)
    feats = trained_space.image_features
    ref = feats(held)
    fd_trained = frechet_distance(feats(dm.sample(80, tokens=held_caps, steps=50, seed=1)), ref)
    fd_random = frechet_distance(feats(rand.sample(80, tokens=held_caps, steps=50, seed=1)), ref)
    assert fd_trained * 5 <= fd_random
