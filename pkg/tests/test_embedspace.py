import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deltanerf import embedspace as E
from deltanerf import scenes as S
from deltanerf.vocab import OBJECT_COLORS, encode_tokens


def _sphere(color):
    return S.Scene((S.Primitive("sphere", (0.0, 0.0, 0.0), 0.5, OBJECT_COLORS[color]),))


def test_untrained_encoders_emit_unit_vectors():
    space = E.EmbeddingSpace().initialize()
    imgs = np.random.default_rng(0).uniform(size=(5, 32, 32, 3))
    assert np.allclose(np.linalg.norm(space.transform(imgs), axis=1), 1.0, atol=1e-9)
    t = space.encode_text([encode_tokens("red sphere"), encode_tokens("a blue box on black background")])
    assert torch.allclose(t.norm(dim=1), torch.ones(2, dtype=t.dtype), atol=1e-9)


def test_single_caption_dataset_fails():
    imgs = np.zeros((4, 32, 32, 3))
    with pytest.raises(ValueError, match="two distinct captions"):
        E.EmbeddingSpace(epochs=1).fit(imgs, [[3, 4]] * 4)


def test_training_reduces_loss(trained_space, prior_examples):
    images, captions = prior_examples
    untrained = E.EmbeddingSpace(seed=0).initialize()
    assert trained_space.contrastive_loss(images[:256], captions[:256]) < untrained.contrastive_loss(images[:256], captions[:256])
    assert trained_space.loss_history_[-1] < trained_space.loss_history_[0]


def test_trained_space_matches_color_to_caption(trained_space):
    cam = S.sample_cameras(1, 0)[0]
    red = S.render_reference(_sphere("red"), cam)[None]
    img = trained_space.encode_images(red)[0]
    t_red, t_blue = trained_space.encode_text([S.caption(_sphere("red")), S.caption(_sphere("blue"))])
    assert float(img @ t_red) > float(img @ t_blue)


def test_direction_loss_aligned_and_antiparallel():
    a = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    b = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    d = torch.tensor([0.6, 0.8, 0.0], dtype=torch.float64)
    assert float(E.direction_loss_from_embeddings(a, a + d, b, b + 3 * d)) == pytest.approx(0.0, abs=1e-12)
    assert float(E.direction_loss_from_embeddings(a, a + d, b, b - d)) == pytest.approx(2.0, abs=1e-12)


def test_direction_loss_matches_dot_product_oracle():
    rng = np.random.default_rng(5)
    u, v = rng.standard_normal((2, 16))
    u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
    zero = torch.zeros(16, dtype=torch.float64)
    got = float(E.direction_loss_from_embeddings(zero, torch.from_numpy(u), zero, torch.from_numpy(v)))
    assert got == pytest.approx(1.0 - float(u @ v), abs=1e-12)


def test_direction_loss_zero_direction_is_degenerate(trained_space):
    img = np.full((1, 32, 32, 3), 0.5)
    with pytest.raises(E.DegenerateDirectionError):
        E.clip_direction_loss(img, [3], img, [4], trained_space)


def test_clip_direction_loss_range_and_gradient(trained_space):
    rng = np.random.default_rng(1)
    src = torch.from_numpy(rng.uniform(size=(2, 3, 32, 32)))
    tgt = torch.from_numpy(rng.uniform(size=(2, 3, 32, 32))).requires_grad_(True)
    loss = E.clip_direction_loss(src, encode_tokens("blue sphere"), tgt, encode_tokens("red sphere"), trained_space)
    assert 0.0 <= loss.item() <= 2.0
    loss.backward()
    assert tgt.grad is not None and torch.isfinite(tgt.grad).all()
    assert not any(p.requires_grad for p in trained_space.image_encoder_.parameters())


def _fixture_views(n=24):
    sc, ins = S.recolor_fixture()
    cams = S.orbit_cameras(n)
    orig = np.array([S.render_reference(sc, c) for c in cams])
    edited = np.array([S.render_reference(S.apply_edit_oracle(sc, ins), c) for c in cams])
    return sc, ins, orig, edited


def test_direction_similarity_identical_views_are_degenerate(trained_space):
    sc, ins, orig, _ = _fixture_views(4)
    score = E.direction_similarity(orig, orig, S.caption(sc), ins.tokens, trained_space)
    assert score.n_degenerate == 4 and score.n_views == 4


def test_direction_similarity_is_complement_of_loss(trained_space):
    sc, ins, orig, edited = _fixture_views(1)
    score = E.direction_similarity(orig, edited, S.caption(sc), ins.tokens, trained_space)
    loss = E.clip_direction_loss(orig, S.caption(sc), edited, ins.tokens, trained_space)
    assert score.value == pytest.approx(1.0 - float(loss), abs=1e-10)


def test_direction_similarity_empty_or_mismatched_fails(trained_space):
    with pytest.raises(ValueError, match="empty"):
        E.direction_similarity([], [], [3], [4], trained_space)
    with pytest.raises(ValueError, match="differ"):
        E.direction_similarity(np.zeros((2, 32, 32, 3)), np.zeros((1, 32, 32, 3)), [3], [4], trained_space)


def test_oracle_edits_beat_unedited_views(trained_space):
    sc, ins, orig, edited = _fixture_views()
    unedited = np.array([S.render_reference(sc, c) for c in S.orbit_cameras(24, azimuth_offset=0.1)])
    good = E.direction_similarity(orig, edited, S.caption(sc), ins.tokens, trained_space).value
    base = E.direction_similarity(orig, unedited, S.caption(sc), ins.tokens, trained_space).value
    assert good - base >= 0.2


def test_oracle_edits_are_consistent(trained_space):
    _, _, orig, edited = _fixture_views()
    assert E.direction_consistency(orig, edited, trained_space).value >= 0.9


def test_consistency_constant_and_alternating_directions():
    d = np.array([0.3, -0.2, 0.9])
    assert E.consistency_of_directions(np.stack([d] * 5)).value == pytest.approx(1.0, abs=1e-12)
    assert E.consistency_of_directions(np.stack([d, -d] * 3)).value == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(ValueError):
        E.consistency_of_directions(d[None])


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_similarity_invariant_to_common_rescaling(scale, seed):
    rng = np.random.default_rng(seed)
    deltas = rng.standard_normal((6, 8))
    dt = rng.standard_normal(8)
    assert E.similarity_of_directions(deltas * scale, dt).value == pytest.approx(
        E.similarity_of_directions(deltas, dt).value, abs=1e-12)
    assert E.consistency_of_directions(deltas * scale).value == pytest.approx(
        E.consistency_of_directions(deltas).value, abs=1e-12)


def test_encoder_cosines_bounded(trained_space):
    rng = np.random.default_rng(2)
    a = trained_space.transform(rng.uniform(size=(8, 32, 32, 3)))
    c = a @ a.T
    assert np.all(c <= 1 + 1e-12) and np.all(c >= -1 - 1e-12)


def test_frechet_identical_sets():
    x = np.random.default_rng(0).standard_normal((50, 4))
    assert abs(E.frechet_distance(x, x)) <= 1e-8


def test_frechet_mean_shift_only():
    x = np.random.default_rng(1).standard_normal((40, 3))
    d = np.array([1.0, -2.0, 0.5])
    assert E.frechet_distance(x, x + d) == pytest.approx(float(d @ d), abs=1e-8)


def test_frechet_matches_scipy_sqrtm_oracle():
    rng = np.random.default_rng(3)
    a = rng.multivariate_normal([0, 1, 2], [[2, 0.5, 0], [0.5, 1, 0.3], [0, 0.3, 0.5]], size=200)
    b = rng.multivariate_normal([1, 0, 2], [[1, -0.2, 0.1], [-0.2, 2, 0], [0.1, 0, 1]], size=300)
    sa, sb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = scipy.linalg.sqrtm(sa @ sb).real
    ref = float(np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(sa + sb - 2 * covmean))
    assert E.frechet_distance(a, b) == pytest.approx(ref, abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_frechet_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((20, 5))
    b = rng.standard_normal((25, 5)) * rng.uniform(0.5, 2) + rng.standard_normal(5)
    assert abs(E.frechet_distance(a, b) - E.frechet_distance(b, a)) <= 1e-9
    assert abs(E.frechet_distance(a, a)) <= 1e-8


def test_frechet_needs_enough_samples():
    with pytest.raises(ValueError, match="at least 6"):
        E.frechet_distance(np.zeros((5, 5)), np.zeros((10, 5)))


def test_save_load_round_trip(tmp_path, trained_space):
    trained_space.save(tmp_path / "emb.dnar")
    back = E.EmbeddingSpace().load(tmp_path / "emb.dnar")
    imgs = np.random.default_rng(0).uniform(size=(3, 32, 32, 3))
    assert np.array_equal(back.transform(imgs), trained_space.transform(imgs))
    assert back.get_params()["dim"] == 64
