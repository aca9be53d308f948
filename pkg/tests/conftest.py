import numpy as np
import pytest

from deltanerf import pipeline as P
from deltanerf.diffusion import AutoEncoder, LatentDiffusion
from deltanerf.embedspace import EmbeddingSpace


@pytest.fixture(scope="session")
def prior_examples():
    """500 (source, oracle target) pairs from the generator used by gen-data."""
    ex = [P._prior_example((0, k)) for k in range(500)]
    images = np.array([e[0] for e in ex] + [e[1] for e in ex])
    captions = [e[3] for e in ex] + [e[4] for e in ex]
    return images, captions


@pytest.fixture(scope="session")
def trained_space(prior_examples):
    images, captions = prior_examples
    return EmbeddingSpace(epochs=20, seed=0).fit(images, captions)


@pytest.fixture(scope="session")
def tiny_models(prior_examples):
    """Briefly trained autoencoder and denoiser: cheap stand-ins for plumbing tests."""
    images, captions = prior_examples
    ae = AutoEncoder(steps=30, batch_size=16, seed=0).fit(images[:200])
    dm = LatentDiffusion(ae, steps=30, batch_size=16, base=16, seed=0).fit(images[:200], captions[:200])
    return ae, dm


TINY = dict(prior_pairs=40, ae_steps=20, diffusion_steps=20, embed_dim=8, embed_epochs=2, n_views=4,
            n_eval_views=10, T=50, steps_per_view=1, sample_steps=2, nerf_steps=4, n_samples=8,
            batch_rays=32, nerf_width=16, consistency_res=8)


@pytest.fixture(scope="session")
def tiny_config():
    """Seconds-scale configuration: exercises every stage, measures nothing."""
    return P.RunConfig(**TINY).validate()


@pytest.fixture(scope="session")
def tiny_run(tiny_config, tmp_path_factory):
    """A finished tiny run-all directory plus its stage results."""
    cfg = tiny_config.with_overrides(out_dir=str(tmp_path_factory.mktemp("tiny_run")))
    P.run_upstream(cfg)
    s1 = P.run_stage1(cfg)
    s2 = P.run_stage2(cfg)
    report = P.evaluate(cfg)
    return cfg, s1, s2, report
