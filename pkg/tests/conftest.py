import numpy as np
import pytest

from sepkit.corpus import build_mixture, desk_classes, disjoint_classes, generate_source
from sepkit.dsp import Waveform


def make_clips(classes, tag, count, m_range=(2, 2), duration=2.0, sr=8000,
               snr_range=(-5.0, 5.0), seed=7):
    """Deterministic list of labeled mixtures for tests."""
    n_classes = len(classes)
    rng = np.random.default_rng([seed, tag])
    clips = []
    for i in range(count):
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        labels = sorted(rng.choice(n_classes, size=m, replace=False).tolist())
        stems = [generate_source(classes[l], duration, sr, int(rng.integers(2**31)))
                 for l in labels]
        clip = build_mixture(stems, snr_range, int(rng.integers(2**31)))
        clip.clip_id = f"{tag}_{i:04d}"
        clips.append(clip)
    return clips


@pytest.fixture(scope="session")
def disjoint3():
    return disjoint_classes()


@pytest.fixture(scope="session")
def desk6():
    return desk_classes()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def white(n, seed=0, sr=8000, scale=0.3):
    return Waveform(np.random.default_rng(seed).standard_normal(n) * scale, sr)
