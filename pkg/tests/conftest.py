import numpy as np
import pytest

from watermark_lab.config import Settings
from watermark_lab.core.rng import RngStream
from watermark_lab.models.core import Prompt, SecretKey
from watermark_lab.toy_models.markov import MarkovModel
from watermark_lab.toy_models.perturb import SpanPerturber
from watermark_lab.toy_models.quality import ReferenceQuality

REFERENCE_ROWS = [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]]


@pytest.fixture
def rng():
    return RngStream(1234, "test")


@pytest.fixture
def prompt():
    return Prompt(tokens=(0,), identifier="p0")


@pytest.fixture
def uniform3():
    return MarkovModel.uniform(3, order=1, length=4)


@pytest.fixture
def reference3():
    return MarkovModel(
        vocabulary={"size": 3},
        order=1,
        transition_table=np.array(REFERENCE_ROWS),
        initial_distribution=np.full(3, 1 / 3),
        generation_length=4,
    )


@pytest.fixture
def reference_quality(reference3):
    return ReferenceQuality(reference_model=reference3, slope=0.1, intercept=0.9)


@pytest.fixture
def full_resample(uniform3):
    return SpanPerturber(proposal_model=uniform3, span_length=4, top_p=1.0)


@pytest.fixture
def key():
    return SecretKey(key_bytes=bytes(range(32)))


@pytest.fixture
def settings():
    return Settings(workers=1, output_dir="runs")
