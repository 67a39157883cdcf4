import math

import numpy as np
import pytest
from scipy import stats

from watermark_lab.core.prf import derive_subkey
from watermark_lab.core.rng import RngStream
from watermark_lab.errors import ConfigurationError, GenerationError, SchemeError
from watermark_lab.models.core import DetectionResult, Prompt, TokenSequence, serialize_tokens
from watermark_lab.schemes.exp import (
    ExpParams,
    ExpScheme,
    exp_alignment_cost,
    exp_detect,
    exp_generate,
)
from watermark_lab.schemes.kgw import (
    KgwParams,
    KgwScheme,
    bias_distribution,
    is_green,
    kgw_detect,
    kgw_generate,
    kgw_green_list,
)
from watermark_lab.schemes.registry import build_scheme, default_attack_steps, scheme_names
from watermark_lab.schemes.synthetic import (
    SyntheticParams,
    SyntheticScheme,
    rejection_generate,
    synthetic_watermark,
)
from watermark_lab.schemes.unigram import UnigramParams, unigram_detect, unigram_generate
from watermark_lab.stats.hypothesis import one_proportion_z
from watermark_lab.toy_models.markov import MarkovModel, exact_law, sample


@pytest.fixture
def uniform20():
    return MarkovModel.uniform(20, order=1, length=100)


def test_z_statistic_values():
    assert one_proportion_z(75, 100, 0.5) == pytest.approx(5.0)
    assert one_proportion_z(80, 100, 0.5) == pytest.approx(6.0)


def test_green_membership_is_bit_exact(key):
    h = derive_subkey(key, serialize_tokens((3, 7)))
    assert is_green(key, (3,), 7, 0.25) == ((h % 65536) < 0.25 * 65536)
    assert (7 in kgw_green_list(key, (3,), 0.25, 20)) == is_green(key, (3,), 7, 0.25)


def test_green_list_covers_about_gamma(key):
    sizes = [len(kgw_green_list(key, (c,), 0.5, 20)) for c in range(50)]
    assert abs(np.mean(sizes) / 20 - 0.5) < 0.06


def test_bias_distribution():
    dist = np.array([0.5, 0.5])
    mask = np.array([True, False])
    assert bias_distribution(dist, mask, np.log(3.0)) == pytest.approx([0.75, 0.25])
    assert bias_distribution(dist, mask, np.inf) == pytest.approx([1.0, 0.0])
    # no green token with positive mass: fall back to the model row
    assert bias_distribution(np.array([0.0, 1.0]), mask, np.inf) == pytest.approx([0.0, 1.0])
    assert bias_distribution(dist, mask, 0.0) is dist


def test_kgw_zero_bias_matches_model_sampling(reference3, prompt, key):
    params = KgwParams(delta=0.0)
    y = kgw_generate(reference3, key, params, prompt, 12, RngStream(3, "g"))
    assert y == sample(reference3, prompt, 12, RngStream(3, "g"))


def test_kgw_hard_bias_detects(uniform20, prompt, key):
    params = KgwParams(delta=np.inf)
    y = kgw_generate(uniform20, key, params, prompt, 100, RngStream(5))
    result = kgw_detect(key, params, prompt, y)
    assert result.statistic == pytest.approx(10.0)
    assert result.decision == 1
    assert result.p_value < 1e-20


def test_kgw_detect_is_deterministic(key):
    params = KgwParams()
    y = TokenSequence(tokens=(4, 5, 6))
    a = kgw_detect(key, params, Prompt(tokens=(1,)), y)
    b = kgw_detect(key, params, Prompt(tokens=(1,)), y)
    assert a == b
    with pytest.raises(ValueError):
        kgw_detect(key, params, Prompt(), TokenSequence())


def test_unigram_threshold_is_strict(uniform20, prompt, key):
    params = UnigramParams(delta=np.inf)
    at_threshold = unigram_generate(uniform20, key, params, prompt, 36, RngStream(6))
    result = unigram_detect(key, params, prompt, at_threshold)
    assert result.statistic == pytest.approx(6.0)
    assert result.decision == 0
    above = unigram_generate(uniform20, key, params, prompt, 49, RngStream(6))
    assert unigram_detect(key, params, prompt, above).decision == 1


def test_exp_generation_ignores_rng(uniform20, prompt, key):
    scheme = ExpScheme(ExpParams(key_sequence_length=64), vocab_size=20)
    a = scheme.generate(uniform20, key, prompt, 30, RngStream(1))
    b = scheme.generate(uniform20, key, prompt, 30, RngStream(2))
    assert a == b


def test_exp_detects_watermarked_text(uniform20, prompt, key):
    params = ExpParams(key_sequence_length=64, resamples=99)
    y = exp_generate(uniform20, key, params, prompt, 30)
    result = exp_detect(key, params, y, 20)
    assert result.p_value == pytest.approx(0.01)
    assert result.decision == 1
    # default null stream is derived from (key, y)
    assert exp_detect(key, params, y, 20) == result


def test_exp_exhaustive_key_space(uniform20, prompt, key):
    params = ExpParams(key_sequence_length=64)
    y = exp_generate(uniform20, key, params, prompt, 30)
    others = [RngStream(i, "alt").secret_key() for i in range(9)]
    assert exp_detect(key, params, y, 20, key_space=others).p_value == pytest.approx(0.1)


def test_exp_alignment_cost_window_bounds(key, uniform20, prompt):
    params = ExpParams(key_sequence_length=64)
    y = exp_generate(uniform20, key, params, prompt, 10)
    xi = np.full((64, 20), np.exp(-1.0))
    assert exp_alignment_cost(xi, y, 4) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        exp_alignment_cost(xi, y, 11)


def test_exp_length_limits(uniform20, prompt, key):
    with pytest.raises(SchemeError):
        exp_generate(uniform20, key, ExpParams(key_sequence_length=64), prompt, 70)
    with pytest.raises(SchemeError):
        ExpScheme(ExpParams()).detect(key, prompt, TokenSequence(tokens=(1, 2)))


def test_p_value_schemes_report_normal_quantile():
    result = DetectionResult(statistic=3.0, p_value=0.05, decision=0, scheme="exp")
    assert ExpScheme(ExpParams()).z_score(result) == pytest.approx(1.6449, abs=1e-4)
    assert KgwScheme().z_score(result) == 3.0


def test_synthetic_generation_is_always_detected(uniform3, prompt, rng):
    scheme = SyntheticScheme(SyntheticParams(target_fp_rate=0.1))
    for i in range(20):
        key, sampler = scheme.watermark(uniform3, rng.child(f"key/{i}"))
        y = sampler(prompt, None, rng.child(f"gen/{i}"))
        assert scheme.detect(key, prompt, y).decision == 1
        assert y.length == 4
    assert scheme.exact_false_positive_rate() == 0.1
    assert KgwScheme().exact_false_positive_rate() is None


def test_synthetic_rejection_cap(uniform3, prompt, key, rng):
    params = SyntheticParams(target_fp_rate=1e-9, rejection_cap=5)
    with pytest.raises(GenerationError):
        rejection_generate(uniform3, key, params, prompt, 4, rng)


def test_registry():
    assert scheme_names() == ["exp", "kgw", "synthetic", "unigram"]
    assert default_attack_steps("kgw") == 200
    assert default_attack_steps("unigram") == 300
    assert default_attack_steps("synthetic") is None
    assert build_scheme("exp", {"resamples": 10}, vocab_size=20).vocab_size == 20
    assert build_scheme("kgw").params.gamma == 0.5
    with pytest.raises(ConfigurationError):
        build_scheme("nope")
    with pytest.raises(ConfigurationError):
        build_scheme("kgw", {"gamma": 1.5})
    with pytest.raises(ConfigurationError):
        build_scheme("synthetic", {})


def test_synthetic_watermark_matches_scheme(uniform3, prompt):
    params = SyntheticParams(target_fp_rate=0.2)
    key, sampler = synthetic_watermark(uniform3, params, RngStream(4, "wm"))
    assert key == SyntheticScheme(params).keygen(RngStream(4, "wm"))
    y = sampler(prompt, None, RngStream(4, "gen"))
    assert SyntheticScheme(params).detect(key, prompt, y).decision == 1


def green_count(result, T, gamma=0.5):
    return round(gamma * T + result.statistic * math.sqrt(T * gamma * (1 - gamma)))


def test_kgw_default_bias_favors_green(uniform20, prompt):
    params = KgwParams()
    T = 100
    counts = []
    for i in range(30):
        key = RngStream(i, "kgw/key").secret_key()
        y = kgw_generate(uniform20, key, params, prompt, T, RngStream(i, "kgw/generate"))
        counts.append(green_count(kgw_detect(key, params, prompt, y), T))
    assert np.mean(counts) > T / 2
    assert np.mean(counts) > 0.75 * T


def test_kgw_green_count_under_null():
    model = MarkovModel.uniform(256, order=1, length=256)
    prompt = Prompt(tokens=(0,))
    params = KgwParams()
    sigma = math.sqrt(256 * 0.25)
    for i in range(20):
        y = sample(model, prompt, 256, RngStream(i, "null/text"))
        key = RngStream(i, "null/key").secret_key()
        assert abs(green_count(kgw_detect(key, params, prompt, y), 256) - 128) <= 4 * sigma


def test_exp_sampling_is_distortion_free(reference3, prompt):
    # over fresh keys, two-token outputs follow the model's own law
    params = ExpParams(key_sequence_length=2)
    law = exact_law(reference3, prompt, 2)
    draws = 4000
    counts = dict.fromkeys(law, 0)
    for i in range(draws):
        key = RngStream(i, "exp/key").secret_key()
        counts[exp_generate(reference3, key, params, prompt, 2).tokens] += 1
    observed = [counts[tokens] for tokens in law]
    expected = [draws * p for p in law.values()]
    assert stats.chisquare(observed, expected).pvalue > 1e-3


@pytest.mark.parametrize("alpha", [0.05, 0.1, 0.2])
def test_exp_p_values_uniform_under_null(uniform20, prompt, alpha):
    params = ExpParams(key_sequence_length=10, resamples=99)
    runs = 400
    p_values = []
    for i in range(runs):
        y = sample(uniform20, prompt, 10, RngStream(i, "exp/null/text"))
        key = RngStream(i, "exp/null/key").secret_key()
        p_values.append(exp_detect(key, params, y, 20).p_value)
    rate = np.mean([p <= alpha for p in p_values])
    assert abs(rate - alpha) <= 3 * math.sqrt(alpha * (1 - alpha) / runs)


def test_unigram_detection_ignores_token_order(uniform20, prompt, key):
    params = UnigramParams()
    rng = np.random.default_rng(8)
    y = unigram_generate(uniform20, key, params, prompt, 60, RngStream(8))
    result = unigram_detect(key, params, prompt, y)
    for _ in range(10):
        shuffled = TokenSequence(tokens=tuple(int(t) for t in rng.permutation(y.tokens)))
        assert unigram_detect(key, params, prompt, shuffled) == result
