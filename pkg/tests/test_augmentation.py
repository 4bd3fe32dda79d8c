import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momentloc.augmentation import (AugmentConfig, combined_augment, sliding_window_sample, video_splice,
                                    window_length)
from momentloc.types import ClipSample, MomentSpan


def clip(n, s, e, d=3, cid="a", offset=0.0):
    rows = np.arange(n * d, dtype=np.float32).reshape(n, d) + offset
    return ClipSample(cid, rows, np.ones((2, 4), np.float32), MomentSpan(s, e))


class FixedRng:
    """Stand-in generator that replays chosen draws."""

    def __init__(self, uniform=None, integers=None, random=None):
        self._u, self._i, self._r = uniform, list(integers or []), random

    def uniform(self, lo, hi):
        return self._u

    def integers(self, lo, hi=None):
        if hi is None:
            lo, hi = 0, lo
        v = self._i.pop(0)
        assert lo <= v < hi
        return v

    def random(self):
        return self._r


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(ratio_interval=(0.0, 0.5))
    with pytest.raises(ValueError):
        AugmentConfig(ratio_interval=(0.8, 0.4))
    with pytest.raises(ValueError):
        AugmentConfig(splice_probability=1.5)


def test_sliding_window_example():
    c = clip(100, 40, 50)
    out = sliding_window_sample(c, AugmentConfig(), FixedRng(uniform=0.5, integers=[20]))
    assert out.num_frames == 50
    assert out.span == MomentSpan(20, 30)
    assert np.array_equal(out.video_features, c.video_features[20:70])
    assert out.text_features is c.text_features


def test_sliding_window_start_range():
    c = clip(100, 40, 50)
    with pytest.raises(AssertionError):
        sliding_window_sample(c, AugmentConfig(), FixedRng(uniform=0.5, integers=[0]))
    for start in (1, 40):
        assert sliding_window_sample(c, AugmentConfig(), FixedRng(uniform=0.5, integers=[start])).span.start == 40 - start


def test_sliding_window_clamps_to_span():
    assert window_length(0.8, 100, 90) == 90
    c = clip(100, 5, 94)
    # the window is exactly as long as the span, so only one start keeps it covered
    out = sliding_window_sample(c, AugmentConfig(), FixedRng(uniform=0.4, integers=[5]))
    assert out.num_frames == 90 and out.span == MomentSpan(0, 89)


def test_window_length_rounds_half_up():
    assert window_length(0.5, 5, 1) == 3
    assert window_length(0.45, 10, 1) == 5


def test_splice_example():
    v1, v2 = clip(60, 10, 20, cid="a"), clip(40, 0, 3, cid="b", offset=1000)
    out = video_splice(v1, v2, AugmentConfig(), FixedRng(random=0.1, integers=[15]))
    assert out.num_frames == 100 and out.span == MomentSpan(25, 35)
    assert np.array_equal(out.video_features[:15], v2.video_features[:15])
    assert np.array_equal(out.video_features[15:75], v1.video_features)
    assert np.array_equal(out.video_features[75:], v2.video_features[15:])
    assert out.text_features is v1.text_features


def test_splice_at_zero_appends_background():
    v1, v2 = clip(60, 10, 20), clip(40, 0, 3, offset=1000)
    out = video_splice(v1, v2, AugmentConfig(), FixedRng(random=0.1, integers=[0]))
    assert out.span == v1.span
    assert np.array_equal(out.video_features, np.concatenate([v1.video_features, v2.video_features]))


def test_splice_coin_miss_returns_input():
    v1, v2 = clip(60, 10, 20), clip(40, 0, 3)
    assert video_splice(v1, v2, AugmentConfig(), FixedRng(random=0.7)) is v1


def test_combined_disabled_is_identity():
    v1, v2 = clip(60, 10, 20), clip(40, 0, 3)
    cfg = AugmentConfig(sliding_window=False, splice=False)
    assert combined_augment(v1, v2, cfg, np.random.default_rng(0)) is v1


def test_combined_with_failed_coin_equals_window_alone():
    v1, v2 = clip(60, 10, 20), clip(40, 0, 3)
    a = combined_augment(v1, v2, AugmentConfig(splice_probability=0.0), np.random.default_rng(7))
    b = sliding_window_sample(v1, AugmentConfig(), np.random.default_rng(7))
    assert a.span == b.span and np.array_equal(a.video_features, b.video_features)


def test_determinism():
    v1, v2 = clip(80, 30, 45), clip(50, 0, 3, offset=500)
    a = combined_augment(v1, v2, AugmentConfig(), np.random.default_rng(11))
    b = combined_augment(v1, v2, AugmentConfig(), np.random.default_rng(11))
    assert a.span == b.span and np.array_equal(a.video_features, b.video_features)


@given(st.integers(2, 200), st.integers(1, 120), st.data())
@settings(max_examples=200, deadline=None)
def test_span_rows_survive_any_augmentation(n, l2, data):
    s = data.draw(st.integers(0, n - 1))
    e = data.draw(st.integers(s, n - 1))
    lo = data.draw(st.floats(0.05, 1.0))
    hi = data.draw(st.floats(lo, 1.0))
    p = data.draw(st.floats(0.0, 1.0))
    seed = data.draw(st.integers(0, 2**32 - 1))
    v1, v2 = clip(n, s, e), clip(l2, 0, 0, offset=1e6)
    out = combined_augment(v1, v2, AugmentConfig((lo, hi), p), np.random.default_rng(seed))
    assert 0 <= out.span.start <= out.span.end < out.num_frames
    assert np.array_equal(out.video_features[out.span.start:out.span.end + 1], v1.video_features[s:e + 1])
