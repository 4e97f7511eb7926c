import sys
import types

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidgan.data import Sample, ToyCorpusConfig, synth_toy_corpus
from reidgan.semfilter import (
    CallableDetector,
    DetectorError,
    KeypointDetection,
    OracleDetector,
    detect_keypoints,
    face_present,
    filter_samples,
    load_external_detector,
    make_detector,
    verdict,
)


@pytest.fixture(scope="module")
def corpus():
    return synth_toy_corpus(ToyCorpusConfig(n_identities=3, n_sessions=2, samples_per_session=100), 11)


@pytest.mark.parametrize("size", [16, 32, 64])
def test_oracle_agrees_with_metadata(size):
    ds = synth_toy_corpus(ToyCorpusConfig(n_identities=3, n_sessions=2, samples_per_session=150, patch_size=size), size)
    det = OracleDetector()
    assert all(verdict(s.image, det).present == int(s.has_face) for s in ds)


def test_oracle_blank_image_has_no_face():
    det = OracleDetector()
    assert detect_keypoints(np.full((32, 32, 3), -1.0, np.float32), det).keypoints == ()


def test_oracle_keypoint_inside_unit_square(corpus):
    s = next(s for s in corpus if s.has_face)
    (kp,) = OracleDetector().detect(s.image).keypoints
    assert 0 <= kp.x <= 1 and 0 <= kp.y <= 0.5 and kp.confidence == 1.0


def test_face_present_examples():
    det = KeypointDetection.from_tuples([(0.2, 0.2, 0.1), (0.7, 0.3, 0.25)])
    assert face_present(det, 0.3).present == 0
    assert face_present(det, 0.25).present == 1
    assert face_present(det, 0.0).present == 1
    assert face_present(KeypointDetection(), 0.0).present == 0


def test_face_present_threshold_range():
    with pytest.raises(ValueError):
        face_present(KeypointDetection(), 1.5)


def test_missing_detector_raises():
    with pytest.raises(DetectorError):
        verdict(np.zeros((16, 16, 3), np.float32), None)


def test_detector_returning_wrong_type():
    class Bad:
        thread_safe = True

        def detect(self, image):
            return [(0.1, 0.1, 1.0)]

    with pytest.raises(DetectorError):
        detect_keypoints(np.zeros((16, 16, 3), np.float32), Bad())


def test_filter_preserves_order_and_stats(corpus):
    kept, stats = filter_samples(list(corpus), OracleDetector())
    expected = [s for s in corpus if s.has_face]
    assert [id(s) for s in kept] == [id(s) for s in expected]
    assert stats.n_total == len(corpus)
    assert stats.n_kept == len(expected)
    assert stats.retention == pytest.approx(len(expected) / len(corpus))
    for c, r in stats.per_class_retention().items():
        members = [s for s in corpus if s.label == c]
        assert r == pytest.approx(sum(s.has_face for s in members) / len(members))
    assert stats.as_dict()["kept"] == len(expected)


def test_filter_idempotent(corpus):
    det = OracleDetector()
    once, _ = filter_samples(list(corpus), det)
    twice, stats = filter_samples(once, det)
    assert [id(s) for s in twice] == [id(s) for s in once]
    assert stats.retention == 1.0


def test_filter_empty_input():
    kept, stats = filter_samples([], OracleDetector())
    assert kept == [] and stats.retention == 0.0


def _conf_detector():
    # confidence encoded in the first pixel
    return CallableDetector(lambda img: [(0.5, 0.5, float((img[0, 0, 0] + 1) / 2))])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.floats(0, 1), st.floats(0, 1))
def test_filter_monotone_in_threshold(values, t1, t2):
    lo, hi = sorted((t1, t2))
    samples = [Sample(np.full((16, 16, 3), v, np.float32), 0) for v in values]
    det = _conf_detector()
    kept_lo, _ = filter_samples(samples, det, lo)
    kept_hi, _ = filter_samples(samples, det, hi)
    assert {id(s) for s in kept_hi} <= {id(s) for s in kept_lo}


def test_external_detector_loading(monkeypatch):
    mod = types.ModuleType("fake_face_det")
    mod.always = lambda img: [(0.5, 0.5, 0.9)]
    mod.Never = type("Never", (), {"thread_safe": False, "detect": lambda self, img: KeypointDetection()})
    monkeypatch.setitem(sys.modules, "fake_face_det", mod)
    img = np.zeros((16, 16, 3), np.float32)
    assert verdict(img, load_external_detector("fake_face_det:always")).present == 1
    assert verdict(img, make_detector("external", "fake_face_det:Never")).present == 0
    with pytest.raises(DetectorError):
        load_external_detector("fake_face_det:missing")
    with pytest.raises(DetectorError):
        load_external_detector("no_colon")
    assert make_detector("none") is None
    with pytest.raises(DetectorError):
        make_detector("psychic")
