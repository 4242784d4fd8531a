import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunematch.geometry import apply_homography
from prunematch.metrics import corner_error, error_auc, fit_homography, image_corners, match_precision


def random_homography(rng, jitter=0.05):
    H = np.eye(3) + rng.normal(scale=jitter, size=(3, 3))
    H[2, :2] *= 0.01
    H[:2, 2] = rng.normal(scale=3.0, size=2)
    return H / H[2, 2]


class TestFitHomography:
    @settings(max_examples=30)
    @given(st.integers(0, 2**31), st.integers(4, 40))
    def test_recovers_exact_homography(self, seed, n):
        rng = np.random.default_rng(seed)
        H = random_homography(rng)
        pa = rng.uniform(0, 64, size=(n, 2))
        est = fit_homography(pa, apply_homography(H, pa))
        assert est is not None
        np.testing.assert_allclose(est, H, atol=1e-6)

    def test_too_few_points(self):
        assert fit_homography(np.zeros((3, 2)), np.zeros((3, 2))) is None

    def test_collinear_points(self):
        pa = np.stack([np.arange(6.0), 2 * np.arange(6.0)], axis=1)
        assert fit_homography(pa, pa) is None


class TestCornerError:
    def test_corners(self):
        np.testing.assert_array_equal(image_corners((48, 64)), [[0, 0], [63, 0], [63, 47], [0, 47]])

    def test_identity_and_translation(self):
        H = np.eye(3)
        T = np.array([[1.0, 0, 3], [0, 1, 4], [0, 0, 1]])
        assert corner_error(H, H, (64, 64)) == 0.0
        assert corner_error(T, H, (64, 64)) == pytest.approx(5.0)

    def test_missing_estimate(self):
        assert corner_error(None, np.eye(3), (8, 8)) == np.inf


class TestAuc:
    def test_all_perfect(self):
        assert error_auc([0.0, 0.0]) == {3: 1.0, 5: 1.0, 10: 1.0}

    def test_all_failed(self):
        assert error_auc([np.inf] * 3) == {3: 0.0, 5: 0.0, 10: 0.0}

    def test_single_error_closed_form(self):
        # recall steps from 0 to 1 at e=2: area to t is (t - 2) plus the ramp 0.5 * 2 * 1
        out = error_auc([2.0], thresholds=(5, 10))
        assert out[5] == pytest.approx((3 + 1) / 5)
        assert out[10] == pytest.approx((8 + 1) / 10)

    def test_monotone_in_errors(self):
        rng = np.random.default_rng(0)
        e = rng.uniform(0, 12, 50)
        a, b = error_auc(e), error_auc(e + 1)
        assert all(a[t] >= b[t] for t in a)

    def test_empty(self):
        assert error_auc([]) == {3: 0.0, 5: 0.0, 10: 0.0}


def test_match_precision():
    H = np.eye(3)
    pa = np.array([[1.0, 1.0], [5.0, 5.0]])
    assert match_precision(pa, pa + [[0.0, 2.0], [0.0, 4.0]], H) == 0.5
    assert np.isnan(match_precision(np.zeros((0, 2)), np.zeros((0, 2)), H))
